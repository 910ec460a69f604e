"""WAV reading and the 80-dim log mel-filterbank frontend.

Both the keyword detector and the speaker-verification extractor consume
the same representation: 25 ms Hamming windows, 10 ms hop, 80 triangular
mel filters, natural log energies.
"""

import wave
from dataclasses import dataclass

import numpy as np


class AudioFormatError(ValueError):
    """Raised when a WAV file violates the PCM16/mono/16kHz contract."""


@dataclass
class AudioBuffer:
    samples: np.ndarray  # float amplitudes in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


@dataclass
class FbankConfig:
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    fmin: float = 20.0
    fmax: float = 7600.0
    log_floor: float = 1e-10
    preemphasis: float = 0.97

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (self.win_ms > self.hop_ms > 0):
            raise ValueError("require win_ms > hop_ms > 0")
        if not (0 <= self.fmin < self.fmax):
            raise ValueError("require 0 <= fmin < fmax")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # T x D
    frame_hop_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def read_wav(path):
    """Read a RIFF/WAVE file as a normalized AudioBuffer.

    Only 16-bit PCM, mono, 16 kHz audio is accepted; anything else raises
    AudioFormatError naming the violated property.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise AudioFormatError(f"malformed WAV header: {exc}") from exc
    if channels != 1:
        raise AudioFormatError(f"channels={channels}, expected mono")
    if width != 2:
        raise AudioFormatError(f"sample width={8 * width} bits, expected 16-bit PCM")
    if rate != 16000:
        raise AudioFormatError(f"sample_rate={rate}, expected 16000")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples=samples, sample_rate=rate)


def write_wav(path, audio):
    """Write an AudioBuffer as 16-bit PCM (values clipped to [-1, 1))."""
    pcm = np.clip(audio.samples, -1.0, 32767.0 / 32768.0)
    pcm = np.round(pcm * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, fft_size, sample_rate, fmin, fmax):
    """Triangular mel filters as an (n_mels, fft_size//2 + 1) weight matrix."""
    if fmax > sample_rate / 2:
        raise ValueError("fmax exceeds Nyquist")
    n_bins = fft_size // 2 + 1
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / fft_size
    weights = np.zeros((n_mels, n_bins))
    for k in range(n_mels):
        left, center, right = hz_pts[k], hz_pts[k + 1], hz_pts[k + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        weights[k] = np.maximum(0.0, np.minimum(up, down))
    return weights


def filterbank_center_freqs(cfg, sample_rate=16000):
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def num_frames(n_samples, win_samples, hop_samples):
    if n_samples < win_samples:
        raise ValueError(
            f"audio shorter than one window: {n_samples} < {win_samples} samples")
    return 1 + (n_samples - win_samples) // hop_samples


def compute_log_fbank(audio, cfg=None):
    """Log mel-filterbank features, one row per 10 ms frame.

    Pipeline: pre-emphasis, Hamming window, power spectrum, triangular mel
    filterbank, natural log of max(energy, log_floor).
    """
    cfg = cfg or FbankConfig()
    sr = audio.sample_rate
    win = int(round(cfg.win_ms * sr / 1000.0))
    hop = int(round(cfg.hop_ms * sr / 1000.0))
    x = audio.samples
    t = num_frames(len(x), win, hop)

    emph = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    framed = emph[idx] * np.hamming(win)[None, :]

    spectrum = np.fft.rfft(framed, n=cfg.fft_size, axis=1)
    power = np.abs(spectrum) ** 2
    fbank = mel_filterbank(cfg.n_mels, cfg.fft_size, sr, cfg.fmin, cfg.fmax)
    energies = power @ fbank.T
    logf = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureMatrix(frames=logf, frame_hop_ms=cfg.hop_ms)


def apply_cmn(feat):
    """Per-utterance cepstral mean normalization: zero mean per dimension."""
    frames = feat.frames
    if frames.shape[0] < 1:
        raise ValueError("empty feature matrix")
    return FeatureMatrix(frames=frames - frames.mean(axis=0, keepdims=True),
                         frame_hop_ms=feat.frame_hop_ms)
