"""Dataset manifests, frame labeling, and training-set augmentation.

Manifests are JSON-Lines, one utterance per line, with keyword times in
seconds for positive utterances. Positive training examples are rebuilt
in three variants (keyword alone, filler+keyword, filler+keyword+filler);
extra negatives come from cutting variant-3 compositions at the keyword
midpoint. SpecAugment masking and noise/RIR mixing round out the set.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .features import AudioBuffer, FeatureMatrix

AMBIGUOUS = -1  # target value for frames excluded from the loss


@dataclass
class ManifestEntry:
    utt_id: str
    wav_path: str
    speaker_id: str
    label: str  # "positive" or "negative"
    keyword_start_s: float = None
    keyword_end_s: float = None

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise ValueError(f"label must be positive/negative, got {self.label!r}")
        if self.label == "positive":
            if self.keyword_start_s is None or self.keyword_end_s is None:
                raise ValueError(f"positive entry {self.utt_id} missing keyword times")
            if not (0 <= self.keyword_start_s < self.keyword_end_s):
                raise ValueError(
                    f"bad keyword span [{self.keyword_start_s}, {self.keyword_end_s})")

    @property
    def is_positive(self):
        return self.label == "positive"


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entries.append(ManifestEntry(**json.loads(line)))
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            rec = {"utt_id": e.utt_id, "wav_path": e.wav_path,
                   "speaker_id": e.speaker_id, "label": e.label}
            if e.is_positive:
                rec["keyword_start_s"] = e.keyword_start_s
                rec["keyword_end_s"] = e.keyword_end_s
            fh.write(json.dumps(rec) + "\n")


@dataclass
class LabeledExample:
    features: FeatureMatrix
    targets: np.ndarray  # per-frame {1, 0, AMBIGUOUS}
    weights: np.ndarray  # 0 for ambiguous frames

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int8)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        t = self.features.num_frames
        if len(self.targets) != t or len(self.weights) != t:
            raise ValueError("targets/weights length must equal frame count")


@dataclass
class AugmentConfig:
    time_mask_max: int = 20
    freq_mask_max: int = 30
    n_time_masks: int = 1
    n_freq_masks: int = 1
    snr_db_min: float = 0.0
    snr_db_max: float = 20.0

    def __post_init__(self):
        if self.time_mask_max < 0 or self.freq_mask_max < 0:
            raise ValueError("mask bounds must be non-negative")


def seconds_to_frame(t_s, hop_ms=10.0):
    return int(round(t_s * 1000.0 / hop_ms))


def label_utterance(entry, feat, max_positive_frames=40):
    """Frame targets: up to `max_positive_frames` ones centred on the keyword
    midpoint for positives (other frames ambiguous), all zeros for negatives."""
    t = feat.num_frames
    if not entry.is_positive:
        return LabeledExample(feat, np.zeros(t, dtype=np.int8), np.ones(t))
    kw_start = seconds_to_frame(entry.keyword_start_s, feat.frame_hop_ms)
    kw_end = seconds_to_frame(entry.keyword_end_s, feat.frame_hop_ms)
    mid = (kw_start + kw_end) // 2
    half = max_positive_frames // 2
    lo = max(mid - half, kw_start, 0)
    hi = min(mid + half, kw_end, t)
    if hi <= lo:
        raise ValueError(f"keyword span of {entry.utt_id} yields no positive frames")
    targets = np.full(t, AMBIGUOUS, dtype=np.int8)
    weights = np.zeros(t, dtype=np.float32)
    targets[lo:hi] = 1
    weights[lo:hi] = 1.0
    return LabeledExample(feat, targets, weights)


@dataclass
class ComposedUtterance:
    """Audio assembled around a keyword segment, with the keyword span tracked
    through concatenation (in samples)."""
    audio: AudioBuffer
    keyword_start_sample: int
    keyword_end_sample: int

    @property
    def keyword_start_s(self):
        return self.keyword_start_sample / self.audio.sample_rate

    @property
    def keyword_end_s(self):
        return self.keyword_end_sample / self.audio.sample_rate


def extract_keyword_segment(entry, audio):
    sr = audio.sample_rate
    lo = int(round(entry.keyword_start_s * sr))
    hi = int(round(entry.keyword_end_s * sr))
    hi = min(hi, len(audio.samples))
    if hi <= lo:
        raise ValueError(f"empty keyword segment in {entry.utt_id}")
    return AudioBuffer(audio.samples[lo:hi].copy(), sr)


def build_positive_variants(entry, audio, fillers, rng, which=(1, 2, 3)):
    """Compositions of one positive utterance's keyword segment:
    1) the keyword alone, 2) filler + keyword, 3) filler + keyword + filler."""
    kw = extract_keyword_segment(entry, audio)
    sr = kw.sample_rate
    n_kw = len(kw.samples)
    if (2 in which or 3 in which) and not fillers:
        raise ValueError("filler pool required for variants 2 and 3")
    variants = []
    if 1 in which:
        variants.append(ComposedUtterance(kw, 0, n_kw))
    if 2 in which:
        pre = fillers[rng.integers(len(fillers))]
        v2 = np.concatenate([pre.samples, kw.samples])
        variants.append(ComposedUtterance(
            AudioBuffer(v2, sr), len(pre.samples), len(pre.samples) + n_kw))
    if 3 in which:
        pre2 = fillers[rng.integers(len(fillers))]
        post = fillers[rng.integers(len(fillers))]
        v3 = np.concatenate([pre2.samples, kw.samples, post.samples])
        variants.append(ComposedUtterance(
            AudioBuffer(v3, sr), len(pre2.samples), len(pre2.samples) + n_kw))
    return variants


def build_negative_cuts(composed):
    """Split a variant-3 composition at the keyword midpoint; both halves are
    used as negative training audio."""
    mid = (composed.keyword_start_sample + composed.keyword_end_sample) // 2
    n = len(composed.audio.samples)
    if mid <= 0 or mid >= n:
        raise ValueError("keyword midpoint falls on an utterance boundary")
    sr = composed.audio.sample_rate
    return (AudioBuffer(composed.audio.samples[:mid].copy(), sr),
            AudioBuffer(composed.audio.samples[mid:].copy(), sr))


def spec_augment(feat, cfg, rng):
    """One time mask (0-20 frames, all bins zeroed) and one frequency mask
    (0-30 bins, zeroed across all frames), positions uniform."""
    frames = feat.frames.copy()
    t, d = frames.shape
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, cfg.time_mask_max + 1))
        width = min(width, t)
        if width > 0:
            start = int(rng.integers(0, t - width + 1))
            frames[start:start + width, :] = 0.0
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, cfg.freq_mask_max + 1))
        width = min(width, d)
        if width > 0:
            start = int(rng.integers(0, d - width + 1))
            frames[:, start:start + width] = 0.0
    return FeatureMatrix(frames, feat.frame_hop_ms)


def mix_noise_snr(speech, noise, snr_db):
    """Add noise scaled so speech power over noise power equals snr_db.

    Silent noise is a no-op. Noise shorter than the speech is looped,
    longer noise is truncated.
    """
    n = len(speech.samples)
    ns = noise.samples
    if len(ns) == 0:
        return AudioBuffer(speech.samples.copy(), speech.sample_rate)
    reps = -(-n // len(ns))
    ns = np.tile(ns, reps)[:n]
    p_speech = float(np.mean(speech.samples ** 2))
    p_noise = float(np.mean(ns ** 2))
    if p_noise == 0.0:
        return AudioBuffer(speech.samples.copy(), speech.sample_rate)
    scale = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer(speech.samples + scale * ns, speech.sample_rate)


def convolve_rir(speech, rir):
    """Linear convolution with a room impulse response, truncated to the
    speech length and peak-normalized back to the dry peak."""
    h = np.asarray(rir.samples, dtype=np.float64)
    if len(h) == 0:
        raise ValueError("empty RIR")
    if len(h) > len(speech.samples):
        raise ValueError("RIR longer than the speech signal")
    wet = np.convolve(speech.samples, h)[:len(speech.samples)]
    dry_peak = float(np.max(np.abs(speech.samples)))
    wet_peak = float(np.max(np.abs(wet)))
    if wet_peak > 0 and dry_peak > 0:
        wet *= dry_peak / wet_peak
    return AudioBuffer(wet, speech.sample_rate)


@dataclass
class Batch:
    features: np.ndarray  # (N, D, T_max), zero padded
    targets: np.ndarray   # (N, T_max), padding = 0
    weights: np.ndarray   # (N, T_max), padding = 0
    lengths: np.ndarray = field(default=None)


def batch_iterator(examples, batch_size, rng):
    """One epoch of shuffled, zero-padded batches; every example appears
    exactly once. Padded frames carry weight 0."""
    if not examples:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(examples))
    for i in range(0, len(order), batch_size):
        chunk = [examples[j] for j in order[i:i + batch_size]]
        d = chunk[0].features.dim
        t_max = max(ex.features.num_frames for ex in chunk)
        n = len(chunk)
        feats = np.zeros((n, d, t_max), dtype=np.float32)
        targets = np.zeros((n, t_max), dtype=np.float32)
        weights = np.zeros((n, t_max), dtype=np.float32)
        lengths = np.zeros(n, dtype=np.int64)
        for k, ex in enumerate(chunk):
            t = ex.features.num_frames
            feats[k, :, :t] = ex.features.frames.T
            tgt = ex.targets.astype(np.float32)
            tgt[ex.targets == AMBIGUOUS] = 0.0
            targets[k, :t] = tgt
            weights[k, :t] = ex.weights
            lengths[k] = t
        yield Batch(feats, targets, weights, lengths)
