"""Trigger decisions from posterior tracks, keyword location estimation,
and audio segment extraction for the speaker-verification stage."""

from dataclasses import dataclass

import numpy as np

from .features import AudioBuffer

FRAME_HOP_SAMPLES = 160  # 10 ms at 16 kHz


@dataclass
class DetectorConfig:
    gamma: float = 0.01
    smoothing_window: int = 1  # 1 = no smoothing

    def __post_init__(self):
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must be in (0, 1)")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")


@dataclass
class TriggerEvent:
    fired: bool
    fire_frame: int  # first frame with posterior >= gamma; -1 if none
    start_frame: int
    middle_frame: int
    end_frame: int
    peak_posterior: float


def smooth_posteriors(posteriors, window):
    """Causal moving average; window 1 is the identity."""
    if window == 1:
        return posteriors
    cs = np.cumsum(posteriors)
    out = cs.copy()
    if window < len(posteriors):
        out[window:] -= cs[:-window]
    counts = np.minimum(np.arange(1, len(posteriors) + 1), window)
    return out / counts


def estimate_location(track, keyword_end_frame=None):
    """Keyword middle = argmax posterior (earliest tie); start mirrors the
    end frame around the middle, clamped at zero.

    The end frame defaults to the last frame of the utterance, matching the
    wake-word layout where the keyword sits at the end.
    """
    y = np.asarray(track.posteriors)
    if len(y) == 0:
        raise ValueError("empty posterior track")
    end = keyword_end_frame if keyword_end_frame is not None else len(y) - 1
    middle = int(np.argmax(y))
    start = max(0, 2 * middle - end)
    return start, middle


def detect(track, cfg=None):
    """Fire when any posterior reaches gamma; location per estimate_location."""
    cfg = cfg or DetectorConfig()
    y = np.asarray(track.posteriors, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("empty posterior track")
    y = smooth_posteriors(y, cfg.smoothing_window)
    peak = float(y.max())
    fired = peak >= cfg.gamma
    above = np.nonzero(y >= cfg.gamma)[0]
    fire_frame = int(above[0]) if fired else -1
    end = len(y) - 1
    middle = int(np.argmax(y))
    start = max(0, 2 * middle - end)
    return TriggerEvent(fired=fired, fire_frame=fire_frame, start_frame=start,
                        middle_frame=middle, end_frame=end, peak_posterior=peak)


def extract_segment(audio, start_frame, end_frame):
    """Slice samples [start_frame*160, end_frame*160) clipped to the buffer."""
    if end_frame <= start_frame:
        raise ValueError(f"empty frame range [{start_frame}, {end_frame})")
    lo = max(0, start_frame) * FRAME_HOP_SAMPLES
    hi = min(end_frame * FRAME_HOP_SAMPLES, len(audio.samples))
    if hi <= lo:
        raise ValueError("frame range lies outside the audio")
    return AudioBuffer(audio.samples[lo:hi].copy(), audio.sample_rate)
