"""Trial scoring and detection metrics: FAR/FRR, DET sweeps, EER, the
weighted detection cost FRR + 19*FAR, minimum-cost thresholds, threshold
transfer between splits, and real-time-factor accounting.

Two-stage accounting: a target trial whose utterance never fires the
keyword detector is a false rejection at every SV threshold; a nontarget
trial that never fires is a correct rejection.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import detector as det_mod
from . import mdtc as mdtc_mod
from . import sv as sv_mod
from .features import apply_cmn, compute_log_fbank

DEFAULT_ALPHA = 19.0


@dataclass
class Trial:
    enroll_speaker_id: str
    test_utt_id: str
    label: str  # "target" or "nontarget"

    def __post_init__(self):
        if self.label not in ("target", "nontarget"):
            raise ValueError(f"trial label must be target/nontarget, got {self.label!r}")

    @property
    def is_target(self):
        return self.label == "target"


@dataclass
class ScoredTrial:
    trial: Trial
    kws_fired: bool
    sv_score: float = None  # absent iff not fired

    def __post_init__(self):
        if self.sv_score is not None and not self.kws_fired:
            raise ValueError("sv_score present on a non-fired trial")


@dataclass
class CostReport:
    alpha: float
    table: list  # rows {threshold, far, frr, cd}
    min_cd: float
    argmin_threshold: float
    eer: float

    def to_json(self):
        return json.dumps({
            "alpha": self.alpha,
            "min_cd": self.min_cd,
            "argmin_threshold": self.argmin_threshold,
            "eer": self.eer,
            "table": self.table,
        }, indent=2)


def read_trials(path):
    """Whitespace-separated lines: enroll_speaker test_utt label."""
    trials = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"trials line {ln}: expected 3 fields, got {len(parts)}")
            trials.append(Trial(*parts))
    return trials


def score_trials(kws_model, sv_models, trials, audio_by_utt, profiles,
                 gamma=0.01, fbank_cfg=None, cmn=True):
    """Run the full pipeline per trial: fbank -> MDTC -> detect -> locate ->
    extract -> embed -> cosine against the enrollment profile (mean-fused
    when two SV models are given)."""
    if not isinstance(sv_models, (list, tuple)):
        sv_models = [sv_models]
    det_cfg = det_mod.DetectorConfig(gamma=gamma)
    scored = []
    for trial in trials:
        if trial.enroll_speaker_id not in profiles:
            raise KeyError(f"no enrollment profile for {trial.enroll_speaker_id}")
        audio = audio_by_utt[trial.test_utt_id]
        feat = compute_log_fbank(audio, fbank_cfg)
        if cmn:
            feat = apply_cmn(feat)
        track = mdtc_mod.forward(kws_model, feat)
        event = det_mod.detect(track, det_cfg)
        if not event.fired:
            scored.append(ScoredTrial(trial, kws_fired=False))
            continue
        segment = det_mod.extract_segment(audio, event.start_frame, event.end_frame)
        seg_feat = compute_log_fbank(segment, fbank_cfg)
        if cmn:
            seg_feat = apply_cmn(seg_feat)
        profile = profiles[trial.enroll_speaker_id]
        scores = [sv_mod.cosine_score(profile, sv_mod.embed_utterance(m, seg_feat))
                  for m in sv_models]
        score = scores[0] if len(scores) == 1 else sv_mod.fuse_scores(*scores)
        scored.append(ScoredTrial(trial, kws_fired=True, sv_score=score))
    return scored


def far_frr(scored, threshold):
    """(FAR, FRR) at one SV threshold; unfired targets always count as FR."""
    n_target = sum(1 for s in scored if s.trial.is_target)
    n_nontarget = len(scored) - n_target
    if n_target == 0 or n_nontarget == 0:
        raise ValueError("need at least one target and one nontarget trial")
    fr = sum(1 for s in scored if s.trial.is_target
             and (not s.kws_fired or s.sv_score < threshold))
    fa = sum(1 for s in scored if not s.trial.is_target
             and s.kws_fired and s.sv_score >= threshold)
    return fa / n_nontarget, fr / n_target


def _sweep_thresholds(scored):
    scores = sorted({s.sv_score for s in scored if s.sv_score is not None})
    return [-np.inf] + scores + [np.inf]


def det_curve(scored):
    """(threshold, FAR, FRR) rows over all distinct scores plus sentinels.
    FAR is non-increasing and FRR non-decreasing in the threshold.

    Counting is done with sorted-array bisection so large trial sets sweep
    in O(n log n); each row matches far_frr() at that threshold exactly.
    """
    n_target = sum(1 for s in scored if s.trial.is_target)
    n_nontarget = len(scored) - n_target
    if n_target == 0 or n_nontarget == 0:
        raise ValueError("need at least one target and one nontarget trial")
    t_scores = np.sort([s.sv_score for s in scored
                        if s.trial.is_target and s.kws_fired])
    nt_scores = np.sort([s.sv_score for s in scored
                         if not s.trial.is_target and s.kws_fired])
    unfired_targets = n_target - len(t_scores)
    ths = np.asarray(_sweep_thresholds(scored))
    # scores strictly below the threshold are rejections
    fr = unfired_targets + np.searchsorted(t_scores, ths, side="left")
    fa = len(nt_scores) - np.searchsorted(nt_scores, ths, side="left")
    return [(float(th), int(a) / n_nontarget, int(r) / n_target)
            for th, a, r in zip(ths, fa, fr)]


def eer(scored):
    """Rate at the FAR = FRR crossing of the DET sweep, linearly interpolated
    between adjacent sweep points when there is no exact crossing."""
    curve = det_curve(scored)
    diffs = [far - frr for _, far, frr in curve]
    for i, d in enumerate(diffs):
        if d == 0.0:
            return curve[i][1]
        if d < 0.0:
            if i == 0:
                return curve[0][1]
            _, f1, r1 = curve[i - 1]
            _, f2, r2 = curve[i]
            denom = (r2 - r1) - (f2 - f1)
            if denom == 0.0:
                return 0.5 * (f1 + r1)
            u = (f1 - r1) / denom
            return f1 + (f2 - f1) * u
    return curve[-1][1]


def detection_cost(frr, far, alpha=DEFAULT_ALPHA):
    """Weighted detection cost: FRR + alpha * FAR."""
    return frr + alpha * far


def min_cd(scored, alpha=DEFAULT_ALPHA):
    """Exhaustive threshold sweep; returns (min cost, minimizing threshold,
    smallest threshold on ties)."""
    best_cd, best_th = None, None
    for th, far, frr in det_curve(scored):
        cd = detection_cost(frr, far, alpha)
        if best_cd is None or cd < best_cd:
            best_cd, best_th = cd, th
    return best_cd, best_th


def cost_report(scored, alpha=DEFAULT_ALPHA):
    table = [{"threshold": th, "far": far, "frr": frr,
              "cd": detection_cost(frr, far, alpha)}
             for th, far, frr in det_curve(scored)]
    mc, th = min_cd(scored, alpha)
    return CostReport(alpha=alpha, table=table, min_cd=mc,
                      argmin_threshold=th, eer=eer(scored))


def threshold_transfer(dev_report, eval_scored, alpha=None):
    """Apply the dev-set minimizing threshold unchanged to another split and
    report the actual cost there (not that split's own minimum)."""
    alpha = dev_report.alpha if alpha is None else alpha
    far, frr = far_frr(eval_scored, dev_report.argmin_threshold)
    return detection_cost(frr, far, alpha)


def write_det_csv(path, scored):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,far,frr\n")
        for th, far, frr in det_curve(scored):
            fh.write(f"{th},{far},{frr}\n")


def measure_rtf(processing_seconds, audio_seconds):
    """Real-time factor: processing time over audio duration."""
    if audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    return processing_seconds / audio_seconds


def sv_normalized_rtf(sv_processing_seconds, total_eval_audio_seconds):
    """SV processing time divided by the TOTAL corpus duration, not just the
    triggered segments the SV stage actually saw."""
    if total_eval_audio_seconds <= 0:
        raise ValueError("corpus duration must be positive")
    return sv_processing_seconds / total_eval_audio_seconds


def time_kws_rtf(kws_model, audio_list, fbank_cfg=None, cmn=True):
    """Time fbank + detector forward over a list of AudioBuffers."""
    total_audio = sum(a.duration_s for a in audio_list)
    t0 = time.perf_counter()
    for audio in audio_list:
        feat = compute_log_fbank(audio, fbank_cfg)
        if cmn:
            feat = apply_cmn(feat)
        mdtc_mod.forward(kws_model, feat)
    return measure_rtf(time.perf_counter() - t0, total_audio)
