"""Single `pvt` binary tying the pipeline together.

Subcommands: features, train-kws, train-sv, finetune-sv, detect, enroll,
score, evaluate, rtf. Every subcommand reads the TOML run config, seeds
from --seed, and writes its artifacts under --out. Exit codes: 0 success,
1 validation/usage error, 2 runtime error.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import container, data, detector, kws_train, mdtc, metrics, sv
from .config import ConfigError, load_config
from .features import apply_cmn, compute_log_fbank, read_wav


class CliError(ValueError):
    """User-facing validation error (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _load_features(entry, cfg):
    audio = read_wav(entry.wav_path)
    feat = compute_log_fbank(audio, cfg.features.fbank_config())
    if cfg.features.cmn:
        feat = apply_cmn(feat)
    return audio, feat


def _speaker_labels(entries):
    speakers = sorted({e.speaker_id for e in entries})
    return {spk: i for i, spk in enumerate(speakers)}


def _load_kws_model(cfg, path):
    model = mdtc.build_model(cfg.mdtc.mdtc_config())
    container.load_checkpoint(path, model.store, cfg.section_hash("mdtc"))
    return model


def _load_sv_model(cfg, path, n_classes=0):
    sv_cfg = cfg.sv.sv_config()
    attrs = container.read_container(path)[1]
    sv_cfg.n_classes = attrs.get("n_classes", n_classes)
    model = sv.build_extractor(sv_cfg)
    container.load_checkpoint(path, model.store)
    return model


# ---------------------------------------------------------------------------
# subcommands

def cmd_features(args, cfg, out):
    entries = data.read_manifest(args.manifest)
    tensors = {}
    for entry in entries:
        _, feat = _load_features(entry, cfg)
        tensors[entry.utt_id] = feat.frames.astype(np.float32)
    container.write_container(out / "features.pvtk", tensors,
                              {"kind": "features"})
    print(f"wrote features for {len(tensors)} utterances")
    return 0


def cmd_train_kws(args, cfg, out):
    entries = data.read_manifest(args.manifest)
    train_cfg = cfg.kws_train.train_config(seed=args.seed)
    train_entries, val_entries = kws_train.split_train_val(
        entries, train_cfg.val_fraction, seed=args.seed)

    def make_examples(items):
        return [data.label_utterance(e, _load_features(e, cfg)[1]) for e in items]

    model = mdtc.build_model(cfg.mdtc.mdtc_config(), seed=args.seed)
    report = kws_train.train_kws(model, make_examples(train_entries),
                                 make_examples(val_entries), train_cfg)
    container.save_checkpoint(out / "kws.ckpt", model.store,
                              cfg.section_hash("mdtc"), kind="kws")
    report.write_jsonl(out / "kws_train_report.jsonl")
    print(f"stopped at epoch {report.stopped_epoch}, "
          f"best epoch {report.best_epoch}")
    return 0


def _sv_dataset(entries, cfg, labels, keyword_only=True):
    dataset = []
    for entry in entries:
        audio, _ = _load_features(entry, cfg)
        if keyword_only and entry.is_positive:
            audio = data.extract_keyword_segment(entry, audio)
        feat = compute_log_fbank(audio, cfg.features.fbank_config())
        if cfg.features.cmn:
            feat = apply_cmn(feat)
        dataset.append((feat, labels[entry.speaker_id]))
    return dataset


def cmd_train_sv(args, cfg, out):
    entries = data.read_manifest(args.manifest)
    labels = _speaker_labels(entries)
    sv_cfg = cfg.sv.sv_config()
    sv_cfg.n_classes = len(labels)
    model = sv.build_extractor(sv_cfg, seed=args.seed)
    dataset = _sv_dataset(entries, cfg, labels)
    report = sv.train_sv(model, dataset, cfg.sv.sv_train_config(seed=args.seed))
    _save_sv(out / "sv.ckpt", model, labels)
    report.write_jsonl(out / "sv_train_report.jsonl")
    print(f"trained SV model on {len(labels)} speakers")
    return 0


def _save_sv(path, model, labels):
    tensors = {f"param/{k}": v for k, v in model.store.params.items()}
    tensors.update({f"buffer/{k}": v for k, v in model.store.buffers.items()})
    container.write_container(path, tensors, {
        "kind": "sv", "n_classes": model.cfg.n_classes,
        "labels": labels,
    })


def cmd_finetune_sv(args, cfg, out):
    entries = data.read_manifest(args.manifest)
    labels = _speaker_labels(entries)
    model = _load_sv_model(cfg, args.init, n_classes=len(labels))
    dataset = _sv_dataset(entries, cfg, labels)
    report = sv.finetune(model, dataset, cfg.sv.sv_train_config(seed=args.seed))
    _save_sv(out / "sv_finetuned.ckpt", model, labels)
    report.write_jsonl(out / "sv_finetune_report.jsonl")
    return 0


def cmd_detect(args, cfg, out):
    entries = data.read_manifest(args.manifest)
    model = _load_kws_model(cfg, args.kws)
    det_cfg = cfg.detector.detector_config()
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        for entry in entries:
            _, feat = _load_features(entry, cfg)
            track = mdtc.forward(model, feat)
            ev = detector.detect(track, det_cfg)
            fh.write(json.dumps({
                "utt_id": entry.utt_id, "fired": ev.fired,
                "fire_frame": ev.fire_frame, "start_frame": ev.start_frame,
                "middle_frame": ev.middle_frame, "end_frame": ev.end_frame,
                "peak_posterior": ev.peak_posterior,
            }) + "\n")
    print(f"detected over {len(entries)} utterances")
    return 0


def cmd_enroll(args, cfg, out):
    entries = data.read_manifest(args.manifest)
    model = _load_sv_model(cfg, args.sv)
    by_speaker = {}
    for entry in entries:
        audio, _ = _load_features(entry, cfg)
        if entry.is_positive:
            audio = data.extract_keyword_segment(entry, audio)
        feat = compute_log_fbank(audio, cfg.features.fbank_config())
        if cfg.features.cmn:
            feat = apply_cmn(feat)
        emb = sv.embed_utterance(model, feat)
        by_speaker.setdefault(entry.speaker_id, []).append(emb)
    tensors = {}
    for spk, embs in by_speaker.items():
        tensors[spk] = sv.enroll(spk, embs).vector.astype(np.float32)
    container.write_container(out / "profiles.pvtk", tensors,
                              {"kind": "profiles"})
    print(f"enrolled {len(tensors)} speakers")
    return 0


def load_profiles(path):
    tensors, attrs = container.read_container(path)
    if attrs.get("kind") != "profiles":
        raise CliError(f"{path} is not a profiles container")
    return {spk: sv.EnrollmentProfile(spk, vec.astype(np.float64))
            for spk, vec in tensors.items()}


def cmd_score(args, cfg, out):
    trials = metrics.read_trials(args.trials)
    entries = data.read_manifest(args.manifest)
    audio_by_utt = {e.utt_id: read_wav(e.wav_path) for e in entries}
    kws_model = _load_kws_model(cfg, args.kws)
    sv_models = [_load_sv_model(cfg, args.sv)]
    if args.sv2:
        sv_models.append(_load_sv_model(cfg, args.sv2))
    profiles = load_profiles(args.profiles)
    scored = metrics.score_trials(
        kws_model, sv_models, trials, audio_by_utt, profiles,
        gamma=cfg.detector.gamma, fbank_cfg=cfg.features.fbank_config(),
        cmn=cfg.features.cmn)
    with open(out / "scores.txt", "w", encoding="utf-8") as fh:
        for s in scored:
            val = f"{s.sv_score:.6f}" if s.sv_score is not None else "NA"
            fh.write(f"{s.trial.enroll_speaker_id} {s.trial.test_utt_id} {val}\n")
    print(f"scored {len(scored)} trials")
    return 0


def read_scored_trials(trials_path, scores_path):
    """Join a trials file with a scores file ('NA' marks unfired trials)."""
    trials = metrics.read_trials(trials_path)
    by_key = {}
    with open(scores_path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise CliError(f"bad scores line: {line.rstrip()!r}")
            by_key[(parts[0], parts[1])] = parts[2]
    scored = []
    for t in trials:
        key = (t.enroll_speaker_id, t.test_utt_id)
        if key not in by_key:
            raise CliError(f"no score for trial {key}")
        val = by_key[key]
        if val == "NA":
            scored.append(metrics.ScoredTrial(t, kws_fired=False))
        else:
            scored.append(metrics.ScoredTrial(t, kws_fired=True,
                                              sv_score=float(val)))
    return scored


def cmd_evaluate(args, cfg, out):
    scored = read_scored_trials(args.trials, args.scores)
    report = metrics.cost_report(scored, alpha=cfg.eval.alpha)
    metrics.write_det_csv(out / "det.csv", scored)
    (out / "cost.json").write_text(report.to_json(), encoding="utf-8")
    print(f"minC_d={report.min_cd:.4f} at threshold "
          f"{report.argmin_threshold:.4f}, EER={report.eer:.4f}")
    return 0


def cmd_rtf(args, cfg, out):
    entries = data.read_manifest(args.manifest)
    audio_list = [read_wav(e.wav_path) for e in entries]
    total_audio = sum(a.duration_s for a in audio_list)
    kws_model = _load_kws_model(cfg, args.kws)
    kws_rtf = metrics.time_kws_rtf(kws_model, audio_list,
                                   cfg.features.fbank_config(), cfg.features.cmn)
    result = {"kws_rtf": kws_rtf, "total_audio_s": total_audio}
    if args.sv:
        sv_model = _load_sv_model(cfg, args.sv)
        det_cfg = cfg.detector.detector_config()
        t_sv = 0.0
        for audio in audio_list:
            feat = compute_log_fbank(audio, cfg.features.fbank_config())
            if cfg.features.cmn:
                feat = apply_cmn(feat)
            ev = detector.detect(mdtc.forward(kws_model, feat), det_cfg)
            if not ev.fired:
                continue
            seg = detector.extract_segment(audio, ev.start_frame, ev.end_frame)
            t0 = time.perf_counter()
            seg_feat = compute_log_fbank(seg, cfg.features.fbank_config())
            if cfg.features.cmn:
                seg_feat = apply_cmn(seg_feat)
            sv.embed_utterance(sv_model, seg_feat)
            t_sv += time.perf_counter() - t0
        result["sv_normalized_rtf"] = metrics.sv_normalized_rtf(t_sv, total_audio)
    (out / "rtf.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    print(json.dumps(result))
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="pvt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML run config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        for flag, required in flags.items():
            p.add_argument(f"--{flag}", required=required, default=None)
        p.set_defaults(fn=fn)
        return p

    add("features", cmd_features, manifest=True)
    add("train-kws", cmd_train_kws, manifest=True)
    add("train-sv", cmd_train_sv, manifest=True)
    add("finetune-sv", cmd_finetune_sv, manifest=True, init=True)
    add("detect", cmd_detect, manifest=True, kws=True)
    add("enroll", cmd_enroll, manifest=True, sv=True)
    p = add("score", cmd_score, trials=True, manifest=True, kws=True, sv=True,
            profiles=True)
    p.add_argument("--sv2", default=None, help="second SV model for fusion")
    add("evaluate", cmd_evaluate, trials=True, scores=True)
    add("rtf", cmd_rtf, manifest=True, kws=True)
    sub.choices["rtf"].add_argument("--sv", default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.random.seed(args.seed)
        return args.fn(args, cfg, out)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
