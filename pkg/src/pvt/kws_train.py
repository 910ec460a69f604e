"""Training loop for the keyword detector: weighted BCE, Adam, plateau
learning-rate decay, speaker-held-out validation, early stopping."""

import json
from dataclasses import dataclass, field

import numpy as np

from .data import batch_iterator
from .nn.optim import OptimizerState, adam_step, clip_grad_norm


@dataclass
class KwsTrainConfig:
    lr: float = 0.002
    batch_size: int = 150
    decay_factor: float = 0.7
    min_epochs: int = 15
    max_epochs: int = 100
    loss_clamp: float = 1e-7
    grad_clip: float = 0.0  # 0 disables; safety valve, off by default
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.decay_factor < 1):
            raise ValueError("decay_factor must be in (0, 1)")
        if self.min_epochs < 1:
            raise ValueError("min_epochs must be >= 1")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, lr
    stopped_epoch: int = 0
    best_epoch: int = 0

    def append(self, epoch, train_loss, val_loss, lr, extra=None):
        rec = {"epoch": epoch, "train_loss": train_loss,
               "val_loss": val_loss, "lr": lr}
        if extra:
            rec.update(extra)
        self.epochs.append(rec)

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"stopped_epoch": self.stopped_epoch,
                                 "best_epoch": self.best_epoch}) + "\n")


def bce_loss(y, y_star, weight, clamp=1e-7):
    """Weighted binary cross entropy over frames.

    Returns (loss, dloss/dy) where loss is the weighted mean over frames
    with weight > 0. Posteriors are clamped to [clamp, 1-clamp].
    """
    y = np.asarray(y, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    total_w = weight.sum()
    if total_w <= 0:
        return 0.0, np.zeros_like(y)
    yc = np.clip(y, clamp, 1.0 - clamp)
    per_frame = -(y_star * np.log(yc) + (1.0 - y_star) * np.log(1.0 - yc))
    loss = float((weight * per_frame).sum() / total_w)
    grad = weight * (-(y_star / yc) + (1.0 - y_star) / (1.0 - yc)) / total_w
    grad = np.where((y > clamp) & (y < 1.0 - clamp), grad, 0.0)
    return loss, grad


def train_epoch(model, examples, optimizer, cfg, rng):
    """One pass over the dataset; returns the weight-averaged train loss."""
    total_loss = 0.0
    total_w = 0.0
    for batch in batch_iterator(examples, cfg.batch_size, rng):
        model.store.zero_grads()
        y = model.forward_batch(batch.features, train=True)
        loss, gy = bce_loss(y, batch.targets, batch.weights, cfg.loss_clamp)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite training loss {loss} at optimizer step {optimizer.step}")
        if batch.weights.sum() > 0:
            model.backward(gy.astype(model.store.dtype))
            if cfg.grad_clip > 0:
                clip_grad_norm(model.store, cfg.grad_clip)
            adam_step(model.store, optimizer)
        w = float(batch.weights.sum())
        total_loss += loss * w
        total_w += w
    return total_loss / max(total_w, 1.0)


def eval_loss(model, examples, cfg, rng=None):
    """Weighted BCE on a held-out set, batch-norm in eval mode."""
    rng = rng or np.random.default_rng(0)
    total_loss = 0.0
    total_w = 0.0
    for batch in batch_iterator(examples, cfg.batch_size, rng):
        y = model.forward_batch(batch.features, train=False)
        loss, _ = bce_loss(y, batch.targets, batch.weights, cfg.loss_clamp)
        w = float(batch.weights.sum())
        total_loss += loss * w
        total_w += w
    return total_loss / max(total_w, 1.0)


def plateau_scheduler(val_history, lr, factor=0.7):
    """Decay lr by `factor` when the newest val loss fails to improve on the
    best seen before it."""
    if len(val_history) < 2:
        return lr
    best_before = min(val_history[:-1])
    return lr * factor if val_history[-1] >= best_before else lr


def early_stop(val_history, epoch, min_epochs):
    """Stop once epoch >= min_epochs and the newest val loss is no better
    than the best seen before it."""
    if epoch < min_epochs or len(val_history) < 2:
        return False
    return val_history[-1] >= min(val_history[:-1])


def split_train_val(entries, fraction=0.10, seed=0):
    """Hold out whole speakers for validation: round(fraction * n_speakers),
    at least one."""
    speakers = sorted({e.speaker_id for e in entries})
    if len(speakers) < 2:
        raise ValueError("need at least two speakers to split by speaker")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(speakers))
    n_val = max(1, round(fraction * len(speakers)))
    val_speakers = set(order[:n_val])
    train = [e for e in entries if e.speaker_id not in val_speakers]
    val = [e for e in entries if e.speaker_id in val_speakers]
    return train, val


def train_kws(model, train_examples, val_examples, cfg):
    """Full training run; returns (TrainReport, best parameter snapshot)."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = OptimizerState(kind="adam", lr=cfg.lr)
    report = TrainReport()
    val_history = []
    best_val = np.inf
    best_params = {k: v.copy() for k, v in model.store.params.items()}
    best_buffers = {k: v.copy() for k, v in model.store.buffers.items()}
    for epoch in range(1, cfg.max_epochs + 1):
        train_loss = train_epoch(model, train_examples, optimizer, cfg, rng)
        val_loss = eval_loss(model, val_examples, cfg)
        val_history.append(val_loss)
        optimizer.lr = plateau_scheduler(val_history, optimizer.lr, cfg.decay_factor)
        report.append(epoch, train_loss, val_loss, optimizer.lr)
        if val_loss < best_val:
            best_val = val_loss
            report.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.store.params.items()}
            best_buffers = {k: v.copy() for k, v in model.store.buffers.items()}
        if early_stop(val_history, epoch, cfg.min_epochs):
            report.stopped_epoch = epoch
            break
    else:
        report.stopped_epoch = cfg.max_epochs
    model.store.load_from(best_params, best_buffers)
    return report
