"""Adam and SGD parameter updates over a ParamStore."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str  # "adam" or "sgd"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    step: int = 0
    slots: dict = field(default_factory=dict)
    trainable: set = None  # None = all parameters

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind: {self.kind}")

    def _slot(self, name, like):
        if name not in self.slots:
            self.slots[name] = np.zeros_like(like)
        return self.slots[name]

    def is_trainable(self, name):
        return self.trainable is None or name in self.trainable


def adam_step(store, state):
    """One Adam update with bias correction; skips frozen parameters."""
    if state.kind != "adam":
        raise ValueError("state is not an adam state")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in store.params.items():
        if not state.is_trainable(name):
            continue
        g = store.grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state._slot(name + ".m", p)
        v = state._slot(name + ".v", p)
        m[...] = state.beta1 * m + (1 - state.beta1) * g
        v[...] = state.beta2 * v + (1 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def sgd_step(store, state):
    """w <- w - lr*(g + wd*w), with optional heavy-ball momentum."""
    if state.kind != "sgd":
        raise ValueError("state is not an sgd state")
    state.step += 1
    for name, p in store.params.items():
        if not state.is_trainable(name):
            continue
        g = store.grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.momentum:
            buf = state._slot(name + ".buf", p)
            buf[...] = state.momentum * buf + g
            g = buf
        p -= state.lr * g


def global_grad_norm(store):
    total = 0.0
    for g in store.grads.values():
        total += float((g * g).sum())
    return total ** 0.5


def clip_grad_norm(store, max_norm):
    norm = global_grad_norm(store)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in store.grads.values():
            g *= scale
    return norm
