"""Multi-scale dilated temporal convolution keyword detector.

Four stacks of four DTC blocks (dilations 1/2/4/8, kernel 5) feed a
per-frame sigmoid classifier over the elementwise sum of the stack
outputs. Convolutions are causal, so the network can run either on a
whole utterance at once or frame-by-frame with ring-buffer state, with
identical results.
"""

from dataclasses import dataclass, field

import numpy as np

from .nn import ops
from .nn.layers import BatchNorm, DepthwiseConv1d, PointwiseConv1d, ReLU, SEGate1d
from .nn.tensor import ParamStore


@dataclass
class MdtcConfig:
    input_dim: int = 80
    channels: int = 64
    stacks: int = 4
    dilations: tuple = (1, 2, 4, 8)
    kernel: int = 5
    se_reduction: int = 8
    se_window: int = 60
    causal: bool = True

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        if self.stacks < 1:
            raise ValueError("need at least one stack")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.channels % self.se_reduction != 0:
            raise ValueError("se_reduction must divide channels")
        if self.se_window < 1:
            raise ValueError("se_window must be >= 1")

    @property
    def blocks_per_stack(self):
        return len(self.dilations)


@dataclass
class PosteriorTrack:
    posteriors: np.ndarray  # length T, each in (0, 1)

    def __post_init__(self):
        self.posteriors = np.asarray(self.posteriors, dtype=np.float64)

    def __len__(self):
        return len(self.posteriors)


def _clip_open_unit(y):
    # sigmoid rounds to exactly 0/1 for large logits; keep posteriors in the
    # open interval so log-based losses and "strictly in (0,1)" hold
    info = np.finfo(y.dtype)
    return np.clip(y, info.tiny, np.nextafter(y.dtype.type(1), y.dtype.type(0)))


class DtcBlock:
    """Dilated-depthwise conv -> BN -> ReLU -> PW -> BN -> ReLU -> PW -> BN
    -> SE -> (+input residual) -> ReLU."""

    def __init__(self, store, prefix, cfg, dilation, rng):
        c, k = cfg.channels, cfg.kernel
        self.dw = DepthwiseConv1d(store, f"{prefix}.dw", c, k, dilation,
                                  cfg.causal, rng)
        self.bn1 = BatchNorm(store, f"{prefix}.bn1", c)
        self.relu1 = ReLU()
        self.pw1 = PointwiseConv1d(store, f"{prefix}.pw1", c, c, rng)
        self.bn2 = BatchNorm(store, f"{prefix}.bn2", c)
        self.relu2 = ReLU()
        self.pw2 = PointwiseConv1d(store, f"{prefix}.pw2", c, c, rng)
        self.bn3 = BatchNorm(store, f"{prefix}.bn3", c)
        self.se = SEGate1d(store, f"{prefix}.se", c, cfg.se_reduction,
                           cfg.se_window, rng)
        self.relu3 = ReLU()

    def forward(self, u, train=False):
        h = self.relu1.forward(self.bn1.forward(self.dw.forward(u, train), train), train)
        h = self.relu2.forward(self.bn2.forward(self.pw1.forward(h, train), train), train)
        h = self.bn3.forward(self.pw2.forward(h, train), train)
        h = self.se.forward(h, train)
        return self.relu3.forward(h + u, train)

    def backward(self, gy):
        gz = self.relu3.backward(gy)
        g = self.se.backward(gz)
        g = self.pw2.backward(self.bn3.backward(g))
        g = self.relu2.backward(g)
        g = self.pw1.backward(self.bn2.backward(g))
        g = self.relu1.backward(g)
        g = self.dw.backward(self.bn1.backward(g))
        return g + gz  # residual path

    def init_state(self):
        return {"dw": self.dw.init_state(), "se": self.se.init_state()}

    def step(self, col, state):
        h = self.dw.step(col, state["dw"])
        h = ReLU.step(self.bn1.step(h))
        h = ReLU.step(self.bn2.step(self.pw1.step(h)))
        h = self.bn3.step(self.pw2.step(h))
        h = self.se.step(h, state["se"])
        return ReLU.step(h + col)


class MdtcModel:
    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.inproj = PointwiseConv1d(self.store, "inproj.pw", cfg.input_dim, c,
                                      rng, bias=True)
        self.inproj_bn = BatchNorm(self.store, "inproj.bn", c)
        self.inproj_relu = ReLU()
        self.stacks = []
        for s in range(cfg.stacks):
            blocks = [
                DtcBlock(self.store, f"stack{s}.block{b}", cfg, d, rng)
                for b, d in enumerate(cfg.dilations)
            ]
            self.stacks.append(blocks)
        self.classifier = PointwiseConv1d(self.store, "classifier", c, 1, rng,
                                          bias=True)
        self._cache = None

    def forward_batch(self, x, train=False):
        """x: (N, input_dim, T) -> per-frame WuW posteriors (N, T)."""
        if x.shape[1] != self.cfg.input_dim:
            raise ValueError(
                f"input dim {x.shape[1]} != configured {self.cfg.input_dim}")
        x = x.astype(self.store.dtype, copy=False)
        h = self.inproj_relu.forward(
            self.inproj_bn.forward(self.inproj.forward(x, train), train), train)
        total = np.zeros_like(h)
        for blocks in self.stacks:
            for block in blocks:
                h = block.forward(h, train)
            total = total + h
        logits = self.classifier.forward(total, train)[:, 0, :]
        y = ops.sigmoid(logits)
        if train:
            self._cache = y
        return _clip_open_unit(y)

    def backward(self, gy):
        """gy: (N, T) gradient w.r.t. the posteriors."""
        glogits = ops.sigmoid_backward(gy, self._cache)
        g = self.classifier.backward(glogits[:, None, :])
        # d(total)/d(stack_i output): direct sum term plus the path through
        # all later stacks (stack i+1 consumes stack i's output).
        gh = g
        for blocks in reversed(self.stacks):
            for block in reversed(blocks):
                gh = block.backward(gh)
            gh = gh + g
        # gh now includes a spurious extra +g for the inproj output; the sum
        # feeds only stack outputs, so remove it.
        gh = gh - g
        gx = self.inproj.backward(
            self.inproj_bn.backward(self.inproj_relu.backward(gh)))
        return gx


def build_model(cfg, seed=0, dtype=np.float32):
    """Construct an MDTC model with He-uniform init, deterministic per seed."""
    return MdtcModel(cfg, seed=seed, dtype=dtype)


def forward(model, feat):
    """Run a FeatureMatrix through the detector in eval mode."""
    x = np.ascontiguousarray(feat.frames.T)[None]
    y = model.forward_batch(x, train=False)
    return PosteriorTrack(posteriors=y[0])


class StreamState:
    """Per-stream ring buffers: past conv inputs and SE pooling windows."""

    def __init__(self, model):
        self.model = model
        self.block_states = [
            [block.init_state() for block in blocks] for blocks in model.stacks
        ]
        self.frame_count = 0


def stream_push(model, state, frame):
    """Feed one 80-dim frame; returns the posterior for that frame."""
    if state.model is not model:
        raise ValueError("stream state was built for a different model")
    frame = np.asarray(frame, dtype=model.store.dtype)
    if frame.shape != (model.cfg.input_dim,):
        raise ValueError(f"frame shape {frame.shape}, expected ({model.cfg.input_dim},)")
    col = ReLU.step(model.inproj_bn.step(model.inproj.step(frame)))
    total = np.zeros_like(col)
    h = col
    for blocks, states in zip(model.stacks, state.block_states):
        for block, bstate in zip(blocks, states):
            h = block.step(h, bstate)
        total = total + h
    logit = model.classifier.step(total)[0]
    state.frame_count += 1
    y = ops.sigmoid(np.array([logit], dtype=model.store.dtype))
    return float(_clip_open_unit(y)[0])


def receptive_field(cfg):
    """Receptive field of the convolutional path, in frames.

    1 + stacks * sum((K-1)*d). SE gates additionally pool over the last
    se_window frames, which widens the true temporal context; set
    se_window=1 for a probe that matches this formula exactly.
    """
    return 1 + cfg.stacks * sum((cfg.kernel - 1) * d for d in cfg.dilations)


def stack_receptive_field(cfg):
    return 1 + sum((cfg.kernel - 1) * d for d in cfg.dilations)


def param_count(model):
    """Total trainable parameter count (BN gamma/beta in, running stats out)."""
    return model.store.param_count()


def analytic_param_count(cfg):
    """Closed-form parameter count, cross-checked against param_count()."""
    c, k, r = cfg.channels, cfg.kernel, cfg.se_reduction
    per_block = (
        c * k                      # depthwise conv
        + 2 * c * c                # two pointwise convs
        + 3 * 2 * c                # three batch norms
        + 2 * (c // r) * c + (c // r) + c  # SE bottleneck with biases
    )
    inproj = cfg.input_dim * c + c + 2 * c
    classifier = c + 1
    return cfg.stacks * cfg.blocks_per_stack * per_block + inproj + classifier
