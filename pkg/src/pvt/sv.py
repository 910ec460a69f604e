"""Speaker-verification stage: residual-SE extractor, attentive pooling,
ArcFace + supervised contrastive training, enrollment and cosine scoring.

The extractor consumes the same 80-dim log-fbank features as the keyword
detector, laid out as a (1, 80, T) image. After the last stage the
frequency axis is folded into channels and the per-frame vectors are
pooled with either attentive statistics pooling (mean + std, "ASP") or
self-attentive pooling (mean only, "SAP").
"""

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMatrix
from .nn import ops
from .nn.layers import BatchNorm, Conv2d, Dense, ReLU, SEGate2d, he_uniform
from .nn.optim import OptimizerState, sgd_step
from .nn.tensor import ParamStore


@dataclass
class SvStageSpec:
    channels: int
    blocks: int
    stride: int  # stride of the first block in the stage


RESNET34SE_STAGES = (
    SvStageSpec(32, 3, 1),
    SvStageSpec(64, 4, 2),
    SvStageSpec(128, 6, 2),
    SvStageSpec(256, 3, 2),
)

TINY_STAGES = (
    SvStageSpec(8, 1, 2),
    SvStageSpec(16, 1, 2),
)


@dataclass
class SvConfig:
    stages: tuple = RESNET34SE_STAGES
    input_dim: int = 80
    embedding_dim: int = 128
    pooling: str = "ASP"  # or "SAP"
    attention_dim: int = 32
    se_reduction: int = 8
    arcface_scale: float = 32.0
    arcface_margin: float = 0.2
    supcon_temperature: float = 0.07
    supcon_weight: float = 1.0
    n_classes: int = 0  # required for training
    var_floor: float = 1e-8

    def __post_init__(self):
        self.stages = tuple(
            s if isinstance(s, SvStageSpec) else SvStageSpec(*s) for s in self.stages)
        if self.arcface_scale <= 0:
            raise ValueError("arcface scale must be positive")
        if not (0 <= self.arcface_margin < np.pi / 2):
            raise ValueError("arcface margin must be in [0, pi/2)")
        if self.supcon_temperature <= 0:
            raise ValueError("supcon temperature must be positive")
        if self.supcon_weight < 0:
            raise ValueError("supcon weight must be non-negative")
        if self.pooling not in ("ASP", "SAP"):
            raise ValueError(f"pooling must be ASP or SAP, got {self.pooling!r}")


def named_stages(name):
    if name == "resnet34se":
        return RESNET34SE_STAGES
    if name == "tiny":
        return TINY_STAGES
    raise ValueError(f"unknown extractor config: {name!r}")


@dataclass
class Embedding:
    vector: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)


@dataclass
class EnrollmentProfile:
    speaker_id: str
    vector: np.ndarray  # unit norm

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)


class ResBlock2d:
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> SE -> (+shortcut) -> ReLU."""

    def __init__(self, store, prefix, c_in, c_out, stride, se_reduction, rng):
        self.conv1 = Conv2d(store, f"{prefix}.conv1", c_in, c_out, 3, stride, 1, rng)
        self.bn1 = BatchNorm(store, f"{prefix}.bn1", c_out)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(store, f"{prefix}.conv2", c_out, c_out, 3, 1, 1, rng)
        self.bn2 = BatchNorm(store, f"{prefix}.bn2", c_out)
        self.se = SEGate2d(store, f"{prefix}.se", c_out, se_reduction, rng)
        self.relu_out = ReLU()
        self.short_conv = None
        if stride != 1 or c_in != c_out:
            self.short_conv = Conv2d(store, f"{prefix}.short", c_in, c_out, 1,
                                     stride, 0, rng)
            self.short_bn = BatchNorm(store, f"{prefix}.short_bn", c_out)

    def forward(self, x, train=False):
        if self.short_conv is not None:
            s = self.short_bn.forward(self.short_conv.forward(x, train), train)
        else:
            s = x
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.se.forward(self.bn2.forward(self.conv2.forward(h, train), train), train)
        return self.relu_out.forward(h + s, train)

    def backward(self, gy):
        gz = self.relu_out.backward(gy)
        gh = self.se.backward(gz)
        gh = self.conv2.backward(self.bn2.backward(gh))
        gh = self.relu1.backward(gh)
        gx = self.conv1.backward(self.bn1.backward(gh))
        if self.short_conv is not None:
            gs = self.short_conv.backward(self.short_bn.backward(gz))
        else:
            gs = gz
        return gx + gs


class AspPool:
    """Attentive statistics pooling: softmax attention over frames, output is
    concat(weighted mean, weighted std)."""

    def __init__(self, store, prefix, feat_dim, attention_dim, rng, var_floor=1e-8):
        self.store = store
        self.var_floor = var_floor
        self.wname = store.add(
            f"{prefix}.w", he_uniform(rng, (attention_dim, feat_dim), feat_dim, store.dtype))
        self.bname = store.add(f"{prefix}.b", np.zeros(attention_dim))
        self.vname = store.add(f"{prefix}.v", np.zeros(attention_dim))
        self._cache = None

    @property
    def out_dim_factor(self):
        return 2

    def forward(self, h, train=False):
        p = self.store.params
        w, b, v = p[self.wname], p[self.bname], p[self.vname]
        u = ops.tanh(np.einsum("ac,nct->nat", w, h) + b[None, :, None])
        e = np.einsum("a,nat->nt", v, u)
        alpha = ops.softmax(e, axis=1)
        mu = np.einsum("nt,nct->nc", alpha, h)
        m2 = np.einsum("nt,nct->nc", alpha, h * h)
        var = m2 - mu * mu
        clamped = var < self.var_floor
        sigma = np.sqrt(np.where(clamped, self.var_floor, var))
        if train:
            self._cache = (h, u, alpha, mu, sigma, clamped)
        return np.concatenate([mu, sigma], axis=1)

    def backward(self, gy):
        p = self.store.params
        w, b, v = p[self.wname], p[self.bname], p[self.vname]
        h, u, alpha, mu, sigma, clamped = self._cache
        c = h.shape[1]
        gmu = gy[:, :c].copy()
        gsigma = gy[:, c:]
        gvar = np.where(clamped, 0.0, gsigma * 0.5 / sigma)
        gm2 = gvar
        gmu -= 2.0 * mu * gvar
        galpha = np.einsum("nc,nct->nt", gmu, h) + np.einsum("nc,nct->nt", gm2, h * h)
        gh = alpha[:, None, :] * (gmu[:, :, None] + 2.0 * h * gm2[:, :, None])
        ge = ops.softmax_backward(galpha, alpha, axis=1)
        gu = v[None, :, None] * ge[:, None, :]
        gz = ops.tanh_backward(gu, u)
        self.store.grads[self.wname] += np.einsum("nat,nct->ac", gz, h)
        self.store.grads[self.bname] += gz.sum(axis=(0, 2))
        self.store.grads[self.vname] += np.einsum("nat,nt->a", u, ge)
        gh += np.einsum("ac,nat->nct", w, gz)
        self._cache = None
        return gh


class SapPool:
    """Self-attentive pooling: attention-weighted mean only."""

    def __init__(self, store, prefix, feat_dim, attention_dim, rng):
        self.store = store
        self.wname = store.add(
            f"{prefix}.w", he_uniform(rng, (attention_dim, feat_dim), feat_dim, store.dtype))
        self.bname = store.add(f"{prefix}.b", np.zeros(attention_dim))
        self.vname = store.add(f"{prefix}.v", np.zeros(attention_dim))
        self._cache = None

    @property
    def out_dim_factor(self):
        return 1

    def forward(self, h, train=False):
        p = self.store.params
        w, b, v = p[self.wname], p[self.bname], p[self.vname]
        u = ops.tanh(np.einsum("ac,nct->nat", w, h) + b[None, :, None])
        e = np.einsum("a,nat->nt", v, u)
        alpha = ops.softmax(e, axis=1)
        mu = np.einsum("nt,nct->nc", alpha, h)
        if train:
            self._cache = (h, u, alpha)
        return mu

    def backward(self, gy):
        p = self.store.params
        w, b, v = p[self.wname], p[self.bname], p[self.vname]
        h, u, alpha = self._cache
        galpha = np.einsum("nc,nct->nt", gy, h)
        gh = alpha[:, None, :] * gy[:, :, None]
        ge = ops.softmax_backward(galpha, alpha, axis=1)
        gu = v[None, :, None] * ge[:, None, :]
        gz = ops.tanh_backward(gu, u)
        self.store.grads[self.wname] += np.einsum("nat,nct->ac", gz, h)
        self.store.grads[self.bname] += gz.sum(axis=(0, 2))
        self.store.grads[self.vname] += np.einsum("nat,nt->a", u, ge)
        gh += np.einsum("ac,nat->nct", w, gz)
        self._cache = None
        return gh


class SvModel:
    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        c0 = cfg.stages[0].channels
        self.stem = Conv2d(self.store, "stem.conv", 1, c0, 3, 1, 1, rng)
        self.stem_bn = BatchNorm(self.store, "stem.bn", c0)
        self.stem_relu = ReLU()
        self.blocks = []
        c_in = c0
        freq = cfg.input_dim
        for si, stage in enumerate(cfg.stages):
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                self.blocks.append(ResBlock2d(
                    self.store, f"stage{si}.block{bi}", c_in, stage.channels,
                    stride, cfg.se_reduction, rng))
                if bi == 0:
                    freq = (freq + 2 - 3) // stride + 1
                c_in = stage.channels
        self.out_channels = c_in
        self.out_freq = freq
        feat_dim = c_in * freq
        if cfg.pooling == "ASP":
            self.pool = AspPool(self.store, "pool", feat_dim, cfg.attention_dim,
                                rng, cfg.var_floor)
        else:
            self.pool = SapPool(self.store, "pool", feat_dim, cfg.attention_dim, rng)
        self.embed = Dense(self.store, "embed", feat_dim * self.pool.out_dim_factor,
                           cfg.embedding_dim, rng)
        if cfg.n_classes > 0:
            self.store.add("arcface.w", he_uniform(
                rng, (cfg.n_classes, cfg.embedding_dim), cfg.embedding_dim,
                self.store.dtype))
        self._frame_shape = None

    def final_layer_params(self):
        """Parameters trained during phase 1 of finetuning."""
        names = {self.embed.wname}
        if self.embed.bname:
            names.add(self.embed.bname)
        if "arcface.w" in self.store.params:
            names.add("arcface.w")
        return names

    def forward_embed(self, x, train=False):
        """x: (N, 1, input_dim, T) -> unnormalized embeddings (N, D)."""
        strides = int(np.prod([s.stride for s in self.cfg.stages]))
        if (x.shape[3] + strides - 1) // strides < 1:
            raise ValueError("utterance too short for the extractor strides")
        x = x.astype(self.store.dtype, copy=False)
        h = self.stem_relu.forward(
            self.stem_bn.forward(self.stem.forward(x, train), train), train)
        for block in self.blocks:
            h = block.forward(h, train)
        n, c, f, t = h.shape
        self._frame_shape = (n, c, f, t)
        frames = h.reshape(n, c * f, t)
        pooled = self.pool.forward(frames, train)
        return self.embed.forward(pooled, train)

    def backward_embed(self, gemb):
        gpooled = self.embed.backward(gemb.astype(self.store.dtype, copy=False))
        gframes = self.pool.backward(gpooled)
        n, c, f, t = self._frame_shape
        gh = gframes.reshape(n, c, f, t)
        for block in reversed(self.blocks):
            gh = block.backward(gh)
        gh = self.stem_relu.backward(gh)
        return self.stem.backward(self.stem_bn.backward(gh))


def build_extractor(cfg, seed=0, dtype=np.float32):
    return SvModel(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# losses

def arcface_loss(emb, labels, weights, s=32.0, m=0.2):
    """Additive angular margin softmax cross-entropy.

    emb (N, D) and weights (K, D) are L2-normalized internally. Logits are
    s*cos(theta_j + m*1[j=y]) with theta clamped to [0, pi-m] before the
    margin. Returns (loss, grad_emb, grad_weights).
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= weights.shape[0]:
        raise ValueError("label out of range")
    n = emb.shape[0]
    e_hat = ops.l2_normalize(emb)
    w_hat = ops.l2_normalize(weights)
    cos = e_hat @ w_hat.T
    cos_c = np.clip(cos, -1.0 + 1e-7, 1.0 - 1e-7)
    clip_mask = (cos > -1.0 + 1e-7) & (cos < 1.0 - 1e-7)

    rows = np.arange(n)
    cos_y = cos_c[rows, labels]
    theta = np.arccos(cos_y)
    clamped = theta > np.pi - m
    theta_c = np.where(clamped, np.pi - m, theta)
    target_logit = np.cos(theta_c + m)

    logits = cos_c.copy()
    logits[rows, labels] = target_logit
    logits *= s
    p = ops.softmax(logits, axis=1)
    loss = float(-np.mean(np.log(p[rows, labels] + 1e-300)))

    glogits = p.copy()
    glogits[rows, labels] -= 1.0
    glogits /= n
    gcos = glogits * s
    # chain rule through cos(theta + m) on the target column
    sin_theta = np.sqrt(np.maximum(1.0 - cos_y * cos_y, 1e-12))
    dtarget_dcos = np.where(clamped, 0.0, np.sin(theta_c + m) / sin_theta)
    gcos[rows, labels] *= dtarget_dcos
    gcos = np.where(clip_mask, gcos, 0.0)

    ge_hat = gcos @ w_hat
    gw_hat = gcos.T @ e_hat
    gemb = ops.l2_normalize_backward(ge_hat, emb)
    gweights = ops.l2_normalize_backward(gw_hat, weights)
    return loss, gemb, gweights


def supcon_loss(emb, labels, temperature=0.07):
    """Supervised contrastive loss, summation-outside-the-log form.

    Anchors with no in-batch positive are skipped; raises if no anchor is
    valid. Returns (loss, grad_emb).
    """
    labels = np.asarray(labels)
    n = emb.shape[0]
    if n < 2:
        raise ValueError("supcon needs a batch of at least 2")
    z = ops.l2_normalize(emb)
    sim = (z @ z.T) / temperature
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos = same & not_self
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no anchor has an in-batch positive")

    shifted = sim - sim.max(axis=1, keepdims=True)
    exp = np.where(not_self, np.exp(shifted), 0.0)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(denom)  # log softmax over a != i

    per_anchor = np.where(valid,
                          -(pos * log_prob).sum(axis=1) / np.maximum(n_pos, 1),
                          0.0)
    loss = float(per_anchor.sum() / n_valid)

    soft = exp / denom  # softmax over non-self entries
    g_sim = np.where(valid[:, None] & not_self,
                     soft - pos / np.maximum(n_pos, 1)[:, None],
                     0.0) / n_valid
    gz = (g_sim + g_sim.T) @ z / temperature
    return loss, ops.l2_normalize_backward(gz, emb)


def sv_total_loss(arcface_value, supcon_value, weight=1.0):
    if weight < 0:
        raise ValueError("supcon weight must be non-negative")
    return arcface_value + weight * supcon_value


# ---------------------------------------------------------------------------
# training

@dataclass
class SvTrainConfig:
    initial_lr: float = 0.1
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 5
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    train_frames: int = 100
    finetune_loss_threshold: float = 0.2
    seed: int = 0


def lr_at_epoch(epoch, cfg):
    """Step schedule: initial_lr divided by decay_factor every decay_every
    epochs (epoch is 0-based)."""
    return cfg.initial_lr * cfg.lr_decay_factor ** (-(epoch // cfg.lr_decay_every))


def crop_or_loop(feat, frames, rng):
    """Fixed-length training chunk: random crop, or loop short utterances."""
    t = feat.frames.shape[0]
    if t >= frames:
        start = int(rng.integers(0, t - frames + 1))
        return feat.frames[start:start + frames]
    reps = -(-frames // t)
    return np.tile(feat.frames, (reps, 1))[:frames]


def _sv_batch_loss(model, x, labels, cfg, train=True):
    emb = model.forward_embed(x, train=train)
    w = model.store.params["arcface.w"]
    arc, gemb_a, gw = arcface_loss(emb, labels, w,
                                   model.cfg.arcface_scale, model.cfg.arcface_margin)
    lam = model.cfg.supcon_weight
    if lam > 0:
        sup, gemb_s = supcon_loss(emb, labels, model.cfg.supcon_temperature)
        gemb = gemb_a + lam * gemb_s
    else:
        sup = 0.0
        gemb = gemb_a
    loss = sv_total_loss(arc, sup, lam)
    return loss, emb, gemb, gw


def train_sv(model, dataset, cfg, report=None, phase="pretrain",
             trainable=None, stop_below=None):
    """SGD training over (FeatureMatrix, label) pairs.

    Returns a TrainReport-like list of per-epoch records. `trainable`
    restricts updates to a set of parameter names (finetune phase 1);
    `stop_below` ends the run early once the epoch loss drops under it.
    """
    from .kws_train import TrainReport  # shared report container

    rng = np.random.default_rng(cfg.seed)
    report = report or TrainReport()
    opt = OptimizerState(kind="sgd", lr=cfg.initial_lr, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay, trainable=trainable)
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue  # supcon needs at least a pair
            feats = np.stack([
                crop_or_loop(dataset[j][0], cfg.train_frames, rng) for j in idx])
            x = feats.transpose(0, 2, 1)[:, None, :, :]
            labels = np.array([dataset[j][1] for j in idx])
            model.store.zero_grads()
            loss, _, gemb, gw = _sv_batch_loss(model, x, labels, cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite SV loss {loss}")
            model.backward_embed(gemb)
            model.store.grads["arcface.w"] += gw.astype(model.store.dtype)
            sgd_step(model.store, opt)
            total += loss * len(idx)
            count += len(idx)
        epoch_loss = total / max(count, 1)
        report.append(epoch, epoch_loss, None, opt.lr, {"phase": phase})
        if stop_below is not None and epoch_loss <= stop_below:
            break
    return report


def finetune(model, dataset, cfg):
    """Freeze-then-release finetuning: phase 1 trains only the final layer
    (embedding projection + class weights); once the epoch loss reaches the
    threshold, all parameters train."""
    from .kws_train import TrainReport

    report = TrainReport()
    frozen_before = {
        k: v.copy() for k, v in model.store.params.items()
        if k not in model.final_layer_params()
    }
    train_sv(model, dataset, cfg, report=report, phase="finetune-frozen",
             trainable=model.final_layer_params(),
             stop_below=cfg.finetune_loss_threshold)
    for k, v in frozen_before.items():
        if not np.array_equal(v, model.store.params[k]):
            raise AssertionError(f"frozen parameter {k} changed during phase 1")
    train_sv(model, dataset, cfg, report=report, phase="finetune-full")
    return report


# ---------------------------------------------------------------------------
# inference

def embed_utterance(model, feat):
    """Extractor -> pooling -> projection -> L2 normalize, eval mode."""
    x = feat.frames.T[None, None, :, :]
    emb = model.forward_embed(x, train=False)[0]
    return Embedding(vector=ops.l2_normalize(emb.astype(np.float64)),
                     normalized=True)


def enroll(speaker_id, embeddings):
    """Mean of normalized embeddings, renormalized to unit length."""
    if not embeddings:
        raise ValueError("need at least one enrollment embedding")
    vecs = np.stack([ops.l2_normalize(e.vector) for e in embeddings])
    mean = vecs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        raise ValueError("enrollment embeddings cancel out; cannot normalize")
    return EnrollmentProfile(speaker_id=speaker_id, vector=mean / norm)


def cosine_score(profile, test):
    """Inner product of unit vectors, in [-1, 1]."""
    v = test.vector if test.normalized else ops.l2_normalize(test.vector)
    return float(np.dot(profile.vector, v))


def fuse_scores(score_a, score_b):
    """Equal-weight mean of two cosine scores."""
    return 0.5 * (score_a + score_b)
