"""Trainable layers built on the functional kernels in ops.py.

Each layer registers its parameters in a shared ParamStore under a unique
prefix, caches what its backward needs during forward, and accumulates
parameter gradients into the store. Layers that appear in the streaming
keyword detector additionally expose `step` methods operating on a single
frame plus an explicit state object.
"""

import numpy as np

from . import ops


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class DepthwiseConv1d:
    def __init__(self, store, prefix, channels, kernel, dilation, causal, rng):
        self.store = store
        self.kernel = kernel
        self.dilation = dilation
        self.causal = causal
        self.wname = store.add(
            f"{prefix}.w",
            he_uniform(rng, (channels, kernel), kernel, store.dtype))
        self._cache = None

    @property
    def w(self):
        return self.store.params[self.wname]

    def forward(self, x, train=False):
        y, xp = ops.conv1d_depthwise(x, self.w, self.dilation, self.causal)
        if train:
            self._cache = xp
        return y

    def backward(self, gy):
        gx, gw = ops.conv1d_depthwise_backward(
            gy, self._cache, self.w, self.dilation, self.causal)
        self.store.grads[self.wname] += gw
        self._cache = None
        return gx

    def context(self):
        return (self.kernel - 1) * self.dilation

    def init_state(self, batch_dtype=None):
        c = self.w.shape[0]
        return np.zeros((c, self.context()), dtype=batch_dtype or self.store.dtype)

    def step(self, col, state):
        """One causal frame: state holds the (K-1)*d previous input columns."""
        hist = np.concatenate([state, col[:, None]], axis=1)
        w = self.w
        y = np.zeros_like(col)
        for i in range(self.kernel):
            y += w[:, i] * hist[:, i * self.dilation]
        state[:, :-1] = state[:, 1:]
        state[:, -1] = col
        return y


class PointwiseConv1d:
    def __init__(self, store, prefix, c_in, c_out, rng, bias=False):
        self.store = store
        self.wname = store.add(
            f"{prefix}.w", he_uniform(rng, (c_out, c_in), c_in, store.dtype))
        self.bname = None
        if bias:
            self.bname = store.add(f"{prefix}.b", np.zeros(c_out))
        self._cache = None

    @property
    def w(self):
        return self.store.params[self.wname]

    @property
    def b(self):
        return self.store.params[self.bname] if self.bname else None

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return ops.conv1d_pointwise(x, self.w, self.b)

    def backward(self, gy):
        gx, gw, gb = ops.conv1d_pointwise_backward(
            gy, self._cache, self.w, has_bias=self.bname is not None)
        self.store.grads[self.wname] += gw
        if self.bname:
            self.store.grads[self.bname] += gb
        self._cache = None
        return gx

    def step(self, col):
        y = self.w @ col
        if self.bname:
            y += self.b
        return y


class Conv2d:
    def __init__(self, store, prefix, c_in, c_out, kernel, stride, pad, rng):
        self.store = store
        self.stride = stride
        self.pad = pad
        fan_in = c_in * kernel * kernel
        self.wname = store.add(
            f"{prefix}.w",
            he_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, store.dtype))
        self._cache = None

    @property
    def w(self):
        return self.store.params[self.wname]

    def forward(self, x, train=False):
        y, xp = ops.conv2d(x, self.w, self.stride, self.pad)
        if train:
            self._cache = (xp, x.shape)
        return y

    def backward(self, gy):
        xp, x_shape = self._cache
        gx, gw = ops.conv2d_backward(gy, xp, self.w, x_shape, self.stride, self.pad)
        self.store.grads[self.wname] += gw
        self._cache = None
        return gx


class BatchNorm:
    def __init__(self, store, prefix, channels, momentum=0.1, eps=1e-5):
        self.store = store
        self.momentum = momentum
        self.eps = eps
        self.gname = store.add(f"{prefix}.gamma", np.ones(channels))
        self.bname = store.add(f"{prefix}.beta", np.zeros(channels))
        self.rm_name = store.add_buffer(f"{prefix}.running_mean", np.zeros(channels))
        self.rv_name = store.add_buffer(f"{prefix}.running_var", np.ones(channels))
        self._cache = None

    @property
    def gamma(self):
        return self.store.params[self.gname]

    @property
    def beta(self):
        return self.store.params[self.bname]

    def forward(self, x, train=False):
        if train:
            y, cache = ops.batchnorm_train(x, self.gamma, self.beta, self.eps)
            self._cache = cache
            _, var, mean = cache
            rm = self.store.buffers[self.rm_name]
            rv = self.store.buffers[self.rv_name]
            rm[...] = (1 - self.momentum) * rm + self.momentum * mean
            rv[...] = (1 - self.momentum) * rv + self.momentum * var
            return y
        return ops.batchnorm_eval(
            x, self.gamma, self.beta,
            self.store.buffers[self.rm_name], self.store.buffers[self.rv_name],
            self.eps)

    def backward(self, gy):
        gx, ggamma, gbeta = ops.batchnorm_train_backward(
            gy, self._cache, self.gamma, self.eps)
        self.store.grads[self.gname] += ggamma
        self.store.grads[self.bname] += gbeta
        self._cache = None
        return gx

    def step(self, col):
        rm = self.store.buffers[self.rm_name]
        rv = self.store.buffers[self.rv_name]
        return (col - rm) / np.sqrt(rv + self.eps) * self.gamma + self.beta


class ReLU:
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return ops.relu(x)

    def backward(self, gy):
        gx = ops.relu_backward(gy, self._cache)
        self._cache = None
        return gx

    @staticmethod
    def step(col):
        return np.maximum(col, 0.0)


class SEGate1d:
    """Squeeze-and-excitation gate with a causal moving-average squeeze.

    Pooling averages the last `window` frames (zero left-padding), which keeps
    streaming output identical to batch output.
    """

    def __init__(self, store, prefix, channels, reduction, window, rng):
        if channels % reduction != 0:
            raise ValueError("reduction must divide channels")
        self.store = store
        self.window = window
        hidden = channels // reduction
        self.w1name = store.add(
            f"{prefix}.w1", he_uniform(rng, (hidden, channels), channels, store.dtype))
        self.b1name = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2name = store.add(
            f"{prefix}.w2", he_uniform(rng, (channels, hidden), hidden, store.dtype))
        self.b2name = store.add(f"{prefix}.b2", np.zeros(channels))
        self._cache = None

    def _params(self):
        p = self.store.params
        return p[self.w1name], p[self.b1name], p[self.w2name], p[self.b2name]

    def forward(self, x, train=False):
        w1, b1, w2, b2 = self._params()
        pooled = ops.causal_moving_average(x, self.window)
        z1 = np.einsum("hc,nct->nht", w1, pooled) + b1[None, :, None]
        a1 = ops.relu(z1)
        z2 = np.einsum("ch,nht->nct", w2, a1) + b2[None, :, None]
        gate = ops.sigmoid(z2)
        y = x * gate
        if train:
            self._cache = (x, pooled, z1, a1, gate)
        return y

    def backward(self, gy):
        w1, b1, w2, b2 = self._params()
        x, pooled, z1, a1, gate = self._cache
        gx = gy * gate
        ggate = gy * x
        gz2 = ops.sigmoid_backward(ggate, gate)
        self.store.grads[self.w2name] += np.einsum("nct,nht->ch", gz2, a1)
        self.store.grads[self.b2name] += gz2.sum(axis=(0, 2))
        ga1 = np.einsum("ch,nct->nht", w2, gz2)
        gz1 = ops.relu_backward(ga1, z1)
        self.store.grads[self.w1name] += np.einsum("nht,nct->hc", gz1, pooled)
        self.store.grads[self.b1name] += gz1.sum(axis=(0, 2))
        gpooled = np.einsum("hc,nht->nct", w1, gz1)
        gx += ops.causal_moving_average_backward(gpooled, self.window)
        self._cache = None
        return gx

    def init_state(self, batch_dtype=None):
        c = self.store.params[self.b2name].shape[0]
        return np.zeros((c, self.window), dtype=batch_dtype or self.store.dtype)

    def step(self, col, state):
        w1, b1, w2, b2 = self._params()
        state[:, :-1] = state[:, 1:]
        state[:, -1] = col
        pooled = state.mean(axis=1)
        gate = ops.sigmoid(w2 @ np.maximum(w1 @ pooled + b1, 0.0) + b2)
        return col * gate


class SEGate2d:
    """Standard SE gate for 2-d feature maps: global average squeeze."""

    def __init__(self, store, prefix, channels, reduction, rng):
        if channels % reduction != 0:
            raise ValueError("reduction must divide channels")
        self.store = store
        hidden = channels // reduction
        self.w1name = store.add(
            f"{prefix}.w1", he_uniform(rng, (hidden, channels), channels, store.dtype))
        self.b1name = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2name = store.add(
            f"{prefix}.w2", he_uniform(rng, (channels, hidden), hidden, store.dtype))
        self.b2name = store.add(f"{prefix}.b2", np.zeros(channels))
        self._cache = None

    def _params(self):
        p = self.store.params
        return p[self.w1name], p[self.b1name], p[self.w2name], p[self.b2name]

    def forward(self, x, train=False):
        w1, b1, w2, b2 = self._params()
        pooled = x.mean(axis=(2, 3))
        z1 = pooled @ w1.T + b1
        a1 = ops.relu(z1)
        z2 = a1 @ w2.T + b2
        gate = ops.sigmoid(z2)
        y = x * gate[:, :, None, None]
        if train:
            self._cache = (x, pooled, z1, a1, gate)
        return y

    def backward(self, gy):
        w1, b1, w2, b2 = self._params()
        x, pooled, z1, a1, gate = self._cache
        gx = gy * gate[:, :, None, None]
        ggate = (gy * x).sum(axis=(2, 3))
        gz2 = ops.sigmoid_backward(ggate, gate)
        self.store.grads[self.w2name] += gz2.T @ a1
        self.store.grads[self.b2name] += gz2.sum(axis=0)
        gz1 = ops.relu_backward(gz2 @ w2, z1)
        self.store.grads[self.w1name] += gz1.T @ pooled
        self.store.grads[self.b1name] += gz1.sum(axis=0)
        gpooled = gz1 @ w1
        m = x.shape[2] * x.shape[3]
        gx += gpooled[:, :, None, None] / m
        self._cache = None
        return gx


class Dense:
    def __init__(self, store, prefix, d_in, d_out, rng, bias=True):
        self.store = store
        self.wname = store.add(
            f"{prefix}.w", he_uniform(rng, (d_out, d_in), d_in, store.dtype))
        self.bname = store.add(f"{prefix}.b", np.zeros(d_out)) if bias else None
        self._cache = None

    @property
    def w(self):
        return self.store.params[self.wname]

    @property
    def b(self):
        return self.store.params[self.bname] if self.bname else None

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return ops.dense(x, self.w, self.b)

    def backward(self, gy):
        gx, gw, gb = ops.dense_backward(
            gy, self._cache, self.w, has_bias=self.bname is not None)
        self.store.grads[self.wname] += gw
        if self.bname:
            self.store.grads[self.bname] += gb
        self._cache = None
        return gx
