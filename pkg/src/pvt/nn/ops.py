"""Dense numpy kernels with hand-written backward passes.

Every forward returns the output plus whatever cache its paired backward
needs. Shapes follow the channels-first convention: 1-d sequence ops take
(N, C, T), 2-d ops take (N, C, H, W). Convolutions are bias-free; layers
that need a bias add it explicitly.
"""

import numpy as np


# ---------------------------------------------------------------------------
# 1-d convolutions

def _conv1d_pad(x, kernel, dilation, causal):
    ctx = (kernel - 1) * dilation
    if causal:
        return np.pad(x, ((0, 0), (0, 0), (ctx, 0))), ctx
    left = (ctx // 2, ctx - ctx // 2)
    return np.pad(x, ((0, 0), (0, 0), left)), ctx


def conv1d_depthwise(x, w, dilation=1, causal=True):
    """Per-channel dilated temporal convolution.

    y[n,c,t] = sum_k w[c,k] * x[n,c,t-(K-1-k)*d], zero padded so the output
    length equals the input length. w[:, -1] is the newest tap.
    """
    n, c, t = x.shape
    cw, k = w.shape
    if cw != c:
        raise ValueError(f"channel mismatch: x has {c}, w has {cw}")
    xp, _ = _conv1d_pad(x, k, dilation, causal)
    y = np.zeros((n, c, t), dtype=x.dtype)
    for i in range(k):
        y += w[None, :, i, None] * xp[:, :, i * dilation:i * dilation + t]
    return y, xp


def conv1d_depthwise_backward(gy, xp, w, dilation=1, causal=True):
    n, c, t = gy.shape
    k = w.shape[1]
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for i in range(k):
        sl = slice(i * dilation, i * dilation + t)
        gw[:, i] = np.einsum("nct,nct->c", gy, xp[:, :, sl])
        gxp[:, :, sl] += w[None, :, i, None] * gy
    ctx = (k - 1) * dilation
    if causal:
        gx = gxp[:, :, ctx:]
    else:
        left = ctx // 2
        gx = gxp[:, :, left:left + t]
    return gx, gw


def conv1d_pointwise(x, w, b=None):
    """1x1 cross-channel mixing: y[:, :, t] = w @ x[:, :, t] (+ b)."""
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, w has {w.shape[1]}")
    y = np.einsum("oi,nit->not", w, x)
    if b is not None:
        y += b[None, :, None]
    return y


def conv1d_pointwise_backward(gy, x, w, has_bias=False):
    gw = np.einsum("not,nit->oi", gy, x)
    gx = np.einsum("oi,not->nit", w, gy)
    gb = gy.sum(axis=(0, 2)) if has_bias else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# 2-d convolution

def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of (N, Cin, H, W) with (Cout, Cin, k, k)."""
    n, cin, h, ww = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ValueError(f"channel mismatch: x has {cin}, w has {cin_w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            y += np.einsum("oc,nchw->nohw", w[:, :, i, j], xs)
    return y, xp


def conv2d_backward(gy, xp, w, x_shape, stride=1, pad=0):
    n, cout, ho, wo = gy.shape
    kh, kw = w.shape[2], w.shape[3]
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            sl_h = slice(i, i + stride * ho, stride)
            sl_w = slice(j, j + stride * wo, stride)
            xs = xp[:, :, sl_h, sl_w]
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", gy, xs)
            gxp[:, :, sl_h, sl_w] += np.einsum("oc,nohw->nchw", w[:, :, i, j], gy)
    h, ww = x_shape[2], x_shape[3]
    gx = gxp[:, :, pad:pad + h, pad:pad + ww]
    return gx, gw


# ---------------------------------------------------------------------------
# normalization and activations

def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Normalize over all axes except channel (axis 1) using batch stats."""
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    xhat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
    y = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return y, (xhat, var, mean)


def batchnorm_train_backward(gy, cache, gamma, eps=1e-5):
    xhat, var, _ = cache
    axes = (0,) + tuple(range(2, gy.ndim))
    shape = (1, -1) + (1,) * (gy.ndim - 2)
    m = gy.size // gy.shape[1]
    ggamma = (gy * xhat).sum(axis=axes)
    gbeta = gy.sum(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    gx = (gamma * inv_std).reshape(shape) * (
        gy
        - gbeta.reshape(shape) / m
        - xhat * ggamma.reshape(shape) / m
    )
    return gx, ggamma, gbeta


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    return (x - running_mean.reshape(shape)) * (gamma * inv_std).reshape(shape) \
        + beta.reshape(shape)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(gy, x):
    return np.where(x > 0, gy, 0.0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(gy, y):
    return gy * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(gy, y):
    return gy * (1.0 - y * y)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(gy, y, axis=-1):
    return y * (gy - (gy * y).sum(axis=axis, keepdims=True))


def activation(x, kind, axis=-1):
    """Dispatch helper: kind in {relu, sigmoid, tanh, softmax}."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis=axis)
    raise ValueError(f"unknown activation: {kind}")


# ---------------------------------------------------------------------------
# dense / normalize

def dense(x, w, b=None):
    """y = x @ w.T (+ b) for x of shape (N, D_in) or (D_in,)."""
    if w.shape[1] != x.shape[-1]:
        raise ValueError(f"dim mismatch: x has {x.shape[-1]}, w has {w.shape[1]}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def dense_backward(gy, x, w, has_bias=True):
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    gy2 = gy[None, :] if single else gy
    gw = gy2.T @ x2
    gx = gy2 @ w
    gb = gy2.sum(axis=0) if has_bias else None
    if single:
        gx = gx[0]
    return gx, gw, gb


def l2_normalize(v, eps=1e-12):
    """Unit-normalize along the last axis; near-zero vectors divide by eps."""
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    denom = np.where(norm > eps, norm, eps)
    return v / denom


def l2_normalize_backward(gy, v, eps=1e-12):
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    safe = norm > eps
    denom = np.where(safe, norm, eps)
    z = v / denom
    # normalized branch: (gy - z<z,gy>)/||v|| ; eps branch is plain scaling
    proj = (gy * z).sum(axis=-1, keepdims=True)
    gx_unit = (gy - z * proj) / denom
    gx_eps = gy / eps
    return np.where(safe, gx_unit, gx_eps)


# ---------------------------------------------------------------------------
# causal moving average (squeeze pooling for streaming SE gates)

def causal_moving_average(x, window):
    """Mean of the last `window` frames of x (N, C, T), zero-padded left."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        # identity; skipping the cumsum also avoids smearing rounding
        # residue across frames that are outside the window
        return x.copy()
    n, c, t = x.shape
    cs = np.cumsum(x, axis=2)
    out = cs.copy()
    if window < t:
        out[:, :, window:] -= cs[:, :, :-window]
    return out / window


def causal_moving_average_backward(gy, window):
    # transpose of the moving-average: forward-looking windowed sum
    rev = causal_moving_average(gy[:, :, ::-1], window)
    return rev[:, :, ::-1] * 1.0
