"""Central finite-difference verification of analytic gradients."""

import numpy as np


def grad_check(fn, inputs, eps_fd=1e-5, tol=None):
    """Compare analytic gradients against central finite differences.

    fn(inputs) must return (loss, grads) where grads matches inputs in
    structure and shape. Inputs should be float64 and sampled away from
    non-differentiable points (e.g. |x| > 10*eps_fd near ReLU kinks).
    Returns the max over all coordinates of |a-n| / max(|a|, |n|, 1e-8).
    If tol is given, raises AssertionError when the error exceeds it.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    _, grads = fn(inputs)
    max_err = 0.0
    for idx, x in enumerate(inputs):
        g = np.asarray(grads[idx], dtype=np.float64)
        if g.shape != x.shape:
            raise ValueError(f"gradient {idx} shape {g.shape} != input {x.shape}")
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps_fd
            lp, _ = fn(inputs)
            flat[i] = orig - eps_fd
            lm, _ = fn(inputs)
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps_fd)
            ana = g.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            max_err = max(max_err, err)
    if tol is not None and max_err > tol:
        raise AssertionError(f"gradient check failed: {max_err:.3e} > {tol:.1e}")
    return max_err
