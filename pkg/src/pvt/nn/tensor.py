"""Named parameter storage shared by all trainable models."""

import numpy as np


class ParamStore:
    """Flat registry of named parameters, gradients and non-trainable buffers.

    Parameters and their gradient accumulators always have matching shapes.
    Buffers (batch-norm running statistics) are persisted with checkpoints
    but excluded from parameter counts and optimizer updates.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.asarray(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return name

    def add_buffer(self, name, value):
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name: {name}")
        self.buffers[name] = np.asarray(value, dtype=self.dtype)
        return name

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        out = ParamStore(self.dtype)
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out

    def load_from(self, other_params, other_buffers=None):
        """Copy values in-place from plain name->array dicts."""
        for name, arr in self.params.items():
            if name not in other_params:
                raise KeyError(f"missing parameter: {name}")
            src = other_params[name]
            if tuple(src.shape) != tuple(arr.shape):
                raise ValueError(
                    f"shape mismatch for {name}: {src.shape} vs {arr.shape}"
                )
            arr[...] = src
        if other_buffers is not None:
            for name, arr in self.buffers.items():
                if name in other_buffers:
                    arr[...] = other_buffers[name]

    def astype(self, dtype):
        """Copy of the store with a different dtype (used for f64 grad checks)."""
        out = ParamStore(dtype)
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        out.grads = {k: np.zeros_like(v) for k, v in out.params.items()}
        out.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return out
