"""Binary tensor container and model checkpoints.

Layout: magic "PVTK1", format version (u32 LE), metadata length (u64 LE),
UTF-8 JSON metadata, zero padding to an 8-byte boundary, then concatenated
little-endian IEEE-754 arrays at 8-byte-aligned offsets. Metadata holds the
tensor directory (name/shape/dtype/offset) plus free-form attributes such
as the config hash.
"""

import hashlib
import json
import warnings

import numpy as np

MAGIC = b"PVTK1"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    """Raised on malformed, truncated, or incompatible container files."""


def _align8(n):
    return (n + 7) & ~7


def write_container(path, tensors, attrs=None):
    """tensors: dict name -> ndarray; attrs: JSON-serializable dict."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d arrays to 1-d
            arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_NAMES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for tensor {name}")
        offset = _align8(offset)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": _DTYPE_NAMES[dtype], "offset": offset})
        blob = arr.astype(dtype).tobytes()
        blobs.append((offset, blob))
        offset += len(blob)
    meta = json.dumps({"tensors": entries, "attrs": attrs or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(meta).to_bytes(8, "little"))
        fh.write(meta)
        header_len = len(MAGIC) + 4 + 8 + len(meta)
        fh.write(b"\x00" * (_align8(header_len) - header_len))
        pos = 0
        for off, blob in blobs:
            fh.write(b"\x00" * (off - pos))
            fh.write(blob)
            pos = off + len(blob)


def read_container(path):
    """Returns (tensors dict, attrs dict). Raises ContainerError on any
    structural problem; never crashes on truncated files."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12:
        raise ContainerError("file too short for a container header")
    if data[:len(MAGIC)] != MAGIC:
        raise ContainerError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    version = int.from_bytes(data[5:9], "little")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    meta_len = int.from_bytes(data[9:17], "little")
    meta_end = 17 + meta_len
    if meta_end > len(data):
        raise ContainerError("truncated metadata block")
    try:
        meta = json.loads(data[17:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed metadata JSON: {exc}") from exc
    payload_start = _align8(meta_end)
    payload = data[payload_start:]
    tensors = {}
    for entry in meta.get("tensors", []):
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise ContainerError(f"unknown dtype in entry {entry}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise ContainerError(f"tensor {entry['name']} extends past payload end")
        tensors[entry["name"]] = np.frombuffer(
            payload[start:end], dtype=dtype).reshape(shape).copy()
    return tensors, meta.get("attrs", {})


def config_hash(obj):
    """Stable hash of a config for checkpoint compatibility checks."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, store, cfg_hash, optimizer_state=None, kind="model"):
    """Persist a ParamStore (params + buffers) with its config hash."""
    tensors = {}
    for name, arr in store.params.items():
        tensors[f"param/{name}"] = arr
    for name, arr in store.buffers.items():
        tensors[f"buffer/{name}"] = arr
    attrs = {"config_hash": cfg_hash, "kind": kind}
    if optimizer_state is not None:
        attrs["optimizer"] = {
            "kind": optimizer_state.kind, "lr": optimizer_state.lr,
            "step": optimizer_state.step,
        }
        for name, arr in optimizer_state.slots.items():
            tensors[f"opt/{name}"] = arr
    write_container(path, tensors, attrs)


def load_checkpoint(path, store, expected_hash=None):
    """Restore parameters and buffers in-place; shapes must match exactly.
    Unknown extra tensors produce a warning and are ignored."""
    tensors, attrs = read_container(path)
    if expected_hash is not None and attrs.get("config_hash") != expected_hash:
        raise ContainerError(
            f"config hash mismatch: checkpoint {attrs.get('config_hash')!r}, "
            f"expected {expected_hash!r}")
    params = {}
    buffers = {}
    known = set()
    for name, arr in tensors.items():
        if name.startswith("param/"):
            params[name[6:]] = arr
            known.add(name)
        elif name.startswith("buffer/"):
            buffers[name[7:]] = arr
            known.add(name)
        elif name.startswith("opt/"):
            known.add(name)
    extra = set(tensors) - known
    for name in sorted(extra):
        warnings.warn(f"ignoring unknown tensor {name!r} in checkpoint")
    unknown_params = set(params) - set(store.params)
    for name in sorted(unknown_params):
        warnings.warn(f"ignoring unknown parameter {name!r} in checkpoint")
        params.pop(name)
    store.load_from(params, buffers)
    return attrs
