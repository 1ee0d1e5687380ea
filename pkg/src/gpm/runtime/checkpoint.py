"""Little-endian binary checkpoint container.

Layout:
    magic   8 bytes  b"GPMCKPT1"
    version u32
    records until EOF, each:
        name_len u32, name UTF-8, dtype u32 (0 = float32, 1 = float64),
        rank u32, dims u32 * rank, payload itemsize * prod(dims)

Round-trips must be bit-exact, so payloads are written as raw little-endian
bytes with no transformation.  Model parameters are float32; optimizer
moments are float64 and must stay full width -- truncating them makes a
resumed run drift away from the uninterrupted one.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GPMCKPT1"
VERSION = 2
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_arrays(path, arrays: dict[str, np.ndarray], version: int = VERSION):
    """Write named float arrays; insertion order is preserved on disk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", version))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype, 0)  # anything exotic narrows to f32
            arr = arr.astype(_DTYPES[code], copy=False)
            if arr.ndim:  # ascontiguousarray would promote rank 0 to rank 1
                arr = np.ascontiguousarray(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", code))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len).decode("utf-8")
            (code,) = struct.unpack("<I", _read_exact(f, 4))
            if code not in _DTYPES:
                raise ValueError(f"record '{name}' has unknown dtype code {code}")
            dtype = _DTYPES[code]
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, dtype.itemsize * count)
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return arrays


def save_module(path, module, extra: dict[str, np.ndarray] | None = None):
    """Checkpoint a module's parameters plus optional extra records."""
    arrays = dict(module.state_dict())
    if extra:
        for name, arr in extra.items():
            if name in arrays:
                raise ValueError(f"extra record '{name}' collides with a parameter")
            arrays[name] = arr
    save_arrays(path, arrays)


def load_into_module(path, module) -> dict[str, np.ndarray]:
    """Load a checkpoint into a module; returns any non-parameter records."""
    arrays = load_arrays(path)
    names = {name for name, _ in module.named_parameters()}
    params = {k: v for k, v in arrays.items() if k in names}
    extra = {k: v for k, v in arrays.items() if k not in names}
    module.load_state_dict(params)
    return extra
