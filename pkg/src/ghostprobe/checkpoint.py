"""Flat binary parameter checkpoints.

Layout: magic b"DPGP1", then one record per parameter in dict order:
name length (u64 LE), UTF-8 name bytes, rank (u64 LE), each extent
(u64 LE), raw data as little-endian float32.  Round-trips bit-exactly.
"""

import struct

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

MAGIC = b"DPGP1"


def save_checkpoint(path, params):
    """Write a name -> Tensor dict; float64 parameters are rejected."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, p in params.items():
            arr = p.data if isinstance(p, Tensor) else np.asarray(p)
            if arr.dtype != np.float32:
                raise ConfigError(f"checkpoint stores float32 only; '{name}' is {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            for n in arr.shape:
                fh.write(struct.pack("<Q", n))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read back a name -> ndarray dict in file order."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path}: not a parameter checkpoint (bad magic)")
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise ConfigError(f"{path}: truncated record header")
            (nlen,) = struct.unpack("<Q", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            count = 1
            for n in shape:
                count *= n
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ConfigError(f"{path}: truncated data for '{name}'")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return out


def restore_into(params, loaded):
    """Copy checkpoint arrays into live parameters, checking names and shapes."""
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise ConfigError(f"checkpoint '{name}' has shape {arr.shape}, model expects {p.data.shape}")
        p.data[...] = arr
