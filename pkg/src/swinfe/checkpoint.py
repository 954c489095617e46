"""Binary checkpoint format.

Little-endian layout::

    b"SWFE" | u32 version (=1) | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64) | u8 rank
              | rank x u32 dim | raw data )

Tensors are written in lexicographic name order.
"""
import os
import struct

import numpy as np

MAGIC = b"SWFE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def dump_bytes(arrays):
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if a.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {a.dtype}")
        code = _CODES[a.dtype]
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<BB", code, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def load_bytes(buf):
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"corrupt checkpoint: truncated at byte {pos} (need {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    pos = 0
    if take(4) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt checkpoint: tensor name is not utf-8") from None
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"corrupt checkpoint: dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(shape).astype(
            dt.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError(f"corrupt checkpoint: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(path, arrays):
    """Write ``arrays`` atomically (temp file then rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(dump_bytes(arrays))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return load_bytes(f.read())


def apply_arrays(arrays, params, optimizer=None, prefix="param."):
    """Copy loaded arrays into ``params`` (and optimizer state) after validating all of them.

    Nothing is modified unless every name and shape checks out.
    """
    loaded = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    for k in sorted(set(params) & set(loaded)):
        if loaded[k].shape != params[k].shape:
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {loaded[k].shape} "
                                  f"vs model {params[k].shape}")
    unknown = sorted(set(loaded) - set(params)) + sorted(
        k for k in arrays if not k.startswith(prefix) and not k.startswith("optim."))
    if unknown:
        raise CheckpointError(f"unknown tensors in checkpoint: {', '.join(unknown)}")
    missing = sorted(set(params) - set(loaded))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    opt = {k: v for k, v in arrays.items() if k.startswith("optim.")}
    if optimizer is not None and opt:
        need = set(optimizer.state_arrays())
        if set(opt) != need:
            raise CheckpointError("optimizer state in checkpoint does not match the model")
    for k, p in params.items():
        p.data = loaded[k].astype(p.data.dtype)
    if optimizer is not None and opt:
        optimizer.load_state_arrays(opt)


def model_arrays(params, optimizer=None, prefix="param."):
    out = {prefix + k: p.data for k, p in params.items()}
    if optimizer is not None:
        out.update(optimizer.state_arrays())
    return out
