"""GLAB checkpoint container.

All integers little-endian::

    b"GLAB"                     magic
    u32 version                 currently 1
    u32 n_tensors
      repeat n_tensors:
        u32 name_len, name (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f32 values
    u8 has_optimizer
      if 1:
        u32 len, hyperparameter JSON (UTF-8)
        u64 step count t
        u32 n_slots
          repeat: u32 name_len, name, then m and v as (u32 rank, u64 dims, f32 values)
    u8 has_rng
      if 1: u32 len, RNG state JSON
    u32 len, metadata JSON      network spec and run info; may be "{}"
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .optim import OptimizerState
from .rng import RngState

MAGIC = b"GLAB"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    rng: RngState | None = None
    meta: dict = field(default_factory=dict)


def _w_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _r_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _r_str(f) -> str:
    (n,) = struct.unpack("<I", _r_exact(f, 4))
    return _r_exact(f, n).decode("utf-8")


def _w_arr(f, a: np.ndarray) -> None:
    a = np.asarray(a)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _r_arr(f) -> np.ndarray:
    (rank,) = struct.unpack("<I", _r_exact(f, 4))
    dims = struct.unpack(f"<{rank}Q", _r_exact(f, 8 * rank))
    n = int(np.prod(dims)) if rank else 1
    return np.frombuffer(_r_exact(f, 4 * n), dtype="<f4").reshape(dims).astype(np.float32)


def dumps(ck: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    f.write(struct.pack("<I", len(ck.tensors)))
    for name, arr in ck.tensors.items():
        _w_str(f, name)
        _w_arr(f, arr)
    opt = ck.optimizer
    f.write(struct.pack("<B", opt is not None))
    if opt is not None:
        _w_str(f, json.dumps(opt.hyperparams(), sort_keys=True))
        f.write(struct.pack("<Q", opt.t))
        f.write(struct.pack("<I", len(opt.m)))
        for name in opt.m:
            _w_str(f, name)
            _w_arr(f, opt.m[name])
            _w_arr(f, opt.v[name])
    f.write(struct.pack("<B", ck.rng is not None))
    if ck.rng is not None:
        _w_str(f, ck.rng.to_json())
    _w_str(f, json.dumps(ck.meta, sort_keys=True))
    return f.getvalue()


def loads(data: bytes) -> Checkpoint:
    f = io.BytesIO(data)
    if f.read(4) != MAGIC:
        raise CheckpointError("not a GLAB checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _r_exact(f, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _r_exact(f, 4))
    tensors = {}
    for _ in range(n):
        name = _r_str(f)
        tensors[name] = _r_arr(f)
    opt = None
    if struct.unpack("<B", _r_exact(f, 1))[0]:
        hp = json.loads(_r_str(f))
        (t,) = struct.unpack("<Q", _r_exact(f, 8))
        opt = OptimizerState(t=t, **hp)
        (k,) = struct.unpack("<I", _r_exact(f, 4))
        for _ in range(k):
            name = _r_str(f)
            opt.m[name] = _r_arr(f)
            opt.v[name] = _r_arr(f)
    rng = None
    if struct.unpack("<B", _r_exact(f, 1))[0]:
        rng = RngState.from_json(_r_str(f))
    try:
        meta = json.loads(_r_str(f))
    except ValueError as e:
        raise CheckpointError(f"corrupt metadata: {e}") from e
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(tensors, opt, rng, meta)


def save(path, ck: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ck))


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
