from __future__ import annotations

import json

import numpy as np

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor


class RngState:
    """Seeded PCG64 stream. Same seed and same call sequence give the same draws."""

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.stream])))

    def child(self, *stream: int) -> "RngState":
        """Independent stream derived from this seed (not from the current position)."""
        return RngState(self.seed, *self.stream, *stream)

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream": list(self.stream), "bit_generator": self.gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state["bit_generator"]

    def to_json(self) -> str:
        return json.dumps(self.get_state(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RngState":
        st = json.loads(text)
        r = cls(st["seed"], *st["stream"])
        r.set_state(st)
        return r


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one dimension, all >= 1")
    return shape


def randn(shape, rng: RngState, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(rng.gen.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


def uniform(shape, bound: float, rng: RngState, dtype=DEFAULT_DTYPE) -> np.ndarray:
    shape = _check_shape(shape)
    return rng.gen.uniform(-bound, bound, size=shape).astype(dtype)
