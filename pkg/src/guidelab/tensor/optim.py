"""Adam / AdamW and global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def adam(cls, lr, weight_decay=0.0, **kw):
        return cls(lr=lr, weight_decay=weight_decay, decoupled=False, **kw)

    @classmethod
    def adamw(cls, lr, weight_decay=0.01, **kw):
        return cls(lr=lr, weight_decay=weight_decay, decoupled=True, **kw)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "decoupled": self.decoupled}


def optimizer_step(state: OptimizerState, params: dict[str, Tensor]) -> None:
    """One Adam(W) update of ``params`` in place from their ``.grad``; increments ``state.t``."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; call backward first")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {name!r}")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay and state.decoupled:
            p.data *= p.data.dtype.type(1 - state.lr * state.weight_decay)
        step = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale every grad so the global L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads])))
    if total > max_norm:
        s = max_norm / total
        for g in grads:
            g *= g.dtype.type(s)
    return total
