"""Guided loss: task loss plus summed layer-wise dissimilarity to a frozen guide.

The guide's activations enter as constants, so no gradient ever reaches the
guide. Guide layers are spread evenly over target layers (``compute_layer_mapping``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .similarity import DISSIMILARITIES, DegenerateBatchError
from .tensor import Tensor, as_tensor
from .tensor import ops as F
from .tensor.rng import RngState

GUIDE_MODES = ("trained", "untrained", "noise", "none")


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class LayerMapping:
    t: int
    l: int
    pairs: tuple[tuple[int, int], ...]  # (guide index, target index), zero-based

    @property
    def step(self):
        from fractions import Fraction
        return Fraction(self.t - 1, self.l - 1) if self.l > 1 else Fraction(1)

    @classmethod
    def empty(cls, t=0):
        return cls(t=t, l=0, pairs=())


def compute_layer_mapping(t: int, l: int) -> LayerMapping:
    """Guide tap i maps to target tap round_half_up(i * (t - 1) / (l - 1)); a lone guide tap maps to t - 1."""
    if t < 1 or l < 1:
        raise MappingError("tap counts must be >= 1")
    if l > t:
        raise MappingError(f"guide has more taps ({l}) than the target ({t})")
    if l == 1:
        return LayerMapping(t, l, ((0, t - 1),))
    den = l - 1
    # floor(i*(t-1)/den + 1/2) in exact integer arithmetic
    pairs = tuple((i, min((2 * i * (t - 1) + den) // (2 * den), t - 1)) for i in range(l))
    return LayerMapping(t, l, pairs)


@dataclass
class GuidanceConfig:
    guide_mode: str = "none"
    disconnect_after_steps: int | None = None
    metric: str = "cka"
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.guide_mode not in GUIDE_MODES:
            raise ValueError(f"guide_mode must be one of {GUIDE_MODES}")
        if self.metric not in DISSIMILARITIES:
            raise ValueError(f"metric must be one of {tuple(DISSIMILARITIES)}")
        if self.disconnect_after_steps is not None and self.disconnect_after_steps < 1:
            raise ValueError("disconnect_after_steps must be >= 1")
        if self.loss_weight != 1:
            raise ValueError("the dissimilarity term is unweighted (loss_weight must be 1)")

    @property
    def enabled(self) -> bool:
        return self.guide_mode != "none"

    def active_at(self, step: int) -> bool:
        """Whether the dissimilarity term applies at 1-based training ``step``."""
        return self.enabled and (self.disconnect_after_steps is None or step <= self.disconnect_after_steps)


@dataclass
class GuidedLossBreakdown:
    task_loss: Tensor
    dissimilarity_total: Tensor
    per_layer: list = field(default_factory=list)  # [((iG, iT), Tensor)]
    total: Tensor | None = None


def flatten_activation(raw, pad_mask=None) -> Tensor:
    """(b, C, H, W) -> (b, C*H*W); (b, T, d) -> (b, T*d) with positions where
    ``pad_mask`` is False zeroed; 2-D passes through."""
    x = as_tensor(raw)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and pad_mask is not None:
        m = np.asarray(pad_mask, dtype=bool)
        if m.shape != x.shape[:2]:
            raise ValueError(f"mask shape {m.shape} does not match activation {x.shape[:2]}")
        if not m.all():
            x = x * m[:, :, None].astype(x.dtype)
    return F.reshape(x, (x.shape[0], -1))


def guide_batch(x, mode: str = "same", rng: RngState | None = None, vocab: int | None = None):
    """Input for the guide: the batch itself, or same-shaped noise.

    Continuous inputs get N(0, 1) noise; integer token inputs get uniform
    random ids in [0, vocab).
    """
    if mode == "same":
        return x
    if mode != "noise":
        raise ValueError(f"unknown guide input mode {mode!r}")
    if rng is None:
        raise ValueError("noise mode needs an rng")
    arr = np.asarray(x)
    if arr.dtype.kind in "iu":
        if vocab is None:
            raise ValueError("token noise needs the vocabulary size")
        return rng.gen.integers(0, vocab, size=arr.shape).astype(arr.dtype)
    return rng.gen.standard_normal(arr.shape).astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def guided_loss(task_loss: Tensor, target_rec, guide_rec, mapping: LayerMapping,
                metric: str = "cka") -> GuidedLossBreakdown:
    """total = task_loss + sum over mapped pairs of dissimilarity(target tap, guide tap)."""
    task_loss = as_tensor(task_loss)
    diss = DISSIMILARITIES[metric]
    per_layer = []
    total_d = None
    if mapping.pairs:
        if len(target_rec) != mapping.t or len(guide_rec) != mapping.l:
            raise MappingError(f"records ({len(target_rec)}, {len(guide_rec)}) do not match "
                               f"mapping ({mapping.t}, {mapping.l})")
        for ig, it in mapping.pairs:
            a = flatten_activation(target_rec.values[it], target_rec.mask)
            g = flatten_activation(guide_rec.values[ig], guide_rec.mask)
            if a.shape[0] != g.shape[0]:
                raise ValueError(f"batch sizes differ: target {a.shape[0]} vs guide {g.shape[0]}")
            if a.shape[0] < 3:
                raise DegenerateBatchError("guided loss needs a batch of at least 3")
            d = diss(a, Tensor(g.data))  # guide side is a constant
            per_layer.append(((ig, it), d))
            total_d = d if total_d is None else total_d + d
    if total_d is None:
        total_d = Tensor(np.zeros((), dtype=task_loss.dtype))
        total = task_loss
    else:
        total = task_loss + total_d
    return GuidedLossBreakdown(task_loss, total_d, per_layer, total)
