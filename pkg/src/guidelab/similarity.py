"""Differentiable representational similarity: linear CKA and cosine-RDM RSA.

Inputs are (b, d) activation matrices, one row per sample. Everything is built
from tensor ops, so gradients flow to whichever argument requires them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor
from .tensor import ops as F


class SimilarityError(ValueError):
    pass


class DegenerateBatchError(SimilarityError):
    pass


class DegenerateRepresentationError(SimilarityError):
    pass


@dataclass
class ActivationMatrix:
    values: Tensor
    layer_name: str = ""
    network_tag: str = "target"

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 2:
            raise SimilarityError(f"activation matrix must be 2-D, got {self.values.shape}")
        if self.values.shape[0] < 2:
            raise DegenerateBatchError("activation matrix needs at least 2 samples")


@dataclass
class GramMatrix:
    values: Tensor
    centered: bool = False


def _mat(R) -> Tensor:
    if isinstance(R, ActivationMatrix):
        return R.values
    R = as_tensor(R)
    if R.ndim != 2:
        raise SimilarityError(f"expected a (b, d) matrix, got shape {R.shape}")
    return R


def gram(R) -> GramMatrix:
    """Uncentred linear kernel K = R R^T."""
    R = _mat(R)
    if R.shape[0] < 2:
        raise DegenerateBatchError("Gram matrix needs at least 2 samples")
    return GramMatrix(F.matmul(R, F.transpose(R, (1, 0))), centered=False)


def center_gram(K: GramMatrix) -> GramMatrix:
    """H K H with H = I - 11^T/b, computed as double mean subtraction."""
    if K.centered:
        raise SimilarityError("Gram matrix is already centred")
    k = K.values
    kc = k - F.mean(k, axis=0, keepdims=True) - F.mean(k, axis=1, keepdims=True) + F.mean(k)
    return GramMatrix(kc, centered=True)


def hsic(Kc: GramMatrix, Lc: GramMatrix) -> Tensor:
    """tr(Kc Lc). Both arguments are symmetric, so this is the elementwise product sum."""
    if not (Kc.centered and Lc.centered):
        raise SimilarityError("hsic expects centred Gram matrices")
    if Kc.values.shape != Lc.values.shape:
        raise SimilarityError(f"Gram sizes differ: {Kc.values.shape} vs {Lc.values.shape}")
    return F.sum(Kc.values * Lc.values)


def _degenerate(h, k_uncentred) -> bool:
    eps = np.finfo(k_uncentred.dtype).eps
    scale = float(np.sum(np.square(k_uncentred.data, dtype=np.float64)))
    return float(h.data) <= (1e3 * eps) ** 2 * max(scale, np.finfo(np.float64).tiny)


def linear_cka(R, R2) -> Tensor:
    R, R2 = _mat(R), _mat(R2)
    if R.shape[0] != R2.shape[0]:
        raise SimilarityError(f"sample counts differ: {R.shape[0]} vs {R2.shape[0]}")
    K, L = gram(R), gram(R2)
    Kc, Lc = center_gram(K), center_gram(L)
    kl, kk, ll = hsic(Kc, Lc), hsic(Kc, Kc), hsic(Lc, Lc)
    if _degenerate(kk, K.values) or _degenerate(ll, L.values):
        raise DegenerateRepresentationError("a representation is constant across the batch")
    return kl / F.sqrt(kk * ll)


def cka_dissimilarity(R, R2) -> Tensor:
    return 1.0 - linear_cka(R, R2)


def rdm_cosine(R) -> Tensor:
    """Pairwise cosine distances 1 - cos(R_i, R_j)."""
    R = _mat(R)
    sq = F.sum(R * R, axis=1, keepdims=True)
    if np.any(sq.data <= np.finfo(sq.dtype).tiny):
        raise SimilarityError("cosine RDM is undefined for a zero-norm row")
    Rn = R / F.sqrt(sq)
    return 1.0 - F.matmul(Rn, F.transpose(Rn, (1, 0)))


def _lower(D: Tensor) -> Tensor:
    rows, cols = np.tril_indices(D.shape[0], k=-1)
    return F.getitem(D, (rows, cols))


def pearson(u: Tensor, v: Tensor) -> Tensor:
    uc = u - F.mean(u)
    vc = v - F.mean(v)
    su, sv = F.sum(uc * uc), F.sum(vc * vc)
    tiny = (1e3 * np.finfo(u.dtype).eps) ** 2
    if float(su.data) <= tiny * float(np.sum(np.square(u.data))) or float(sv.data) <= tiny * float(np.sum(np.square(v.data))):
        raise DegenerateRepresentationError("RDM lower triangle has zero variance")
    return F.sum(uc * vc) / F.sqrt(su * sv)


def rsa_similarity(R, R2) -> Tensor:
    R, R2 = _mat(R), _mat(R2)
    if R.shape[0] != R2.shape[0]:
        raise SimilarityError(f"sample counts differ: {R.shape[0]} vs {R2.shape[0]}")
    if R.shape[0] < 3:
        raise DegenerateBatchError("RSA needs at least 3 samples")
    return pearson(_lower(rdm_cosine(R)), _lower(rdm_cosine(R2)))


def rsa_dissimilarity(R, R2) -> Tensor:
    return 1.0 - rsa_similarity(R, R2)


DISSIMILARITIES = {"cka": cka_dissimilarity, "rsa": rsa_dissimilarity}
