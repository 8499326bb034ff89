"""Hard sorting and its Gumbel-Sinkhorn relaxation.

Convention used throughout: in a permutation matrix ``P`` (hard or soft),
row ``i`` is the rank position (0 = highest score) and column ``j`` is the
original element.  ``P @ a`` therefore lists the scores in descending order,
and the top-k mask is the sum of the first ``k`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "SoftSortConfig",
    "HardPermutation",
    "target_positions",
    "similarity_matrix",
    "gumbel_noise",
    "gumbel_perturb",
    "sinkhorn",
    "soft_topk_masks",
    "soft_permutation",
    "hard_sort",
    "hard_topk_mask",
    "hard_topk_masks",
    "is_doubly_stochastic",
]


@dataclass(frozen=True)
class SoftSortConfig:
    tau: float = 1.0
    sinkhorn_iters: int = 30
    gumbel_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be at least 1")


@dataclass(frozen=True)
class HardPermutation:
    order: np.ndarray  # 0-based element indices, highest score first

    @property
    def K(self) -> int:
        return len(self.order)

    @property
    def ranks(self) -> np.ndarray:
        """ranks[j] = 0-based rank position of element j."""
        r = np.empty(self.K, dtype=np.intp)
        r[self.order] = np.arange(self.K)
        return r

    @property
    def matrix(self) -> np.ndarray:
        P = np.zeros((self.K, self.K))
        P[np.arange(self.K), self.order] = 1.0
        return P


def target_positions(K: int) -> np.ndarray:
    """The descending ramp (1/K)[K, K-1, ..., 1]."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return np.arange(K, 0, -1, dtype=np.float64) / K


def similarity_matrix(a, p=None) -> Tensor:
    """L[..., i, j] = -(a_i - p_j)^2 with rows indexing elements.

    ``a`` may carry leading batch axes; ``p`` defaults to the target ramp.
    """
    a = dc.as_tensor(a)
    K = a.shape[-1]
    p = target_positions(K) if p is None else np.asarray(p, dtype=np.float64)
    if p.shape != (K,):
        raise ValueError(f"similarity_matrix: len(a)={K} but len(p)={p.shape[-1] if p.ndim else 0}")
    diff = dc.sub(dc.reshape(a, a.shape + (1,)), p)
    return dc.neg(dc.square(diff))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel samples -log(-log u); draws of u == 0 are redrawn."""
    u = rng.random(shape)
    bad = u == 0.0
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = u == 0.0
    return -np.log(-np.log(u))


def gumbel_perturb(L, cfg: SoftSortConfig, rng: np.random.Generator | None = None) -> Tensor:
    """(L + G) / tau with Gumbel noise when enabled, else L / tau."""
    L = dc.as_tensor(L)
    if cfg.gumbel_enabled:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        L = dc.add(L, gumbel_noise(L.shape, rng))
    return dc.div(L, cfg.tau)


def sinkhorn(log_alpha, iters: int = 30) -> Tensor:
    """Log-domain Sinkhorn normalisation of ``exp(log_alpha)``.

    Each round normalises rows and then columns, so the returned matrix has
    columns summing to one to machine precision and rows to within the
    convergence error.  The loop is fully unrolled on the tape.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    x = dc.as_tensor(log_alpha)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise dc.ShapeError("sinkhorn expects square matrices")
    for _ in range(iters):
        x = dc.sub(x, dc.logsumexp(x, axis=-1, keepdims=True))
        x = dc.sub(x, dc.logsumexp(x, axis=-2, keepdims=True))
    return dc.exp(x)


def soft_permutation(a, cfg: SoftSortConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Ranks-by-elements soft permutation for scores ``a`` (rows are ranks)."""
    L = similarity_matrix(a)
    Lt = gumbel_perturb(L, cfg, rng)
    return sinkhorn(dc.transpose(Lt), cfg.sinkhorn_iters)


def soft_topk_masks(P) -> Tensor:
    """Row k-1 of the result is the soft membership of each element in the top k."""
    return dc.cumsum(P, axis=-2)


def is_doubly_stochastic(P, tol: float = 1e-6) -> bool:
    P = np.asarray(P.data if isinstance(P, Tensor) else P)
    if (P < -tol).any():
        return False
    return bool(
        np.abs(P.sum(axis=-1) - 1.0).max() <= tol and np.abs(P.sum(axis=-2) - 1.0).max() <= tol
    )


def hard_sort(a) -> HardPermutation:
    """Stable descending sort; equal scores keep their original index order."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    # Stable ascending sort of -a preserves index order among ties.
    return HardPermutation(np.argsort(-a, kind="stable"))


def hard_topk_mask(perm: HardPermutation, k: int) -> np.ndarray:
    if not 0 <= k <= perm.K:
        raise ValueError(f"k={k} outside [0, {perm.K}]")
    mask = np.zeros(perm.K)
    mask[perm.order[:k]] = 1.0
    return mask


def hard_topk_masks(perm: HardPermutation, ks) -> np.ndarray:
    """Stack of masks, one row per k in ``ks``."""
    ks = np.asarray(ks, dtype=np.intp)
    if ks.size and (ks.min() < 0 or ks.max() > perm.K):
        raise ValueError(f"k outside [0, {perm.K}]")
    return (perm.ranks[None, :] < ks[:, None]).astype(np.float64)
