"""Differentiable Deletion/Insertion objective over grid regions.

The attribution map is mean-pooled onto a G x G grid (optionally shifted
cyclically), the region scores are soft-sorted with Gumbel-Sinkhorn, and the
resulting soft top-k masks are upsampled back to pixels to blend the image
with a reference.  The classifier's target probability, averaged over a
sample of steps k, gives soft Deletion and Insertion scores that carry
gradients back to the map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .softperm import SoftSortConfig, soft_permutation, soft_topk_masks

__all__ = [
    "GridSpec",
    "LossWeights",
    "admissible_grids",
    "region_pool",
    "upsample_mask",
    "sample_steps",
    "sample_grid",
    "soft_auc",
    "soft_auc_multi",
    "smoothness_penalty",
    "total_loss",
    "objective",
]


@dataclass(frozen=True)
class GridSpec:
    G: int
    dy: int = 0
    dx: int = 0

    @property
    def K(self) -> int:
        return self.G * self.G

    def validate(self, H: int, W: int) -> "GridSpec":
        if not 1 <= self.G <= min(H, W):
            raise ValueError(f"grid size {self.G} outside [1, {min(H, W)}]")
        if H % self.G or W % self.G:
            raise ValueError(f"grid size {self.G} must divide the image size {H}x{W}")
        if not (0 <= self.dy < H // self.G and 0 <= self.dx < W // self.G):
            raise ValueError(f"offset ({self.dy}, {self.dx}) outside the {H // self.G}-pixel cell")
        return self


@dataclass(frozen=True)
class LossWeights:
    lambda_del: float = 1.0
    lambda_ins: float = 1.0
    lambda_reg: float = 2.5e-3

    def __post_init__(self):
        vals = (self.lambda_del, self.lambda_ins, self.lambda_reg)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


def admissible_grids(g_min: int, g_max: int, H: int, W: int) -> list:
    return [g for g in range(max(1, g_min), g_max + 1) if H % g == 0 and W % g == 0]


@lru_cache(maxsize=128)
def _assignment(H: int, W: int, G: int, dy: int, dx: int) -> np.ndarray:
    """Region id of every pixel (raster order) under the shifted partition."""
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    reg = (((yy + dy) % H) // (H // G)) * G + ((xx + dx) % W) // (W // G)
    reg = reg.reshape(-1)
    reg.setflags(write=False)
    return reg


@lru_cache(maxsize=128)
def _operators(H: int, W: int, G: int, dy: int, dx: int):
    reg = _assignment(H, W, G, dy, dx)
    up = np.zeros((G * G, H * W))
    up[reg, np.arange(H * W)] = 1.0
    pool = (up / up.sum(axis=1, keepdims=True)).T.copy()
    up.setflags(write=False)
    pool.setflags(write=False)
    return pool, up


def region_pool(A, grid: GridSpec) -> Tensor:
    """Mean of the map over each region; output has K = G*G entries per map."""
    A = dc.as_tensor(A)
    H, W = A.shape[-2:]
    grid.validate(H, W)
    pool, _ = _operators(H, W, grid.G, grid.dy, grid.dx)
    lead = A.shape[:-2]
    flat = dc.reshape(A, (-1, H * W))
    return dc.reshape(dc.matmul(flat, pool), lead + (grid.K,))


def upsample_mask(m, grid: GridSpec, H: int, W: int) -> Tensor:
    """Paint each region's value onto its pixels (inverse of the pooling map)."""
    m = dc.as_tensor(m)
    grid.validate(H, W)
    if m.shape[-1] != grid.K:
        raise ValueError(f"mask has {m.shape[-1]} entries, grid has {grid.K} regions")
    _, up = _operators(H, W, grid.G, grid.dy, grid.dx)
    lead = m.shape[:-1]
    flat = dc.reshape(m, (-1, grid.K))
    return dc.reshape(dc.matmul(flat, up), lead + (H, W))


def sample_steps(K: int, S: int, rng: np.random.Generator | None = None, jitter: bool = True) -> np.ndarray:
    """Evenly spaced perturbation steps in {1..K}, shifted by a shared random jitter.

    The base grid is k_j = round(j*K/S) for j = 1..S.  All points except the
    final k = K move by one common offset drawn from [-J, J] with
    J = floor(K / (2S)); the result is clipped to {1..K} and deduplicated.
    """
    if not 1 <= S <= K:
        raise ValueError(f"need 1 <= S <= K, got S={S}, K={K}")
    j = np.arange(1, S + 1)
    ks = np.floor(j * K / S + 0.5).astype(np.intp)
    span = K // (2 * S)
    if jitter and span > 0 and S > 1:
        if rng is None:
            raise ValueError("jittered step sampling needs an rng")
        ks[:-1] += int(rng.integers(-span, span + 1))
    return np.unique(np.clip(ks, 1, K))


def sample_grid(rng: np.random.Generator, g_min: int, g_max: int, H: int, W: int) -> GridSpec:
    """Uniform grid size among divisors of H and W in [g_min, g_max], uniform offset."""
    if g_min > g_max:
        raise ValueError("g_min must not exceed g_max")
    sizes = admissible_grids(g_min, g_max, H, W)
    if not sizes:
        raise ValueError(f"no grid size in [{g_min}, {g_max}] divides {H}x{W}")
    G = int(sizes[rng.integers(len(sizes))])
    dy = int(rng.integers(H // G))
    dx = int(rng.integers(W // G))
    return GridSpec(G, dy, dx)


def _forward_fn(f) -> Callable[[Tensor], Tensor]:
    fn = getattr(f, "forward", f)
    if not callable(fn):
        raise TypeError("classifier must be callable or expose forward")
    return fn


def soft_auc(
    f,
    A,
    I,
    I0,
    t,
    grid: GridSpec,
    steps: Sequence[int],
    cfg: SoftSortConfig,
    rng: np.random.Generator | None = None,
):
    """Soft Deletion and Insertion scores.

    ``A`` is a map ``(H, W)`` or a batch ``(B, H, W)``; ``I`` and ``I0`` are
    arrays of the same shape and ``t`` the target class (per image for a
    batch).  ``f`` maps a tensor of images ``(M, H, W)`` to probabilities
    ``(M, C)``.  Returns two tensors shaped like the batch axis (scalars for
    a single map).  One Gumbel draw per image feeds every step.
    """
    return soft_auc_multi(f, A, I, [I0], t, grid, steps, cfg, rng)[0]


def soft_auc_multi(f, A, I, references, t, grid, steps, cfg, rng=None) -> list:
    """:func:`soft_auc` for several references sharing one soft permutation.

    Returns a list of ``(deletion, insertion)`` pairs, one per reference.
    """
    f = _forward_fn(f)
    A = dc.as_tensor(A)
    single = A.ndim == 2
    if single:
        A = dc.reshape(A, (1,) + A.shape)
    B, H, W = A.shape
    I = np.asarray(I, dtype=np.float64).reshape(B, H, W)
    t = np.atleast_1d(np.asarray(t, dtype=np.intp))
    if t.size == 1 and B > 1:
        t = np.repeat(t, B)
    ks = np.asarray(steps, dtype=np.intp)
    if ks.size == 0 or ks.min() < 1 or ks.max() > grid.K:
        raise ValueError(f"steps must lie in [1, {grid.K}]")
    S = ks.size

    a = region_pool(A, grid)  # B, K
    P = soft_permutation(a, cfg, rng)  # B, K(rank), K(element)
    m = dc.gather_rows(soft_topk_masks(P), ks - 1, axis=1)  # B, S, K
    mp = upsample_mask(m, grid, H, W)  # B, S, H, W

    x = I[:, None]
    blends = []
    for I0 in references:
        x0 = np.asarray(I0, dtype=np.float64).reshape(B, H, W)[:, None]
        blends.append(dc.add(x, dc.mul(x0 - x, mp)))  # deletion
        blends.append(dc.add(x0, dc.mul(x - x0, mp)))  # insertion
    R = len(blends)
    probs = f(dc.reshape(dc.concat(blends, axis=0), (R * B * S, H, W)))
    if not np.isfinite(probs.data).all():
        raise dc.NumericError("classifier produced non-finite output")
    C = probs.shape[-1]
    onehot = np.zeros((R, B, S, C))
    onehot[:, np.arange(B), :, t] = 1.0
    target = dc.sum(dc.mul(dc.reshape(probs, (R, B, S, C)), onehot), axis=-1)  # R, B, S
    scores = dc.mean(target, axis=-1)  # R, B
    shape = () if single else (B,)
    out = []
    for r in range(0, R, 2):
        d = dc.reshape(dc.gather_rows(scores, [r], axis=0), shape)
        i = dc.reshape(dc.gather_rows(scores, [r + 1], axis=0), shape)
        out.append((d, i))
    return out


def smoothness_penalty(A, window: int = 3, padding: str = "reflect") -> Tensor:
    """Mean squared gap between the map and its box-filtered copy."""
    A = dc.as_tensor(A)
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 3")
    H, W = A.shape[-2:]
    if window > min(H, W):
        raise ValueError(f"window {window} larger than the {H}x{W} map")
    return dc.mean(dc.square(dc.sub(A, dc.avg_filter2d(A, window, padding))))


def total_loss(del_soft, ins_soft, penalty, w: LossWeights) -> Tensor:
    terms = dc.sub(dc.mul(del_soft, w.lambda_del), dc.mul(ins_soft, w.lambda_ins))
    return dc.add(terms, dc.mul(penalty, w.lambda_reg))


def objective(
    f,
    A,
    I,
    references: Sequence[np.ndarray],
    t,
    grid: GridSpec,
    steps: Sequence[int],
    cfg: SoftSortConfig,
    weights: LossWeights,
    rng: np.random.Generator | None = None,
):
    """Total loss averaged over images and over the given reference images.

    Returns ``(loss, parts)`` where ``parts`` holds the plain-float mean soft
    deletion, insertion and penalty values.  With both AUC weights at zero
    the classifier is never run and those two entries are NaN.
    """
    if not references:
        raise ValueError("need at least one reference image")
    if weights.lambda_del == 0 and weights.lambda_ins == 0:
        pen = smoothness_penalty(A)
        loss = dc.mul(pen, weights.lambda_reg)
        return loss, {"deletion": math.nan, "insertion": math.nan, "penalty": float(pen.data)}
    pairs = soft_auc_multi(f, A, I, references, t, grid, steps, cfg, rng)
    dels = [dc.mean(d) for d, _ in pairs]
    inss = [dc.mean(i) for _, i in pairs]
    n = float(len(references))
    d = dels[0] if len(dels) == 1 else dc.div(_sum_all(dels), n)
    i = inss[0] if len(inss) == 1 else dc.div(_sum_all(inss), n)
    pen = smoothness_penalty(A) if weights.lambda_reg else dc.as_tensor(0.0)
    loss = total_loss(d, i, pen, weights)
    parts = {"deletion": float(d.data), "insertion": float(i.data), "penalty": float(pen.data)}
    return loss, parts


def _sum_all(ts):
    out = ts[0]
    for x in ts[1:]:
        out = dc.add(out, x)
    return out
