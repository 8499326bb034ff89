"""Hard perturbation metrics for attribution maps.

Classifiers are plain callables mapping a stack of images ``(M, H, W)`` to a
``(M, C)`` array of class probabilities.  Objects exposing
``predict_proba`` are accepted as well.

Pixel order always comes from :func:`rankattr.softperm.hard_sort`, so every
metric depends on the attribution map only through the ranking it induces
(ties are resolved by raster index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import box_filter_matrix
from .softperm import hard_sort

__all__ = [
    "REF_MODES",
    "DEFAULT_FRACTIONS",
    "MetricReport",
    "ProbabilityError",
    "as_prob_fn",
    "blur",
    "make_reference",
    "perturb",
    "auc_curves",
    "deletion_auc",
    "insertion_auc",
    "positive_negative_auc",
    "rank_normalize",
    "masked_scores",
    "adp_from_scores",
    "pic_from_scores",
    "adp",
    "pic",
    "evaluate",
]

REF_MODES = ("black", "mean", "blur")
DEFAULT_FRACTIONS = tuple(i / 10 for i in range(10))

ProbFn = Callable[[np.ndarray], np.ndarray]


class ProbabilityError(ValueError):
    """Classifier output is not a batch of probability vectors."""


def as_prob_fn(f) -> ProbFn:
    fn = getattr(f, "predict_proba", f)
    if not callable(fn):
        raise TypeError("classifier must be callable or expose predict_proba")
    return fn


def _probs(f: ProbFn, images: np.ndarray) -> np.ndarray:
    out = np.asarray(f(images), dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != images.shape[0]:
        raise ProbabilityError(f"classifier returned shape {out.shape} for {images.shape[0]} images")
    if not np.isfinite(out).all() or (out < 0).any() or np.abs(out.sum(axis=1) - 1.0).max() > 1e-6:
        raise ProbabilityError("classifier output rows must be probability vectors")
    return out


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


# ----------------------------------------------------------------------------
# References and perturbation
# ----------------------------------------------------------------------------


def blur(img: np.ndarray, radius: int = 2, passes: int = 3) -> np.ndarray:
    """Iterated box filter with edge replication (a cheap Gaussian stand-in)."""
    if radius < 1:
        raise ValueError("blur radius must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    ry = box_filter_matrix(h, 2 * radius + 1, "edge")
    rx = box_filter_matrix(w, 2 * radius + 1, "edge")
    for _ in range(passes):
        img = ry @ img @ rx.T
    return img


def make_reference(img, mode: str, dataset_mean: float = 0.5, blur_radius: int = 2) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if mode == "black":
        return np.zeros_like(img)
    if mode == "mean":
        return np.full_like(img, dataset_mean)
    if mode == "blur":
        return blur(img, blur_radius)
    raise ValueError(f"unknown reference mode {mode!r}; expected one of {REF_MODES}")


def _check_shapes(A, I, I0=None):
    A = np.asarray(A, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    if A.shape != I.shape or A.ndim != 2:
        raise ValueError(f"attribution {A.shape} and image {I.shape} must be matching 2-D arrays")
    if I0 is not None:
        I0 = np.asarray(I0, dtype=np.float64)
        if I0.shape != I.shape:
            raise ValueError(f"reference {I0.shape} does not match image {I.shape}")
    return A, I, I0


def _blend(I, I0, masks, direction):
    """masks: (S, N) 0/1 rows -> (S, H, W) perturbed images."""
    flat, flat0 = I.reshape(-1), I0.reshape(-1)
    if direction == "deletion":
        out = flat * (1.0 - masks) + flat0 * masks
    elif direction == "insertion":
        out = flat * masks + flat0 * (1.0 - masks)
    else:
        raise ValueError("direction must be 'deletion' or 'insertion'")
    return out.reshape((-1,) + I.shape)


def perturb(A, I, I0, k: int, direction: str) -> np.ndarray:
    """Replace (deletion) or reveal (insertion) the top-k pixels of ``A``."""
    A, I, I0 = _check_shapes(A, I, I0)
    N = A.size
    if not 0 <= k <= N:
        raise ValueError(f"k={k} outside [0, {N}]")
    ranks = hard_sort(A).ranks
    mask = (ranks < k).astype(np.float64)[None, :]
    return _blend(I, I0, mask, direction)[0]


# ----------------------------------------------------------------------------
# Deletion / Insertion
# ----------------------------------------------------------------------------


def _step_grid(N: int, stride: int) -> np.ndarray:
    if stride < 1 or N % stride:
        raise ValueError(f"step_stride={stride} must be >= 1 and divide N={N}")
    return np.arange(stride, N + 1, stride)


def auc_curves(f, A, I, I0, t: int, step_stride: int = 1, directions=("deletion", "insertion")):
    """Return ``(ks, {direction: scores})`` with the target probability per step."""
    f = as_prob_fn(f)
    A, I, I0 = _check_shapes(A, I, I0)
    ks = _step_grid(A.size, step_stride)
    ranks = hard_sort(A).ranks
    masks = (ranks[None, :] < ks[:, None]).astype(np.float64)
    curves = {}
    for direction in directions:
        probs = _probs(f, _blend(I, I0, masks, direction))
        curves[direction] = probs[:, int(t)].copy()
    return ks, curves


def deletion_auc(f, A, I, I0, t: int, step_stride: int = 1) -> float:
    _, c = auc_curves(f, A, I, I0, t, step_stride, ("deletion",))
    return _mean(c["deletion"])


def insertion_auc(f, A, I, I0, t: int, step_stride: int = 1) -> float:
    _, c = auc_curves(f, A, I, I0, t, step_stride, ("insertion",))
    return _mean(c["insertion"])


# ----------------------------------------------------------------------------
# Positive / Negative perturbation
# ----------------------------------------------------------------------------


def _removal_counts(fractions, N):
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size == 0:
        raise ValueError("fractions must not be empty")
    if (fr < 0).any() or (fr > 1).any() or (np.diff(fr) < 0).any():
        raise ValueError("fractions must be sorted and lie in [0, 1]")
    # The small guard keeps e.g. 0.29 * 100 from flooring to 28.
    return np.floor(fr * N + 1e-9).astype(np.intp)


def positive_negative_auc(f, A, I, I0, t: int, fractions: Sequence[float] = DEFAULT_FRACTIONS):
    """Top-1 correctness averaged over removal fractions.

    Positive removes the most-attributed pixels first, Negative the least.
    Returns ``(positive, negative)``.
    """
    f = as_prob_fn(f)
    A, I, I0 = _check_shapes(A, I, I0)
    N = A.size
    counts = _removal_counts(fractions, N)
    ranks = hard_sort(A).ranks
    pos = (ranks[None, :] < counts[:, None]).astype(np.float64)
    neg = (ranks[None, :] >= N - counts[:, None]).astype(np.float64)
    out = []
    for masks in (pos, neg):
        probs = _probs(f, _blend(I, I0, masks, "deletion"))
        hits = (np.argmax(probs, axis=1) == int(t)).astype(np.float64)
        out.append(_mean(hits))
    return out[0], out[1]


# ----------------------------------------------------------------------------
# ADP / PIC
# ----------------------------------------------------------------------------


def rank_normalize(A) -> np.ndarray:
    """Map scores to [0, 1] using only their order.

    Each pixel gets (number of strictly smaller scores) / max of that count,
    so the minimum maps to 0, the maximum to 1 and ties share a value.  A
    constant map becomes all ones.
    """
    A = np.asarray(A, dtype=np.float64)
    flat = A.reshape(-1)
    srt = np.sort(flat)
    below = np.searchsorted(srt, flat, side="left").astype(np.float64)
    top = below.max() if below.size else 0.0
    if top == 0.0:
        return np.ones_like(A)
    return (below / top).reshape(A.shape)


def masked_scores(f, A, I, t: int):
    """(s_orig, s_masked) for the image and its attribution-weighted copy."""
    f = as_prob_fn(f)
    A, I, _ = _check_shapes(A, I)
    stack = np.stack([I, I * rank_normalize(A)])
    probs = _probs(f, stack)
    return float(probs[0, int(t)]), float(probs[1, int(t)])


def adp_from_scores(s_orig, s_masked) -> float:
    so = np.atleast_1d(np.asarray(s_orig, dtype=np.float64))
    sm = np.atleast_1d(np.asarray(s_masked, dtype=np.float64))
    if so.size == 0 or so.shape != sm.shape:
        raise ValueError("score arrays must be non-empty and of equal length")
    if (so <= 0).any():
        raise ValueError("original score must be positive for ADP")
    drops = 100.0 * np.maximum(0.0, so - sm) / so
    return _mean(drops)


def pic_from_scores(s_orig, s_masked) -> float:
    so = np.atleast_1d(np.asarray(s_orig, dtype=np.float64))
    sm = np.atleast_1d(np.asarray(s_masked, dtype=np.float64))
    if so.size == 0 or so.shape != sm.shape:
        raise ValueError("score arrays must be non-empty and of equal length")
    return 100.0 * int((sm > so).sum()) / so.size


def _batch_scores(f, As, Is, ts):
    As = np.asarray(As, dtype=np.float64)
    Is = np.asarray(Is, dtype=np.float64)
    if As.ndim == 2:
        As, Is, ts = As[None], Is[None], [ts]
    ts = np.atleast_1d(np.asarray(ts, dtype=np.intp))
    if len(As) == 0:
        raise ValueError("empty batch")
    pairs = [masked_scores(f, a, i, t) for a, i, t in zip(As, Is, ts)]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def adp(f, As, Is, ts) -> float:
    """Average percentage drop; accepts one image or a batch."""
    return adp_from_scores(*_batch_scores(f, As, Is, ts))


def pic(f, As, Is, ts) -> float:
    """Percentage of images whose confidence increases under masking."""
    return pic_from_scores(*_batch_scores(f, As, Is, ts))


# ----------------------------------------------------------------------------
# One-stop evaluation
# ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    deletion: float
    insertion: float
    positive: float
    negative: float
    adp: float
    pic: float
    ks: np.ndarray = field(default=None, repr=False)
    curves: dict = field(default_factory=dict, repr=False)

    METRICS = ("deletion", "insertion", "positive", "negative", "adp", "pic")

    def values(self) -> tuple:
        return tuple(getattr(self, m) for m in self.METRICS)


def evaluate(
    f,
    A,
    I,
    I0,
    t: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    step_stride: int = 1,
) -> MetricReport:
    """All six metrics for one image against one reference.

    ADP and PIC ignore the reference; ``pic`` is 100 when the masked image
    raises the target score and 0 otherwise, so dataset means are percentages.
    """
    f = as_prob_fn(f)
    ks, curves = auc_curves(f, A, I, I0, t, step_stride)
    positive, negative = positive_negative_auc(f, A, I, I0, t, fractions)
    so, sm = masked_scores(f, A, I, t)
    return MetricReport(
        deletion=_mean(curves["deletion"]),
        insertion=_mean(curves["insertion"]),
        positive=positive,
        negative=negative,
        adp=adp_from_scores(so, sm),
        pic=pic_from_scores(so, sm),
        ks=ks,
        curves=curves,
    )
