"""Fast invariant checks runnable from the command line (``rankattr selftest``)."""

from __future__ import annotations

import math
import time

import numpy as np

from . import diffcore as dc
from . import pertmetrics as pm
from . import softobjective as so
from . import softperm as sp


def _linear_softmax(Wt, b):
    """Row-deterministic linear-softmax classifier on both the numpy and tape paths."""

    def probs(x):
        x = np.asarray(x).reshape(len(x), -1)
        z = (x[:, None, :] * Wt[None]).sum(-1) + b
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def forward(x):
        x = dc.reshape(x, (x.shape[0], -1))
        return dc.softmax(dc.add(dc.matmul(x, Wt.T), b))

    return probs, forward


def check_sinkhorn() -> bool:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        P = sp.sinkhorn(rng.normal(size=(8, 8)), 30).data
        worst = max(worst, np.abs(P.sum(0) - 1).max(), np.abs(P.sum(1) - 1).max())
    return worst <= 1e-4


def check_gradients() -> bool:
    rng = np.random.default_rng(1)
    I = rng.uniform(size=(3, 3))
    I0 = np.zeros((3, 3))
    _, fwd = _linear_softmax(rng.normal(size=(2, 9)), rng.normal(size=2))
    grid = so.GridSpec(3)
    cfg = sp.SoftSortConfig(tau=0.5, gumbel_enabled=False)
    w = so.LossWeights(1.0, 1.0, 0.1)

    def f(A):
        d, i = so.soft_auc(fwd, A, I, I0, 0, grid, np.arange(1, 10), cfg)
        return so.total_loss(d, i, so.smoothness_penalty(A), w)

    return dc.finite_difference_check(f, rng.uniform(size=(3, 3)), h=1e-5, tol=1e-3).passed


def check_hard_oracle() -> bool:
    rng = np.random.default_rng(2)
    probs, _ = _linear_softmax(rng.normal(size=(3, 16)), rng.normal(size=3))
    A, I = rng.normal(size=(4, 4)), rng.uniform(size=(4, 4))
    I0 = np.zeros((4, 4))
    order = sorted(range(16), key=lambda j: (-A.reshape(-1)[j], j))
    vals = []
    for k in range(1, 17):
        m = np.zeros(16)
        m[order[:k]] = 1
        x = I.reshape(-1) * (1 - m) + I0.reshape(-1) * m
        vals.append(probs(x.reshape(1, 4, 4))[0, 1])
    return pm.deletion_auc(probs, A, I, I0, 1) == math.fsum(vals) / 16


def check_mask_monotone() -> bool:
    rng = np.random.default_rng(3)
    P = sp.soft_permutation(rng.uniform(size=9), sp.SoftSortConfig(0.3, gumbel_enabled=False))
    m = sp.soft_topk_masks(P).data
    return bool((np.diff(m, axis=0) >= -1e-12).all() and np.allclose(m[-1], 1.0))


CHECKS = (
    ("sinkhorn doubly stochastic (100 trials, 8x8, 30 iters)", check_sinkhorn),
    ("finite-difference gradient of total loss (3x3)", check_gradients),
    ("hard deletion AUC equals brute-force enumeration", check_hard_oracle),
    ("soft top-k masks monotone and complete", check_mask_monotone),
)


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        passed = bool(fn())
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}  ({time.perf_counter() - t0:.2f}s)")
    return ok
