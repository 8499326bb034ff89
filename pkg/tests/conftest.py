import time
from dataclasses import dataclass

import numpy as np
import pytest

from rankattr import diffcore as dc
from rankattr import models as M
from rankattr import synthdata as sd

ACCEPTANCE_LINES = []


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class LinearSoftmax:
    """softmax(W x + b) evaluated row by row with elementwise products.

    Each row's result is independent of how many rows share the call, which
    the bitwise oracle comparisons rely on.
    """

    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        z = (x[:, None, :] * self.W[None]).sum(-1) + self.b
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def forward(self, x):
        x = dc.reshape(x, (x.shape[0], -1))
        return dc.softmax(dc.add(dc.matmul(x, self.W.T), self.b))


@pytest.fixture
def linear_softmax():
    def make(n_pixels, n_classes=3, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        return LinearSoftmax(rng.normal(size=(n_classes, n_pixels)) * scale, rng.normal(size=n_classes))

    return make


@dataclass
class Desk:
    clf: M.Classifier
    expl: M.Explainer
    train: tuple
    test: tuple
    train_samples: list
    test_samples: list
    dataset_mean: float
    clf_seconds: float
    expl_seconds: float
    history: list


@pytest.fixture(scope="session")
def desk():
    """Classifier and explainer trained once at the default desk scale."""
    train_samples = sd.generate(sd.DatasetConfig(samples_per_class=512, seed=0))
    test_samples = sd.generate(sd.DatasetConfig(samples_per_class=16, seed=1))
    X, y, Mk = sd.stack(train_samples)
    t0 = time.perf_counter()
    clf = M.train_classifier(X, y, M.ClassifierConfig(seed=0), num_classes=4)
    t1 = time.perf_counter()
    history = []
    mean = float(X.mean())
    expl = M.train_explainer(clf, X, M.TrainConfig(seed=0), dataset_mean=mean, history=history)
    t2 = time.perf_counter()
    return Desk(
        clf, expl, (X, y, Mk), sd.stack(test_samples), train_samples, test_samples, mean, t1 - t0, t2 - t1, history
    )


def monotone_evidence_fixture(rng, H):
    """Two-class model whose class-1 logit is a positive pixel sum, plus a map ranking pixels by contribution.

    Returns ``(clf, I, I0, A)`` with distinct map values placed on the target ramp.
    """
    from rankattr import softperm as sp

    N = H * H
    w = rng.uniform(0.5, 3.0, N)
    b = -0.3 * w.sum()
    clf = M.Classifier(H, H, 2, hidden=4, input_offset=0.5, seed=0)
    W1 = np.zeros((N, 4))
    W1[:, 0] = w
    b1 = np.zeros(4)
    b1[0] = 0.5 * w.sum() + 10.0  # keeps unit 0 in the linear part of the relu
    W2 = np.zeros((4, 2))
    W2[0, 1] = 1.0
    b2 = np.array([0.0, -10.0 + b])
    for k, v in dict(W1=W1, b1=b1, W2=W2, b2=b2).items():
        clf.params[k] = dc.Tensor(v)
    I = rng.uniform(0.2, 1.0, (H, H))
    I0 = np.zeros((H, H))
    order = np.argsort(-(w * (I - I0).reshape(-1)))
    A = np.empty(N)
    A[order] = sp.target_positions(N)
    return clf, I, I0, A.reshape(H, H)
