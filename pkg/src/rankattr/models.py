"""Toy classifier, class-conditioned explainer, training and refinement.

Both networks are two-layer perceptrons over the flattened image.  Inputs are
shifted by a fixed, non-learned offset (the background grey level) before the
first layer, which makes plain SGD-style training on [0, 1] images behave.

Checkpoint layout (little-endian)::

    magic       4 bytes  b"RKCK"
    version     uint16   1
    kind        uint16 length + ASCII ("classifier" | "explainer")
    descriptor  uint32 length + UTF-8 JSON (architecture and metadata, sorted keys)
    nparams     uint16
    per parameter:
        name    uint16 length + ASCII
        ndim    uint8
        dims    uint32[ndim]
        data    float64[prod(dims)]  row-major
    crc32       uint32   over every preceding byte
"""

from __future__ import annotations

import copy
import json
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .pertmetrics import REF_MODES, make_reference
from .softobjective import (
    GridSpec,
    LossWeights,
    admissible_grids,
    objective,
    sample_grid,
    sample_steps,
)
from .softperm import SoftSortConfig

__all__ = [
    "Classifier",
    "Explainer",
    "AdamW",
    "ClassifierConfig",
    "TrainConfig",
    "RefineConfig",
    "TrainingError",
    "CheckpointError",
    "clip_grad_norm",
    "cosine_lr",
    "tau_schedule",
    "train_classifier",
    "train_explainer",
    "explain",
    "refine",
    "refine_with_status",
    "checkpoint_bytes",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupt or describes an unknown model."""


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Model:
    kind = ""
    param_names: tuple = ()

    def __init__(self):
        self.params: dict = {}
        self.meta: dict = {}

    def parameters(self) -> list:
        return [self.params[n] for n in self.param_names]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self):
        return copy.deepcopy(self)

    def descriptor(self) -> dict:
        raise NotImplementedError

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return checkpoint_bytes(self) == checkpoint_bytes(other)

    __hash__ = None


class Classifier(_Model):
    """flatten -> dense(hidden) -> relu -> dense(C) -> softmax."""

    kind = "classifier"
    param_names = ("W1", "b1", "W2", "b2")

    def __init__(self, height=16, width=16, num_classes=4, hidden=64, input_offset=0.5, seed=0):
        super().__init__()
        self.height, self.width = int(height), int(width)
        self.num_classes, self.hidden = int(num_classes), int(hidden)
        self.input_offset = float(input_offset)
        N = self.height * self.width
        rng = np.random.default_rng(seed)
        self.params = {
            "W1": Tensor(_uniform(rng, N, (N, hidden))),
            "b1": Tensor(_uniform(rng, N, (hidden,))),
            "W2": Tensor(_uniform(rng, hidden, (hidden, num_classes))),
            "b2": Tensor(_uniform(rng, hidden, (num_classes,))),
        }

    def descriptor(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "input_offset": self.input_offset,
        }

    def _flat(self, x):
        n = self.height * self.width
        if x.shape[-1] != n and x.shape[-2:] != (self.height, self.width):
            raise dc.ShapeError(f"classifier expects {self.height}x{self.width} images, got {x.shape}")
        return (-1, n)

    def logits(self, x) -> Tensor:
        x = dc.as_tensor(x)
        p = self.params
        h = dc.reshape(x, self._flat(x))
        h = dc.relu(dc.add(dc.matmul(dc.sub(h, self.input_offset), p["W1"]), p["b1"]))
        return dc.add(dc.matmul(h, p["W2"]), p["b2"])

    def forward(self, x) -> Tensor:
        """Probabilities as a tensor, differentiable w.r.t. the input."""
        return dc.softmax(self.logits(x))

    __call__ = forward

    def predict_proba(self, x) -> np.ndarray:
        """Tape-free probabilities for a stack of images (same arithmetic as forward)."""
        x = np.asarray(x, dtype=np.float64)
        p = {k: v.data for k, v in self.params.items()}
        h = x.reshape(self._flat(x)) - self.input_offset
        h = h @ p["W1"] + p["b1"]
        h = np.where(h > 0.0, h, 0.0)
        z = h @ p["W2"] + p["b2"]
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1)


class Explainer(_Model):
    """[flatten(I), E[t]] -> dense(hidden) -> relu -> dense(H*W) -> reshape."""

    kind = "explainer"
    param_names = ("E", "W1", "b1", "W2", "b2")

    def __init__(self, height=16, width=16, num_classes=4, embed_dim=16, hidden=128, input_offset=0.5, seed=0):
        super().__init__()
        self.height, self.width = int(height), int(width)
        self.num_classes, self.embed_dim, self.hidden = int(num_classes), int(embed_dim), int(hidden)
        self.input_offset = float(input_offset)
        N = self.height * self.width
        rng = np.random.default_rng(seed)
        fan = N + embed_dim
        self.params = {
            "E": Tensor(rng.normal(0.0, 1.0, (num_classes, embed_dim))),
            "W1": Tensor(_uniform(rng, fan, (fan, hidden))),
            "b1": Tensor(_uniform(rng, fan, (hidden,))),
            "W2": Tensor(_uniform(rng, hidden, (hidden, N))),
            "b2": Tensor(_uniform(rng, hidden, (N,))),
        }

    def descriptor(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "hidden": self.hidden,
            "input_offset": self.input_offset,
        }

    def forward(self, I, t) -> Tensor:
        I = np.asarray(I.data if isinstance(I, Tensor) else I, dtype=np.float64)
        if I.shape[-2:] != (self.height, self.width):
            raise dc.ShapeError(f"explainer expects {self.height}x{self.width} images, got {I.shape}")
        t = np.atleast_1d(np.asarray(t, dtype=np.intp))
        B = I.reshape(-1, self.height * self.width).shape[0]
        if t.size == 1 and B > 1:
            t = np.repeat(t, B)
        if t.shape != (B,) or t.min() < 0 or t.max() >= self.num_classes:
            raise ValueError(f"targets must be {B} class ids in [0, {self.num_classes})")
        p = self.params
        x = I.reshape(B, -1) - self.input_offset
        h = dc.concat([x, dc.gather_rows(p["E"], t)], axis=1)
        h = dc.relu(dc.add(dc.matmul(h, p["W1"]), p["b1"]))
        out = dc.add(dc.matmul(h, p["W2"]), p["b2"])
        return dc.reshape(out, (B, self.height, self.width))

    __call__ = forward


def explain(e: Explainer, I, t) -> np.ndarray:
    """One forward pass; a single image gives an (H, W) map, a stack gives (B, H, W)."""
    I = np.asarray(I, dtype=np.float64)
    A = e.forward(I, t).data
    return A[0] if I.ndim == 2 else A


# ----------------------------------------------------------------------------
# Optimisation helpers
# ----------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay, matching the common reference formulation."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = p.data * (1.0 - lr * self.weight_decay)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            denom = np.sqrt(v) / math.sqrt(c2) + self.eps
            p.data = p.data - (lr / c1) * m / denom


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(math.fsum(float((g * g).sum()) for g in grads))
    coef = max_norm / (total + 1e-6)
    if coef < 1.0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * coef
    return total


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def tau_schedule(tau_start: float, tau_final: float, step: int, total: int) -> float:
    """Exponential interpolation from tau_start (first step) to tau_final (last step)."""
    if total <= 1:
        return tau_final
    return tau_start * (tau_final / tau_start) ** (step / (total - 1))


# ----------------------------------------------------------------------------
# Classifier training
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 64
    lr: float = 3e-3
    weight_decay: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    input_offset: float = 0.5
    seed: int = 0

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.hidden < 1:
            raise ValueError("invalid classifier config")
        return self


def train_classifier(images, labels, cfg: ClassifierConfig = ClassifierConfig(), num_classes=None, history=None):
    """Cross-entropy training with AdamW; returns a frozen classifier."""
    cfg.validate()
    X = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if X.ndim != 3 or len(X) != len(y):
        raise ValueError("images must be (n, H, W) with one label each")
    C = int(num_classes if num_classes is not None else y.max() + 1)
    if C < 2:
        raise ValueError("need at least two classes")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    clf = Classifier(X.shape[1], X.shape[2], C, cfg.hidden, cfg.input_offset, seed=seeds[0])
    clf.set_trainable(True)
    opt = AdamW(clf.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle = np.random.default_rng(seeds[1])
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(X))
        losses = []
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            onehot = np.zeros((len(idx), C))
            onehot[np.arange(len(idx)), y[idx]] = 1.0
            logp = dc.log_softmax(clf.logits(X[idx]))
            loss = dc.neg(dc.mean(dc.sum(dc.mul(logp, onehot), axis=1)))
            if not np.isfinite(loss.data):
                raise TrainingError(f"classifier loss became non-finite in epoch {epoch}")
            clf.zero_grad()
            dc.backward(loss, clf.parameters())
            opt.step()
            losses.append(float(loss.data))
        if history is not None:
            acc = float((clf.predict(X) == y).mean())
            history.append({"epoch": epoch, "loss": math.fsum(losses) / len(losses), "train_acc": acc})
    clf.set_trainable(False)
    return clf


def finetune_classifier(clf: Classifier, images, labels, cfg: ClassifierConfig, history=None) -> Classifier:
    """Continue training a copy of ``clf`` (used for the shortcut experiment)."""
    X = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    out = clf.clone()
    out.set_trainable(True)
    opt = AdamW(out.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle = np.random.default_rng(cfg.seed)
    C = out.num_classes
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            onehot = np.zeros((len(idx), C))
            onehot[np.arange(len(idx)), y[idx]] = 1.0
            loss = dc.neg(dc.mean(dc.sum(dc.mul(dc.log_softmax(out.logits(X[idx])), onehot), axis=1)))
            if not np.isfinite(loss.data):
                raise TrainingError("fine-tuning loss became non-finite")
            out.zero_grad()
            dc.backward(loss, out.parameters())
            opt.step()
        if history is not None:
            history.append({"epoch": epoch, "train_acc": float((out.predict(X) == y).mean())})
    out.set_trainable(False)
    return out


# ----------------------------------------------------------------------------
# Explainer training
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-2
    weight_decay: float = 1e-3
    grad_clip_norm: float = 1.0
    epochs: int = 1
    batch_size: int = 8
    tau_start: float = 10.0
    tau_final: float = 1.0
    g_min: int = 4
    g_max: int = 16
    S: int = 16
    lambda_del: float = 1.0
    lambda_ins: float = 1.0
    lambda_reg: float = 2.5e-3
    sinkhorn_iters: int = 30
    gumbel: bool = True
    step_jitter: bool = True
    targets: str = "pred"
    embed_dim: int = 16
    hidden: int = 128
    input_offset: float = 0.5
    blur_radius: int = 2
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not self.tau_start >= self.tau_final > 0:
            raise ValueError("need tau_start >= tau_final > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.S < 1 or self.sinkhorn_iters < 1:
            raise ValueError("batch_size, S and sinkhorn_iters must be >= 1, epochs >= 0")
        if self.g_min > self.g_max:
            raise ValueError("g_min must not exceed g_max")
        if self.targets not in ("pred", "gt"):
            raise ValueError("targets must be 'pred' or 'gt'")
        self.weights()
        return self

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_del, self.lambda_ins, self.lambda_reg)


def _param_snapshot(model: _Model) -> bytes:
    return b"".join(p.data.tobytes() for p in model.parameters())


def train_explainer(
    f: Classifier,
    images,
    cfg: TrainConfig = TrainConfig(),
    labels=None,
    dataset_mean: float = 0.5,
    history=None,
) -> Explainer:
    """Fit an explainer against a frozen classifier with the soft objective.

    Reference modes cycle black, mean, blur across batches.  ``history``
    (a list) receives one dict per optimisation step.
    """
    cfg.validate()
    X = np.asarray(images, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (f.height, f.width):
        raise ValueError("images must match the classifier input shape")
    if cfg.targets == "gt" and labels is None:
        raise ValueError("targets='gt' needs labels")
    H, W = X.shape[1:]
    if not admissible_grids(cfg.g_min, cfg.g_max, H, W):
        raise ValueError("no admissible grid size")
    frozen_before = _param_snapshot(f)
    for p in f.parameters():
        if p.requires_grad:
            raise AssertionError("classifier must be frozen before explainer training")

    s_init, s_shuffle, s_aug, s_noise = np.random.SeedSequence(cfg.seed).spawn(4)
    e = Explainer(H, W, f.num_classes, cfg.embed_dim, cfg.hidden, cfg.input_offset, seed=s_init)
    e.meta = {"dataset_mean": float(dataset_mean), "tau_final": cfg.tau_final, "blur_radius": cfg.blur_radius}
    e.set_trainable(True)
    opt = AdamW(e.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle = np.random.default_rng(s_shuffle)
    aug = np.random.default_rng(s_aug)
    noise = np.random.default_rng(s_noise)
    weights = cfg.weights()
    per_epoch = len(X) // cfg.batch_size
    total = cfg.epochs * per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = shuffle.permutation(len(X))
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = X[idx]
            t = np.asarray(labels)[idx] if cfg.targets == "gt" else f.predict(x)
            mode = REF_MODES[step % len(REF_MODES)]
            x0 = make_reference(x, mode, dataset_mean, cfg.blur_radius)
            grid = sample_grid(aug, cfg.g_min, cfg.g_max, H, W)
            ks = sample_steps(grid.K, min(cfg.S, grid.K), aug, cfg.step_jitter)
            tau = tau_schedule(cfg.tau_start, cfg.tau_final, step, total)
            soft = SoftSortConfig(tau, cfg.sinkhorn_iters, cfg.gumbel)
            A = e.forward(x, t)
            loss, parts = objective(f, A, x, [x0], t, grid, ks, soft, weights, noise)
            if not np.isfinite(loss.data):
                raise TrainingError(f"explainer loss became non-finite at step {step}")
            e.zero_grad()
            dc.backward(loss, e.parameters())
            if any(p.grad is not None for p in f.parameters()):
                raise AssertionError("classifier parameters received gradients")
            gnorm = clip_grad_norm(e.parameters(), cfg.grad_clip_norm)
            opt.step(cosine_lr(cfg.lr, step, total))
            if history is not None:
                history.append(
                    dict(step=step, loss=float(loss.data), tau=tau, G=grid.G, ref=mode, grad_norm=gnorm, **parts)
                )
            step += 1
    e.set_trainable(False)
    if _param_snapshot(f) != frozen_before:
        raise AssertionError("classifier parameters changed during explainer training")
    return e


# ----------------------------------------------------------------------------
# Test-time refinement
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RefineConfig:
    T: int = 0
    lr: float = 1e-2
    tau: float = 1.0
    weight_decay: float = 1e-3
    grad_clip_norm: float = 1.0
    sinkhorn_iters: int = 30
    g_max: int = 16
    lambda_del: float = 1.0
    lambda_ins: float = 1.0
    lambda_reg: float = 2.5e-3
    ref_modes: tuple = REF_MODES
    dataset_mean: float = 0.5
    blur_radius: int = 2
    freeze_first_layer: bool = False

    def validate(self):
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.lr <= 0 or self.tau <= 0:
            raise ValueError("lr and tau must be positive")
        if not self.ref_modes:
            raise ValueError("need at least one reference mode")
        LossWeights(self.lambda_del, self.lambda_ins, self.lambda_reg)
        return self


def refinement_setup(rc: RefineConfig, H: int, W: int, I):
    """Deterministic grid, full step list, soft-sort config and references used by refine."""
    sizes = admissible_grids(1, rc.g_max, H, W)
    grid = GridSpec(sizes[-1])
    ks = np.arange(1, grid.K + 1)
    soft = SoftSortConfig(rc.tau, rc.sinkhorn_iters, gumbel_enabled=False)
    refs = [make_reference(I, m, rc.dataset_mean, rc.blur_radius) for m in rc.ref_modes]
    return grid, ks, soft, refs


def refinement_objective(e: Explainer, f: Classifier, I, t, rc: RefineConfig):
    """The deterministic loss refine minimises, evaluated at the current parameters."""
    I = np.asarray(I, dtype=np.float64)
    grid, ks, soft, refs = refinement_setup(rc, I.shape[-2], I.shape[-1], I)
    w = LossWeights(rc.lambda_del, rc.lambda_ins, rc.lambda_reg)
    A = e.forward(I, t)
    loss, _ = objective(f, A, I[None], [r[None] for r in refs], [t], grid, ks, soft, w)
    return float(loss.data)


def refine_with_status(e: Explainer, f: Classifier, I, t: int, rc: RefineConfig):
    """Like :func:`refine` but also returns ``ok`` (False if a NaN stopped the loop early)."""
    rc.validate()
    I = np.asarray(I, dtype=np.float64)
    if I.ndim != 2:
        raise ValueError("refine works on a single (H, W) image")
    if rc.T == 0:
        return explain(e, I, t), True
    frozen_before = _param_snapshot(f)
    work = e.clone()
    trainable = ("W2", "b2") if rc.freeze_first_layer else work.param_names
    for name, p in work.params.items():
        p.requires_grad = name in trainable
        p.grad = None
    active = [work.params[n] for n in trainable]
    opt = AdamW(active, lr=rc.lr, weight_decay=rc.weight_decay)
    grid, ks, soft, refs = refinement_setup(rc, I.shape[0], I.shape[1], I)
    w = LossWeights(rc.lambda_del, rc.lambda_ins, rc.lambda_reg)
    refs = [r[None] for r in refs]
    ok = True
    for _ in range(rc.T):
        backup = [p.data.copy() for p in active]
        try:
            A = work.forward(I[None], [t])
            loss, _ = objective(f, A, I[None], refs, [t], grid, ks, soft, w)
            work.zero_grad()
            dc.backward(loss, active)
            clip_grad_norm(active, rc.grad_clip_norm)
            opt.step()
            if not all(np.isfinite(p.data).all() for p in active):
                raise dc.NumericError("non-finite parameters")
        except (dc.NumericError, dc.DomainError):
            for p, d in zip(active, backup):
                p.data = d
            warnings.warn("refinement hit a non-finite value; returning the last finite iterate")
            ok = False
            break
    work.set_trainable(False)
    if _param_snapshot(f) != frozen_before:
        raise AssertionError("classifier parameters changed during refinement")
    return explain(work, I, t), ok


def refine(e: Explainer, f: Classifier, I, t: int, rc: RefineConfig) -> np.ndarray:
    """Fine-tune a copy of ``e`` on one image for ``rc.T`` steps and explain with it."""
    return refine_with_status(e, f, I, t, rc)[0]


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

_CK_MAGIC = b"RKCK"
_CK_VERSION = 1


def _pack_str(s: str, fmt: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def checkpoint_bytes(model: _Model) -> bytes:
    desc = dict(model.descriptor())
    desc["meta"] = model.meta
    parts = [
        _CK_MAGIC,
        struct.pack("<H", _CK_VERSION),
        _pack_str(model.kind),
        _pack_str(json.dumps(desc, sort_keys=True), "<I"),
        struct.pack("<H", len(model.param_names)),
    ]
    for name in model.param_names:
        arr = model.params[name].data
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: _Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str = "<H") -> str:
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")


def load_checkpoint(path):
    """Rebuild a :class:`Classifier` or :class:`Explainer` saved by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != _CK_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch (file truncated or corrupt)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != _CK_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    kind = r.string()
    desc = json.loads(r.string("<I"))
    meta = desc.pop("meta", {})
    cls = {"classifier": Classifier, "explainer": Explainer}.get(kind)
    if cls is None:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    model = cls(**desc)
    model.meta = meta
    (count,) = r.unpack("<H")
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: parameter {name} does not match the architecture")
        model.params[name] = Tensor(data)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes")
    return model
