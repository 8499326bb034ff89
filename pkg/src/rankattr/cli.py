"""Command-line entry point: ``rankattr <verb> [options]``.

Verbs: gen, train-clf, train-expl, explain, eval, selftest.

Global flags (accepted before or after the verb): ``--config PATH``,
``--seed N``, ``--out DIR``, ``--threads N``.  Each may also come from the
environment as ``RANKATTR_CONFIG``, ``RANKATTR_SEED``, ``RANKATTR_OUT`` and
``RANKATTR_THREADS``; command-line values win over the environment, which
wins over the config file.

Exit codes: 0 success, 1 internal error, 2 usage, config or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import models as M
from . import pertmetrics as pm
from . import synthdata as sd

ENV_PREFIX = "RANKATTR_"
METRIC_COLUMNS = ("image_id", "ref_mode", "target_kind", "deletion", "insertion", "positive", "negative", "adp", "pic")
CURVE_COLUMNS = ("image_id", "ref_mode", "direction", "k", "score")


class UsageError(Exception):
    """Bad flags, config or missing inputs (exit code 2)."""


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


def _section_defaults():
    train = {f.name: f.default for f in fields(M.TrainConfig) if f.name != "seed"}
    refine = {f.name: f.default for f in fields(M.RefineConfig) if f.name not in ("dataset_mean", "blur_radius", "ref_modes")}
    clf = {f.name: f.default for f in fields(M.ClassifierConfig) if f.name != "seed"}
    return {
        "dataset": {
            "num_classes": 4,
            "samples_per_class": 512,
            "heldout_per_class": 64,
            "noise_std": 0.01,
            "height": 16,
            "width": 16,
        },
        "classifier": clf,
        "explainer": train,
        "refine": refine,
        "metrics": {
            "ref_modes": list(pm.REF_MODES),
            "fractions": list(pm.DEFAULT_FRACTIONS),
            "stride": 1,
            "blur_radius": 2,
        },
        "paths": {
            "dataset": "dataset.bin",
            "heldout": "heldout.bin",
            "classifier": "classifier.ckpt",
            "explainer": "explainer.ckpt",
        },
    }


def default_config() -> dict:
    cfg = {"seed": 0}
    cfg.update(_section_defaults())
    return cfg


def _check_type(where: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise UsageError(f"config key {where}: expected {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def merge_config(user: dict) -> dict:
    """Overlay a user config on the defaults; unknown keys are rejected."""
    cfg = default_config()
    if not isinstance(user, dict):
        raise UsageError("config must be a JSON object")
    for key, value in user.items():
        if key not in cfg:
            raise UsageError(f"unknown config key: {key}")
        if key == "seed":
            cfg["seed"] = _check_type("seed", 0, value)
            continue
        if not isinstance(value, dict):
            raise UsageError(f"config section {key} must be an object")
        for sub, v in value.items():
            if sub not in cfg[key]:
                raise UsageError(f"unknown config key: {key}.{sub}")
            cfg[key][sub] = _check_type(f"{key}.{sub}", cfg[key][sub], v)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    d = cfg["dataset"]
    try:
        sd.DatasetConfig(
            d["num_classes"], d["samples_per_class"], d["noise_std"], d["height"], d["width"]
        ).validate()
        if d["heldout_per_class"] < 1:
            raise ValueError("heldout_per_class must be >= 1")
        M.ClassifierConfig(**cfg["classifier"]).validate()
        M.TrainConfig(**cfg["explainer"]).validate()
        M.RefineConfig(**cfg["refine"]).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    m = cfg["metrics"]
    bad = [r for r in m["ref_modes"] if r not in pm.REF_MODES]
    if bad or not m["ref_modes"]:
        raise UsageError(f"metrics.ref_modes must be a non-empty subset of {list(pm.REF_MODES)}")
    fr = m["fractions"]
    if not fr or any(not 0 <= x <= 1 for x in fr) or sorted(fr) != fr:
        raise UsageError("metrics.fractions must be sorted values in [0, 1]")
    if m["stride"] < 1 or (d["height"] * d["width"]) % m["stride"]:
        raise UsageError("metrics.stride must be >= 1 and divide the pixel count")
    if m["blur_radius"] < 1:
        raise UsageError("metrics.blur_radius must be >= 1")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def derive_seed(base: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(base), int(stream)]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# Shared helpers
# ----------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class Context:
    def __init__(self, cfg: dict, out: Path, threads: int):
        self.cfg, self.out, self.threads = cfg, out, threads

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def path(self, key: str) -> Path:
        p = Path(self.cfg["paths"][key])
        return p if p.is_absolute() else self.out / p

    def require(self, key: str) -> Path:
        p = self.path(key)
        if not p.is_file():
            raise UsageError(f"missing input file: {p}")
        return p

    def write_manifest(self, verb: str, outputs, inputs=(), extra=None) -> Path:
        manifest = {
            "command": verb,
            "version": __version__,
            "seed": self.seed,
            "config_hash": config_hash(self.cfg),
            "git_describe": git_describe(),
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "inputs": {str(p): sha256_file(p) for p in inputs},
            "outputs": {str(p): sha256_file(p) for p in outputs},
        }
        manifest.update(extra or {})
        path = self.out / f"manifest_{verb}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _load_samples(ctx: Context, key: str):
    try:
        return sd.load_dataset(ctx.require(key), return_classes=True)
    except sd.DatasetFormatError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(ctx: Context, key: str, kind: type):
    path = ctx.require(key)
    try:
        model = M.load_checkpoint(path)
    except M.CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    if not isinstance(model, kind):
        raise UsageError(f"{path} holds a {model.kind}, expected {kind.kind}")
    return model, path


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, newline="")
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _refine_config(ctx: Context, T: int, dataset_mean: float) -> M.RefineConfig:
    r = dict(ctx.cfg["refine"])
    r["T"] = T
    return M.RefineConfig(
        **r,
        dataset_mean=dataset_mean,
        blur_radius=ctx.cfg["metrics"]["blur_radius"],
        ref_modes=tuple(ctx.cfg["metrics"]["ref_modes"]),
    )


def _select_ids(arg: str, n: int, limit: int | None = None) -> list:
    if arg == "all":
        ids = list(range(n))
    else:
        try:
            ids = [int(v) for v in arg.split(",")]
        except ValueError as exc:
            raise UsageError(f"--image-id must be 'all' or comma-separated integers, got {arg!r}") from exc
        for i in ids:
            if not 0 <= i < n:
                raise UsageError(f"image id {i} outside [0, {n})")
    return ids[:limit] if limit is not None else ids


def _targets(policy: str, clf: M.Classifier, images, labels, C: int):
    if policy == "pred":
        return clf.predict(images)
    if policy == "gt":
        return np.asarray(labels, dtype=np.intp)
    try:
        cid = int(policy)
    except ValueError as exc:
        raise UsageError(f"--target must be pred, gt or a class id, got {policy!r}") from exc
    if not 0 <= cid < C:
        raise UsageError(f"--target class id {cid} outside [0, {C})")
    return np.full(len(images), cid, dtype=np.intp)


def _pool(ctx: Context):
    return ThreadPoolExecutor(max_workers=max(1, ctx.threads))


# ----------------------------------------------------------------------------
# Verbs
# ----------------------------------------------------------------------------


def cmd_gen(ctx: Context, args) -> int:
    d = ctx.cfg["dataset"]
    outputs = []
    for key, per_class, stream in (("dataset", d["samples_per_class"], 1), ("heldout", d["heldout_per_class"], 2)):
        dcfg = sd.DatasetConfig(
            d["num_classes"], per_class, d["noise_std"], d["height"], d["width"], seed=derive_seed(ctx.seed, stream)
        )
        path = ctx.path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        sd.save_dataset(sd.generate(dcfg), path, d["num_classes"])
        outputs.append(path)
    ctx.write_manifest("gen", outputs)
    print(f"wrote {', '.join(str(p) for p in outputs)}")
    return 0


def cmd_train_clf(ctx: Context, args) -> int:
    (samples, C), src = _load_samples(ctx, "dataset"), ctx.path("dataset")
    X, y, _ = sd.stack(samples)
    if len(X) == 0:
        raise UsageError(f"dataset {src} is empty")
    cfg = M.ClassifierConfig(**ctx.cfg["classifier"], seed=derive_seed(ctx.seed, 3))
    history = []
    clf = M.train_classifier(X, y, cfg, num_classes=C, history=history)
    path = ctx.path("classifier")
    path.parent.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(clf, path)
    acc = history[-1]["train_acc"] if history else float((clf.predict(X) == y).mean())
    ctx.write_manifest("train-clf", [path], [src], {"train_accuracy": acc})
    print(f"classifier train accuracy {acc:.4f}; wrote {path}")
    return 0


def cmd_train_expl(ctx: Context, args) -> int:
    (samples, C), src = _load_samples(ctx, "dataset"), ctx.path("dataset")
    clf, clf_path = _load_model(ctx, "classifier", M.Classifier)
    X, y, _ = sd.stack(samples)
    if len(X) == 0:
        raise UsageError(f"dataset {src} is empty")
    cfg = M.TrainConfig(**ctx.cfg["explainer"], seed=derive_seed(ctx.seed, 4))
    history = []
    mean = float(np.mean(X))
    e = M.train_explainer(clf, X, cfg, labels=y, dataset_mean=mean, history=history)
    path = ctx.path("explainer")
    path.parent.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(e, path)
    last = history[-1] if history else {}
    ctx.write_manifest(
        "train-expl",
        [path],
        [src, clf_path],
        {"classifier_sha256": sha256_file(clf_path), "dataset_mean": mean, "final_loss": last.get("loss")},
    )
    print(f"explainer trained for {len(history)} steps; wrote {path}")
    return 0


def cmd_explain(ctx: Context, args) -> int:
    (samples, C), src = _load_samples(ctx, args.split), ctx.path(args.split)
    clf, clf_path = _load_model(ctx, "classifier", M.Classifier)
    e, e_path = _load_model(ctx, "explainer", M.Explainer)
    if args.T < 0:
        raise UsageError("--T must be >= 0")
    X, y, _ = sd.stack(samples)
    ids = _select_ids(args.image_id, len(X))
    targets = _targets(args.target, clf, X, y, C)
    rc = _refine_config(ctx, args.T, e.meta.get("dataset_mean", 0.5))
    heat_dir = ctx.out / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)

    def work(i):
        t = int(targets[i])
        A = M.refine(e, clf, X[i], t, rc)
        name = f"{args.split}_{i:05d}_t{t}_T{args.T}.ppm"
        sd.write_heatmap(A, heat_dir / name)
        return (i, t, args.T, f"heatmaps/{name}")

    with _pool(ctx) as pool:
        rows = list(pool.map(work, ids))
    csv_path = ctx.out / f"explain_{args.target}_T{args.T}.csv"
    _write_atomic(csv_path, _csv_text(("image_id", "target", "T", "file"), rows))
    outputs = [csv_path] + [ctx.out / r[3] for r in rows]
    ctx.write_manifest("explain", outputs, [src, clf_path, e_path])
    print(f"wrote {len(rows)} heatmaps and {csv_path}")
    return 0


def evaluate_rows(clf, e, X, targets, ids, modes, rc, metrics_cfg, identity=False, threads=1):
    """Per-image metric rows and curve rows, ordered by image id."""
    dataset_mean = rc.dataset_mean

    def work(i):
        t = int(targets[i])
        A = M.refine(e, clf, X[i], t, rc)
        out, curves = [], []
        for mode in modes:
            I0 = X[i] if identity else pm.make_reference(X[i], mode, dataset_mean, metrics_cfg["blur_radius"])
            rep = pm.evaluate(clf, A, X[i], I0, t, metrics_cfg["fractions"], metrics_cfg["stride"])
            out.append((i, mode, rep))
            for direction in ("deletion", "insertion"):
                for k, s in zip(rep.ks, rep.curves[direction]):
                    curves.append((i, mode, direction, int(k), float(s)))
        return out, curves

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, ids))
    metric_rows = [r for res in results for r in res[0]]
    curve_rows = [c for res in results for c in res[1]]
    metric_rows.sort(key=lambda r: (r[0], r[1]))
    curve_rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    return metric_rows, curve_rows


def aggregate_rows(metric_rows, modes, target_kind):
    """Means per reference mode, then the grand mean across modes."""
    agg = []
    per_mode = {}
    for mode in modes:
        reps = [r[2] for r in metric_rows if r[1] == mode]
        if not reps:
            continue
        means = [math.fsum(getattr(x, m) for x in reps) / len(reps) for m in pm.MetricReport.METRICS]
        per_mode[mode] = means
        agg.append(["mean", mode, target_kind, *means])
    if per_mode:
        grand = [math.fsum(v[j] for v in per_mode.values()) / len(per_mode) for j in range(len(pm.MetricReport.METRICS))]
        agg.append(["mean", "all", target_kind, *grand])
    return agg


def cmd_eval(ctx: Context, args) -> int:
    (samples, C), src = _load_samples(ctx, args.split), ctx.path(args.split)
    clf, clf_path = _load_model(ctx, "classifier", M.Classifier)
    e, e_path = _load_model(ctx, "explainer", M.Explainer)
    if args.T < 0:
        raise UsageError("--T must be >= 0")
    if args.target not in ("pred", "gt"):
        raise UsageError("eval --target must be pred or gt")
    X, y, _ = sd.stack(samples)
    ids = _select_ids(args.image_id, len(X), args.limit)
    targets = _targets(args.target, clf, X, y, C)
    metrics_cfg = dict(ctx.cfg["metrics"])
    if args.stride is not None:
        metrics_cfg["stride"] = args.stride
    if metrics_cfg["stride"] < 1 or X[0].size % metrics_cfg["stride"]:
        raise UsageError("--stride must be >= 1 and divide the pixel count")
    modes = ["identity"] if args.identity_reference else list(metrics_cfg["ref_modes"])
    rc = _refine_config(ctx, args.T, e.meta.get("dataset_mean", 0.5))

    metric_rows, curve_rows = evaluate_rows(
        clf, e, X, targets, ids, modes, rc, metrics_cfg, args.identity_reference, ctx.threads
    )
    rows = [[i, mode, args.target, *rep.values()] for i, mode, rep in metric_rows]
    rows += aggregate_rows(metric_rows, modes, args.target)
    metrics_path = ctx.out / "metrics.csv"
    curves_path = ctx.out / "curves.csv"
    metrics_text = _csv_text(METRIC_COLUMNS, [[_fmt(v) for v in r] for r in rows])
    curves_text = _csv_text(CURVE_COLUMNS, [[_fmt(v) for v in r] for r in curve_rows])
    _write_atomic(metrics_path, metrics_text)
    _write_atomic(curves_path, curves_text)
    ctx.write_manifest("eval", [metrics_path, curves_path], [src, clf_path, e_path], {"images": len(ids), "T": args.T})
    for r in rows:
        if r[0] == "mean" and r[1] == "all":
            print("grand mean  " + "  ".join(f"{k}={v:.4f}" for k, v in zip(METRIC_COLUMNS[3:], r[3:])))
    return 0


def cmd_selftest(ctx: Context, args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(verbose=True) else 1


# ----------------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="JSON config file")
    parser.add_argument("--seed", type=int, metavar="N", default=default, help="base random seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory (default: current)")
    parser.add_argument("--threads", type=int, metavar="N", default=default, help="worker threads for explain/eval")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankattr",
        description="Train and evaluate amortized attribution explainers on planted-feature images.",
        epilog="Environment overrides: RANKATTR_CONFIG, RANKATTR_SEED, RANKATTR_OUT, RANKATTR_THREADS.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    add("gen", cmd_gen, "generate the training and held-out datasets")
    add("train-clf", cmd_train_clf, "train the target classifier")
    add("train-expl", cmd_train_expl, "train the explainer against the frozen classifier")
    for name, fn, help_ in (
        ("explain", cmd_explain, "write heatmaps for selected images"),
        ("eval", cmd_eval, "compute metrics.csv and curves.csv"),
    ):
        p = add(name, fn, help_)
        p.add_argument("--image-id", default="all", help="'all' or comma-separated ids")
        p.add_argument("--target", default="pred", help="pred, gt" + (" or a class id" if name == "explain" else ""))
        p.add_argument("--T", type=int, default=0, help="test-time refinement steps")
        p.add_argument("--split", choices=("heldout", "dataset"), default="heldout")
        if name == "eval":
            p.add_argument("--limit", type=int, default=None, help="evaluate at most N images")
            p.add_argument("--stride", type=int, default=None, help="deletion/insertion step stride")
            p.add_argument(
                "--identity-reference",
                action="store_true",
                help="debug: use the image itself as the reference (I0 == I)",
            )
    add("selftest", cmd_selftest, "run the fast invariant suite")
    return parser


def _resolve(args) -> Context:
    env = os.environ

    def pick(name, cast=str):
        v = getattr(args, name, None)
        if v is None and (ENV_PREFIX + name.upper()) in env:
            raw = env[ENV_PREFIX + name.upper()]
            try:
                v = cast(raw)
            except ValueError as exc:
                raise UsageError(f"{ENV_PREFIX}{name.upper()}={raw!r} is not valid") from exc
        return v

    cfg_path = pick("config")
    user = {}
    if cfg_path:
        try:
            user = json.loads(Path(cfg_path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {cfg_path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {cfg_path} is not valid JSON: {exc}") from exc
    seed = pick("seed", int)
    if seed is not None:
        user = dict(user)
        user["seed"] = seed
    cfg = merge_config(user)
    threads = pick("threads", int) or 1
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    out = Path(pick("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return Context(cfg, out, threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ctx = _resolve(args)
        return args.func(ctx, args)
    except UsageError as exc:
        print(f"rankattr: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001
        print(f"rankattr: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
