"""Command-line front end: ``mfaba {make-data,train,attribute,evaluate,bench}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines, then explicit flags. Every report echoes the resolved
settings so a run can be repeated from its report alone.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from ._accel import backend
from .ascent import is_successful_attack
from .attribution import METHODS, MethodSettings, check_method, explain
from .data import DATASET_KINDS, DatasetError, load_dataset, write_csv_vectors, write_idx
from .diffnet import DatasetSplit, ModelFormatError, accuracy, build_model, load_model_file, save_model, train
from .heatmap import atomic_write, heatmap_array, pgm_bytes, write_png
from .metrics import (BenchConfig, Curve, accuracy_information_auc, curve_score, deletion_curve, error_rate,
                      fps_compare, insertion_curve, mean_error_rate, random_scores)

REPORT_VERSION = 1
TIMING_FIELDS = ("fps_single", "fps_batch", "fps_single_runs", "fps_batch_runs")
LOCAL_CHOICES = {
    "reference": "insertion/deletion/AUC reference input is a local choice (zeros or dataset mean)",
    "n_points": "curve resolution is a local choice",
    "auc": "accuracy-information AUC is a small-scale approximation of the published protocol",
    "eps": "attack-success norm bound disabled unless --eps is given",
}


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    model: str = "model.mfb"
    data: str = ""
    kind: str = "synthetic-blobs"
    labels: str = ""
    classes: int = 0
    arch: str = "auto"
    hidden: str = "16"
    filters: int = 4
    activation: str = "relu"
    epochs: int = 50
    train_lr: float = 0.1
    batch_size: int = 32
    method: str = "mfaba-smooth"
    methods: str = "mfaba-smooth,vanilla"
    rule: str = "smooth"
    lr: float = 0.01
    max_steps: int = 50
    objective: str = "softmax"
    ascent_objective: str = "loss"
    steps: int = 50
    norm_p: str = "2"
    reference: str = "zeros"
    n_points: int = 17
    thresholds: int = 11
    eps: float = float("inf")
    clamp: str = ""
    limit: int = 0
    out: str = "out"
    seed: int = 0
    reps: int = 3
    batch: int = 16
    warmup: int = 1
    png: bool = False

    def settings(self) -> MethodSettings:
        clamp = None
        if self.clamp:
            lo, hi = (float(v) for v in self.clamp.split(","))
            clamp = (lo, hi)
        p = float("inf") if str(self.norm_p) == "inf" else int(self.norm_p)
        return MethodSettings(self.rule, self.lr, self.max_steps, self.ascent_objective, self.objective,
                              self.steps, p, clamp)

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["eps"] = "inf" if d["eps"] == float("inf") else d["eps"]
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value):
    t = _FIELD_TYPES[name]
    if t == "bool":
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return str(value)


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; dashes in keys allowed."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise CliError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = _coerce(name, v)
    cfg = RunConfig(**values)
    if cfg.kind not in DATASET_KINDS:
        raise CliError(f"unknown dataset kind {cfg.kind!r}; expected one of {', '.join(DATASET_KINDS)}")
    try:
        cfg.settings()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return cfg


# -------------------------------------------------------------------- helpers


def _dataset(cfg: RunConfig, num_classes=None) -> DatasetSplit:
    data = load_dataset(cfg.data, cfg.kind, num_classes=num_classes or (cfg.classes or None),
                        seed=cfg.seed, labels_path=cfg.labels or None)
    if cfg.limit and cfg.limit > 0:
        data = data.subset(slice(0, cfg.limit))
    if len(data) == 0:
        raise CliError("dataset is empty")
    return data


def _load_model(cfg: RunConfig):
    if not os.path.exists(cfg.model):
        raise CliError(f"model file not found: {cfg.model}")
    return load_model_file(cfg.model)


def _check_shape(model, data: DatasetSplit):
    if data.sample_shape != model.input_shape:
        raise CliError(f"input shape {data.sample_shape} does not match model input {model.input_shape}")
    if data.labels.max() >= model.num_classes:
        raise CliError(f"label {data.labels.max()} out of range for a {model.num_classes}-class model")


def _method_list(cfg: RunConfig) -> list[str]:
    names = [m.strip() for m in cfg.methods.split(",") if m.strip()]
    if not names:
        raise CliError("no methods requested")
    for m in names:
        check_method(m)
    return names


def _reference(cfg: RunConfig, data: DatasetSplit) -> np.ndarray:
    if cfg.reference == "zeros":
        return np.zeros(data.sample_shape)
    if cfg.reference == "mean":
        return data.inputs.mean(axis=0)
    raise CliError("reference must be 'zeros' or 'mean'")


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode("utf-8")


def _finite_or_none(v):
    return None if v is None or not np.isfinite(v) else float(v)


# ------------------------------------------------------------------- commands


def cmd_make_data(cfg: RunConfig) -> int:
    """Write a synthetic dataset to disk: CSV for blobs, IDX pair for images."""
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.kind in ("synthetic-blobs", "csv-vectors"):
        data = load_dataset(cfg.data, "synthetic-blobs", seed=cfg.seed)
        path = os.path.join(cfg.out, "blobs.csv")
        write_csv_vectors(path, data)
        print(f"wrote {len(data)} rows to {path}")
    else:
        data = load_dataset(cfg.data, "synthetic-images", seed=cfg.seed)
        img_path = os.path.join(cfg.out, "images.idx")
        write_idx(img_path, np.rint(data.inputs * 255).astype(np.uint8))
        write_idx(os.path.join(cfg.out, "labels.idx"), data.labels.astype(np.uint8))
        print(f"wrote {len(data)} images to {img_path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    data = _dataset(cfg)
    classes = cfg.classes or data.num_classes
    arch = cfg.arch
    if arch == "auto":
        arch = "cnn" if len(data.sample_shape) >= 2 else "mlp"
    try:
        model = build_model(arch, data.sample_shape, max(classes, 2), seed=cfg.seed, hidden=cfg.hidden,
                            filters=cfg.filters, activation=cfg.activation)
    except (ValueError, KeyError) as exc:
        raise CliError(f"invalid architecture: {exc}") from None
    model = train(model, data, cfg.epochs, cfg.train_lr, seed=cfg.seed, batch_size=cfg.batch_size)
    acc = accuracy(model, data)
    atomic_write(cfg.model, save_model(model))
    print(f"trained {arch} ({model.n_parameters} parameters) on {len(data)} samples; "
          f"final accuracy {acc:.4f}; wrote {cfg.model}")
    return 0


def cmd_attribute(cfg: RunConfig) -> int:
    check_method(cfg.method)
    model = _load_model(cfg)
    data = _dataset(cfg, model.num_classes)
    _check_shape(model, data)
    settings = cfg.settings()
    ref = _reference(cfg, data)
    maps, trajs = explain(model, data.inputs, data.labels, cfg.method, settings,
                          baseline=np.broadcast_to(ref, data.inputs.shape), return_trajectories=True)
    preds = model.predict(data.inputs)
    entries, images = [], []
    for k, (amap, y, p) in enumerate(zip(maps, data.labels, preds)):
        success = None
        if trajs is not None:
            success = is_successful_attack(trajs[k].x0, trajs[k].xn, model, int(y), cfg.eps)
        img = heatmap_array(amap.scores, data.sample_shape)
        images.append(img)
        rate = error_rate(amap)
        entries.append({
            "index": k,
            "label": int(y),
            "predicted": int(p),
            "sum_scores": amap.total,
            "objective_start": float(amap.objective_start),
            "objective_end": float(amap.objective_end),
            "sign": float(amap.sign),
            "steps": int(amap.steps),
            "termination": amap.meta.get("termination", "n/a"),
            "error_rate": _finite_or_none(rate),
            "successful_attack": success,
            "heatmap": f"heatmaps/sample_{k:04d}.pgm",
            "heatmap_shape": list(img.shape),
        })
    report = {"report": "attribute", "version": REPORT_VERSION, "method": cfg.method,
              "sample_count": len(entries), "config": cfg.echo(), "samples": entries}
    hdir = os.path.join(cfg.out, "heatmaps")
    for k, img in enumerate(images):
        atomic_write(os.path.join(hdir, f"sample_{k:04d}.pgm"), pgm_bytes(img))
        if cfg.png:
            write_png(os.path.join(hdir, f"sample_{k:04d}.png"), img)
    atomic_write(os.path.join(cfg.out, "attribution_report.json"), _dump(report))
    print(f"{cfg.method}: attributed {len(entries)} samples; report in {cfg.out}")
    return 0


def _mean_curve(curves: list[Curve]) -> Curve:
    return Curve(curves[0].fractions, np.mean([c.values for c in curves], axis=0))


def cmd_evaluate(cfg: RunConfig) -> int:
    methods = _method_list(cfg)
    model = _load_model(cfg)
    data = _dataset(cfg, model.num_classes)
    _check_shape(model, data)
    settings = cfg.settings()
    ref = _reference(cfg, data)
    results, curves_out = {}, {}
    rankers = {m: (lambda m: lambda X, y: explain(model, X, y, m, settings, baseline=np.broadcast_to(ref, X.shape)))(m)
               for m in methods}
    rng = np.random.default_rng(cfg.seed)
    rand_maps = [random_scores(data.sample_shape, rng) for _ in range(len(data))]
    rankers["random"] = lambda X, y: rand_maps[: len(X)]
    for name, fn in rankers.items():
        maps = fn(data.inputs, data.labels)
        ins = [insertion_curve(model, x, m, cfg.n_points, ref) for x, m in zip(data.inputs, maps)]
        dels = [deletion_curve(model, x, m, cfg.n_points, ref) for x, m in zip(data.inputs, maps)]
        entry = {
            "insertion_score": float(np.mean([curve_score(c) for c in ins])),
            "deletion_score": float(np.mean([curve_score(c) for c in dels])),
            "auc": accuracy_information_auc(model, data, fn, cfg.thresholds, ref),
            "sample_count": len(data),
        }
        if name != "random":
            mean, excluded = mean_error_rate(maps)
            entry["error_rate"] = _finite_or_none(mean)
            entry["error_rate_excluded"] = excluded
            entry["mean_steps"] = float(np.mean([m.steps for m in maps]))
        results[name] = entry
        curves_out[name] = (_mean_curve(ins), _mean_curve(dels))
    report = {"report": "evaluate", "version": REPORT_VERSION, "sample_count": len(data), "seed": cfg.seed,
              "methods": results, "config": cfg.echo(), "local_choices": LOCAL_CHOICES,
              "model_accuracy": accuracy(model, data)}
    for name, (ci, cd) in curves_out.items():
        atomic_write(os.path.join(cfg.out, "curves", f"{name}_insertion.csv"), ci.to_csv().encode())
        atomic_write(os.path.join(cfg.out, "curves", f"{name}_deletion.csv"), cd.to_csv().encode())
    atomic_write(os.path.join(cfg.out, "evaluation_report.json"), _dump(report))
    for name, e in results.items():
        er = e.get("error_rate")
        print(f"{name:>17}: insertion {e['insertion_score']:.4f} deletion {e['deletion_score']:.4f} "
              f"auc {e['auc']:.4f}" + (f" error_rate {er:.5f}" if er is not None else ""))
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    methods = _method_list(cfg)
    model = _load_model(cfg)
    data = _dataset(cfg, model.num_classes)
    _check_shape(model, data)
    settings = cfg.settings()
    try:
        bcfg = BenchConfig(cfg.reps, cfg.batch, cfg.warmup)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    fns = {m: (lambda X, y, m=m: explain(model, X, y, m, settings)) for m in methods}
    results = fps_compare(fns, data.inputs, data.labels, bcfg)
    for m in methods:
        r = results[m]
        r["flag"] = "averaged" if r["averaged"] else "unaveraged"
        print(f"{m:>17}: fps_single {r['fps_single']:.1f}  fps_batch {r['fps_batch']:.1f} ({r['flag']})")
    report = {"report": "bench", "version": REPORT_VERSION, "sample_count": len(data), "seed": cfg.seed,
              "backend": backend(), "methods": results, "config": cfg.echo(),
              "timing_fields": list(TIMING_FIELDS)}
    atomic_write(os.path.join(cfg.out, "bench_report.json"), _dump(report))
    return 0


COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "attribute": cmd_attribute,
            "evaluate": cmd_evaluate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfaba", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--config", help="key=value settings file")
    a("--model", help="model file (written by train, read by the others)")
    a("--data", help="dataset path, or key=value parameters for synthetic kinds")
    a("--kind", help=f"dataset kind: {', '.join(DATASET_KINDS)}")
    a("--labels", help="IDX label file (default: sibling of the image file)")
    a("--classes", type=int, help="class count (default: inferred from labels)")
    a("--arch", choices=["auto", "mlp", "cnn"])
    a("--hidden", help="MLP hidden widths, e.g. 16 or 32x16")
    a("--filters", type=int, help="CNN filter count")
    a("--activation", choices=["relu", "tanh"])
    a("--epochs", type=int)
    a("--train-lr", dest="train_lr", type=float)
    a("--batch-size", dest="batch_size", type=int, help="training minibatch size")
    a("--method", help=f"attribution method: {', '.join(METHODS)}")
    a("--methods", help="comma-separated methods for evaluate/bench")
    a("--rule", choices=["smooth", "sharp"])
    a("--lr", type=float, help="ascent learning rate (default 0.01)")
    a("--max-steps", dest="max_steps", type=int, help="ascent step cap (default 50)")
    a("--objective", choices=["loss", "softmax", "logit"], help="attribution objective")
    a("--ascent-objective", dest="ascent_objective", choices=["loss", "softmax", "logit"])
    a("--steps", type=int, help="IG discretization steps")
    a("--norm-p", dest="norm_p", choices=["1", "2", "inf"])
    a("--reference", choices=["zeros", "mean"])
    a("--n-points", dest="n_points", type=int, help="insertion/deletion curve points")
    a("--thresholds", type=int, help="accuracy-information grid size")
    a("--eps", type=float, help="attack-success norm bound")
    a("--clamp", help="clamp ascent samples to lo,hi")
    a("--limit", type=int, help="use only the first N samples")
    a("--out", help="output directory")
    a("--seed", type=int)
    a("--reps", type=int, help="benchmark repetitions")
    a("--batch", type=int, help="benchmark batch size")
    a("--warmup", type=int)
    a("--png", action="store_const", const="1", help="also write PNG heatmaps")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (CliError, DatasetError, ModelFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
