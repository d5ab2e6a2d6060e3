"""Quantitative evaluation of attribution maps."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffnet import softmax

DELTA_FLOOR = 1e-12


@dataclass(frozen=True)
class Curve:
    fractions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if f.shape != v.shape or f.ndim != 1 or len(f) < 2:
            raise ValueError("curve needs equal-length 1-D fractions and values, at least 2 points")
        if f[0] != 0.0 or f[-1] != 1.0 or np.any(np.diff(f) <= 0):
            raise ValueError("fractions must ascend strictly from 0 to 1")
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "values", v)

    def to_csv(self) -> str:
        lines = ["fraction,value"]
        lines += [f"{f!r},{v!r}" for f, v in zip(self.fractions.tolist(), self.values.tolist())]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BenchConfig:
    repetitions: int = 3
    batch_size: int = 16
    warmup: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------- error rate


def error_rate(amap) -> float:
    """Relative deviation of the score sum from its completeness target.

    Returns ``nan`` when the endpoint objective gap is below 1e-12; callers
    exclude those samples from averages.
    """
    target = amap.target_total
    if abs(amap.objective_end - amap.objective_start) <= DELTA_FLOOR:
        return float("nan")
    return float(abs(amap.total / target - 1.0))


def mean_error_rate(maps) -> tuple[float, int]:
    """Mean over defined samples and the number of excluded ones."""
    rates = np.array([error_rate(m) for m in maps], dtype=np.float64)
    ok = np.isfinite(rates)
    mean = float(rates[ok].mean()) if ok.any() else float("nan")
    return mean, int((~ok).sum())


# ------------------------------------------------------- insertion/deletion


def position_scores(scores: np.ndarray, input_shape) -> np.ndarray:
    """Per-position importance: channels of a (C, H, W) input are summed
    into one pixel score, any other shape is scored elementwise."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(input_shape) == 3:
        return scores.sum(axis=0).ravel()
    return scores.ravel()


def ranking(scores: np.ndarray, input_shape) -> np.ndarray:
    """Positions by descending score; ties go to the lower index."""
    s = position_scores(scores, input_shape)
    return np.lexsort((np.arange(len(s)), -s))


def _reveal_masks(order: np.ndarray, fractions: np.ndarray, input_shape) -> np.ndarray:
    P = len(order)
    counts = np.rint(fractions * P).astype(np.int64)
    rank_of = np.empty(P, dtype=np.int64)
    rank_of[order] = np.arange(P)
    masks = rank_of[None, :] < counts[:, None]
    if len(input_shape) == 3:
        masks = masks.reshape((len(fractions), 1) + tuple(input_shape[1:]))
        masks = np.broadcast_to(masks, (len(fractions),) + tuple(input_shape))
    else:
        masks = masks.reshape((len(fractions),) + tuple(input_shape))
    return masks


def _scores_of(attr):
    return attr.scores if hasattr(attr, "scores") else np.asarray(attr, dtype=np.float64)


def _curve(model, x, attr, n_points, reference, insert: bool, target=None) -> Curve:
    x = np.asarray(x, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scores = _scores_of(attr)
    if reference.shape != x.shape or scores.shape != x.shape:
        raise ValueError("x, reference and attribution must share one shape")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    fractions = np.linspace(0.0, 1.0, int(n_points))
    masks = _reveal_masks(ranking(scores, x.shape), fractions, x.shape)
    if insert:
        batch = np.where(masks, x[None], reference[None])
    else:
        batch = np.where(masks, reference[None], x[None])
    z = model.logits(np.ascontiguousarray(batch))
    if target is None:
        target = int(np.argmax(model.logits(x)))
    return Curve(fractions, softmax(z)[:, target])


def insertion_curve(model, x, attr, n_points: int = 17, reference=None, target=None) -> Curve:
    """Probability of the originally predicted class as the top-ranked
    positions of ``x`` are pasted onto ``reference``."""
    ref = np.zeros_like(np.asarray(x, dtype=np.float64)) if reference is None else reference
    return _curve(model, x, attr, n_points, ref, True, target)


def deletion_curve(model, x, attr, n_points: int = 17, reference=None, target=None) -> Curve:
    """Probability of the originally predicted class as the top-ranked
    positions of ``x`` are overwritten by ``reference``."""
    ref = np.zeros_like(np.asarray(x, dtype=np.float64)) if reference is None else reference
    return _curve(model, x, attr, n_points, ref, False, target)


def curve_score(curve: Curve) -> float:
    """Trapezoid area under the curve."""
    f, v = curve.fractions, curve.values
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(f)))


def accuracy_information_auc(model, data, attr_fn, n_thresholds: int = 11, reference=None) -> float:
    """Area under accuracy versus the fraction of top-attributed positions
    revealed (rest taken from ``reference``), over a whole split.

    ``attr_fn(X, labels)`` must return one score array (or map) per sample.
    This is a small-scale stand-in for the usual saliency-metric protocol.
    """
    X, y = data.inputs, data.labels
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    shape = X.shape[1:]
    ref = np.zeros(shape) if reference is None else np.asarray(reference, dtype=np.float64)
    fractions = np.linspace(0.0, 1.0, int(n_thresholds))
    maps = attr_fn(X, y)
    acc = np.zeros(len(fractions))
    for x, label, attr in zip(X, y, maps):
        masks = _reveal_masks(ranking(_scores_of(attr), shape), fractions, shape)
        preds = model.predict(np.ascontiguousarray(np.where(masks, x[None], ref[None])))
        acc += preds == label
    return curve_score(Curve(fractions, acc / len(y)))


def random_scores(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(int(np.prod(shape))).reshape(shape).astype(np.float64)


# -------------------------------------------------------------------- timing


def fps_compare(attr_fns: dict, samples, labels, cfg: BenchConfig = BenchConfig()) -> dict:
    """Throughput of several ``attr_fn(X, labels)`` callables, measured side
    by side.

    ``fps_single`` times one image per call; ``fps_batch`` feeds chunks of
    ``cfg.batch_size``. Each is the mean over ``cfg.repetitions`` timed runs
    after ``cfg.warmup`` untimed ones. Repetitions of the different callables
    are interleaved so that slow drift of the machine hits all of them alike.
    Must not run concurrently with other benchmarks.
    """
    X = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("no samples to benchmark")

    def single(fn):
        for k in range(len(X)):
            fn(X[k:k + 1], y[k:k + 1])

    def batched(fn):
        for lo in range(0, len(X), cfg.batch_size):
            fn(X[lo:lo + cfg.batch_size], y[lo:lo + cfg.batch_size])

    out = {name: {} for name in attr_fns}
    for mode, run in (("fps_single", single), ("fps_batch", batched)):
        for fn in attr_fns.values():
            for _ in range(cfg.warmup):
                run(fn)
        rates = {name: [] for name in attr_fns}
        for _ in range(cfg.repetitions):
            for name, fn in attr_fns.items():
                t0 = time.perf_counter()
                run(fn)
                rates[name].append(len(X) / max(time.perf_counter() - t0, 1e-9))
        for name in attr_fns:
            out[name][mode] = float(np.mean(rates[name]))
            out[name][mode + "_runs"] = rates[name]
    for r in out.values():
        r["repetitions"] = cfg.repetitions
        r["averaged"] = cfg.repetitions > 1
    return out


def fps_bench(attr_fn, samples, labels, cfg: BenchConfig = BenchConfig()) -> dict:
    """:func:`fps_compare` for a single callable."""
    return fps_compare({"_": attr_fn}, samples, labels, cfg)["_"]
