"""Attribution estimators built on ascent trajectories and straight-line paths.

Sign convention: the trajectory methods multiply the path sum by ``s``,
with ``s = +1`` for a loss objective and ``s = -1`` for the probability or
logit of the original class. Either way a positive score means the feature
supports the original prediction, and the scores add up to
``s * (L(x_n) - L(x_0))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ascent import (BOUNDARY_CROSSED, MAX_STEPS_REACHED, AscentConfig, PairSet, Trajectory,
                     aggressiveness_filter, loss_direction, regrade, run_ascent_batch, step)
from .diffnet import Objective


@dataclass
class AttributionMap:
    """Per-dimension scores plus the bookkeeping needed for completeness:
    ``scores.sum()`` should approximate ``sign * (objective_end - objective_start)``."""

    scores: np.ndarray
    objective_start: float
    objective_end: float
    sign: float = 1.0
    method: str = ""
    steps: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.scores.sum())

    @property
    def target_total(self) -> float:
        return float(self.sign * (self.objective_end - self.objective_start))

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "sum_scores": self.total,
            "objective_start": float(self.objective_start),
            "objective_end": float(self.objective_end),
            "sign": float(self.sign),
            "steps": int(self.steps),
        }
        d.update(self.meta)
        return d


def _sign(traj: Trajectory, sign):
    return loss_direction(traj.objective) if sign is None else float(sign)


def _require_steps(traj: Trajectory):
    if len(traj.samples) < 1:
        raise ValueError("empty trajectory")


def _trapezoid_terms(x_start, x_end, g_start, g_end):
    return 0.5 * (g_start + g_end) * (x_end - x_start)


def _empty_map(traj, method, s):
    v0 = float(traj.objective_values[0])
    return AttributionMap(np.zeros(traj.samples.shape[1:]), v0, v0, s, method, 0)


def mfaba(traj: Trajectory, sign=None, method: str = "mfaba") -> AttributionMap:
    """Trapezoid sum of gradient times displacement along the trajectory."""
    _require_steps(traj)
    s = _sign(traj, sign)
    if traj.n_steps == 0:
        return _empty_map(traj, method, s)
    x, g = traj.samples, traj.grads
    scores = s * _trapezoid_terms(x[:-1], x[1:], g[:-1], g[1:]).sum(axis=0)
    return AttributionMap(scores, float(traj.objective_values[0]), float(traj.objective_values[-1]),
                          s, method, traj.n_steps, {"termination": traj.termination})


def vanilla(traj: Trajectory, sign=None) -> AttributionMap:
    """First-order (left endpoint) version of :func:`mfaba`."""
    _require_steps(traj)
    s = _sign(traj, sign)
    if traj.n_steps == 0:
        return _empty_map(traj, "vanilla", s)
    x, g = traj.samples, traj.grads
    scores = s * (g[:-1] * (x[1:] - x[:-1])).sum(axis=0)
    return AttributionMap(scores, float(traj.objective_values[0]), float(traj.objective_values[-1]),
                          s, "vanilla", traj.n_steps, {"termination": traj.termination})


def mfaba_aggressive(traj: Trajectory, sign=None) -> AttributionMap:
    """:func:`mfaba` restricted to the steps that strictly advance the attack.

    Endpoint values are those of the full trajectory, so the score sum is no
    longer expected to match them.
    """
    s = _sign(traj, sign)
    if traj.n_steps == 0:
        return _empty_map(traj, "mfaba-aggressive", s)
    pairs: PairSet = aggressiveness_filter(traj)
    if len(pairs) == 0:
        scores = np.zeros(traj.samples.shape[1:])
    else:
        scores = s * _trapezoid_terms(pairs.starts, pairs.ends, pairs.grad_starts,
                                      pairs.grad_ends).sum(axis=0)
    return AttributionMap(scores, pairs.objective_start, pairs.objective_end, s, "mfaba-aggressive",
                          traj.n_steps, {"termination": traj.termination, "kept_pairs": len(pairs)})


_P_ORDERS = {1: 1, 2: 2, np.inf: np.inf}


def path_positions_norm(traj: Trajectory, p=2) -> np.ndarray:
    """Cumulative path length after each sample divided by the total length."""
    if p not in _P_ORDERS:
        raise ValueError("p must be 1, 2 or inf")
    d = np.diff(traj.samples, axis=0).reshape(traj.n_steps, -1)
    lengths = np.linalg.norm(d, ord=_P_ORDERS[p], axis=1)
    total = lengths.sum()
    if traj.n_steps < 1 or not total > 0:
        raise ValueError("trajectory has zero total path length")
    t = np.concatenate([[0.0], np.cumsum(lengths) / total])
    t[-1] = 1.0
    return t


def path_positions_cosine(traj: Trajectory) -> np.ndarray:
    """Scalar projection of ``x_j - x_0`` onto the chord ``x_n - x_0``,
    normalised by the chord length. Not necessarily monotone."""
    flat = traj.samples.reshape(len(traj.samples), -1)
    rel = flat - flat[0]
    chord = rel[-1]
    c2 = float(chord @ chord)
    if not c2 > 0:
        raise ValueError("degenerate chord: x_n == x_0")
    # |r| cos<r, c> / |c| = r.c / |c|^2
    t = rel @ chord / c2
    t[0], t[-1] = 0.0, 1.0
    return t


def mfaba_linear(traj: Trajectory, positions, sign=None, method: str = "mfaba-linear") -> AttributionMap:
    """Trapezoid integral of the stored gradients over ``positions``, scaled by
    the chord: a straight-line path-integral estimate fed by ascent samples."""
    s = _sign(traj, sign)
    if traj.n_steps == 0:
        return _empty_map(traj, method, s)
    t = np.asarray(positions, dtype=np.float64)
    if t.shape != (len(traj.samples),):
        raise ValueError("need one position per trajectory sample")
    g = traj.grads
    dt = np.diff(t).reshape((-1,) + (1,) * (g.ndim - 1))
    integral = (0.5 * (g[:-1] + g[1:]) * dt).sum(axis=0)
    scores = s * (traj.samples[-1] - traj.samples[0]) * integral
    return AttributionMap(scores, float(traj.objective_values[0]), float(traj.objective_values[-1]),
                          s, method, traj.n_steps, {"termination": traj.termination})


def integrated_gradients(model, x, baseline, steps: int, objective: Objective,
                         batch_size: int = 256) -> AttributionMap:
    """Midpoint-rule integrated gradients from ``baseline`` to ``x``.

    ``model`` only needs ``value_and_grad(X, kind, targets)``.
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ValueError(f"baseline shape {baseline.shape} != input shape {x.shape}")
    if int(steps) < 1:
        raise ValueError("steps must be >= 1")
    steps = int(steps)
    delta = x - baseline
    ts = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(x)
    for lo in range(0, steps, batch_size):
        tb = ts[lo:lo + batch_size].reshape((-1,) + (1,) * x.ndim)
        _, g, _ = model.value_and_grad(baseline + tb * delta, objective.kind, objective.target)
        total += g.sum(axis=0)
    ends, _, _ = model.value_and_grad(np.stack([baseline, x]), objective.kind, objective.target)
    return AttributionMap(delta * total / steps, float(ends[0]), float(ends[1]), 1.0, "ig", steps)


def integrated_gradients_batch(model, X, baselines, steps: int, kind: str, targets) -> list[AttributionMap]:
    """Integrated gradients for many inputs, all path points in one pass."""
    X = np.asarray(X, dtype=np.float64)
    baselines = np.broadcast_to(np.asarray(baselines, dtype=np.float64), X.shape)
    B = len(X)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (B,))
    ts = (np.arange(steps) + 0.5) / steps
    delta = X - baselines
    shape = (1, steps) + (1,) * (X.ndim - 1)
    pts = baselines[:, None] + ts.reshape(shape) * delta[:, None]
    _, g, _ = model.value_and_grad(pts.reshape((-1,) + X.shape[1:]), kind, np.repeat(targets, steps))
    g = g.reshape((B, steps) + X.shape[1:]).mean(axis=1)
    vb, _, _ = model.value_and_grad(np.ascontiguousarray(baselines), kind, targets)
    vx, _, _ = model.value_and_grad(X, kind, targets)
    return [AttributionMap(delta[b] * g[b], float(vb[b]), float(vx[b]), 1.0, "ig", steps)
            for b in range(B)]


def boundary_ig(model, x, traj: Trajectory, steps: int, objective: Objective) -> AttributionMap:
    """Integrated gradients with the trajectory endpoint as baseline, so the
    map explains ``x`` against the boundary sample."""
    amap = integrated_gradients(model, x, traj.samples[-1], steps, objective)
    amap.method = "big-lite"
    amap.meta["termination"] = traj.termination
    return amap


def saliency_map(model, x, objective: Objective) -> AttributionMap:
    """Absolute input gradient."""
    v, g, _ = model.value_and_grad(np.asarray(x, dtype=np.float64)[None], objective.kind, objective.target)
    return AttributionMap(np.abs(g[0]), float(v[0]), float(v[0]), 1.0, "saliency", 0)


# ---------------------------------------------------------------- streaming


def _attribution_grads(model, X, vals, grads, labels, ascent_kind, kind):
    if kind == ascent_kind:
        return vals, grads
    if ascent_kind == "loss" and kind == "softmax":
        p = np.exp(-vals)
        return p, -p.reshape((-1,) + (1,) * (grads.ndim - 1)) * grads
    v, g, _ = model.value_and_grad(X, kind, labels)
    return v, g


def streaming_path_attribution(model, X0, labels, cfg: AscentConfig, kind: str = "softmax",
                               left_endpoint: bool = False, method: str = "mfaba") -> list[AttributionMap]:
    """Ascent and path sum in one loop without storing the trajectory.

    Gives the same maps as running :func:`run_ascent_batch`, regrading to
    ``kind`` and applying :func:`mfaba` (or :func:`vanilla` with
    ``left_endpoint=True``), up to summation order.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    kind = Objective(kind, 0).kind
    B = len(X0)
    rule = cfg.step_rule
    v, g, _ = model.value_and_grad(X0, cfg.objective, labels)
    va, ga = _attribution_grads(model, X0, v, g, labels, cfg.objective, kind)
    start = np.array(va, dtype=np.float64)
    end = start.copy()
    scores = np.zeros_like(X0)
    steps = np.zeros(B, dtype=np.int64)
    crossed = np.zeros(B, dtype=bool)
    active = np.arange(B)
    X, G, GA = X0, g, ga
    for _ in range(int(cfg.max_steps)):
        Xn = step(X, G, rule, batched=True)
        if cfg.clamp is not None:
            Xn = np.clip(Xn, cfg.clamp[0], cfg.clamp[1])
        v, gn, z = model.value_and_grad(Xn, cfg.objective, labels[active])
        van, gan = _attribution_grads(model, Xn, v, gn, labels[active], cfg.objective, kind)
        w = GA if left_endpoint else 0.5 * (GA + gan)
        scores[active] += w * (Xn - X)
        steps[active] += 1
        end[active] = van
        hit = np.argmax(z, axis=1) != labels[active]
        crossed[active[hit]] = True
        keep = ~hit
        active, X, G, GA = active[keep], Xn[keep], gn[keep], gan[keep]
        if len(active) == 0:
            break
    s = loss_direction(Objective(kind, 0))
    return [AttributionMap(s * scores[b], float(start[b]), float(end[b]), s, method, int(steps[b]),
                           {"termination": BOUNDARY_CROSSED if crossed[b] else MAX_STEPS_REACHED})
            for b in range(B)]


# ------------------------------------------------------------------ registry

METHODS = ("mfaba-smooth", "mfaba-sharp", "mfaba-aggressive", "mfaba-norm", "mfaba-cosine",
           "vanilla", "ig", "big-lite", "saliency")
TRAJECTORY_METHODS = frozenset(m for m in METHODS if m not in ("ig", "saliency"))


@dataclass(frozen=True)
class MethodSettings:
    """Everything a registry method needs besides the model and inputs."""

    rule: str = "smooth"
    learning_rate: float = 0.01
    max_steps: int = 50
    ascent_objective: str = "loss"
    objective: str = "softmax"
    ig_steps: int = 50
    norm_p: float = 2
    clamp: tuple | None = None

    def ascent_config(self, method: str) -> AscentConfig:
        rule = {"mfaba-smooth": "smooth", "mfaba-sharp": "sharp"}.get(method, self.rule)
        return AscentConfig(self.max_steps, self.learning_rate, rule, self.ascent_objective, self.clamp)


def check_method(name: str) -> str:
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")
    return name


def _from_trajectory(model, method, traj, x, settings):
    obj = Objective(settings.objective, traj.original_label)
    if method == "big-lite":
        return boundary_ig(model, x, traj, settings.ig_steps, obj)
    traj = regrade(model, traj, obj)
    if method in ("mfaba-smooth", "mfaba-sharp"):
        return mfaba(traj, method=method)
    if method == "vanilla":
        return vanilla(traj)
    if method == "mfaba-aggressive":
        return mfaba_aggressive(traj)
    if traj.n_steps == 0 or np.array_equal(traj.samples[0], traj.samples[-1]):
        return mfaba(traj, method=method)
    if method == "mfaba-norm":
        p = np.inf if settings.norm_p in (np.inf, "inf") else int(settings.norm_p)
        return mfaba_linear(traj, path_positions_norm(traj, p), method=method)
    if method == "mfaba-cosine":
        return mfaba_linear(traj, path_positions_cosine(traj), method=method)
    raise ValueError(method)


def explain(model, X, labels, method: str, settings: MethodSettings = MethodSettings(),
            baseline=None, return_trajectories: bool = False):
    """Attribution maps for a batch of inputs with one registry method.

    ``labels`` are the classes being explained (the ascent runs away from
    them). ``baseline`` is the reference for ``ig`` (zeros when omitted).
    """
    check_method(method)
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    trajs = None
    if method in ("mfaba-smooth", "mfaba-sharp", "vanilla") and not return_trajectories:
        maps = streaming_path_attribution(model, X, labels, settings.ascent_config(method),
                                          settings.objective, method == "vanilla", method)
    elif method in TRAJECTORY_METHODS:
        trajs = run_ascent_batch(model, X, labels, settings.ascent_config(method))
        maps = [_from_trajectory(model, method, t, x, settings) for t, x in zip(trajs, X)]
    elif method == "ig":
        base = np.zeros_like(X) if baseline is None else baseline
        maps = integrated_gradients_batch(model, X, base, settings.ig_steps, settings.objective, labels)
    else:
        v, g, _ = model.value_and_grad(X, settings.objective, labels)
        maps = [AttributionMap(np.abs(g[b]), float(v[b]), float(v[b]), 1.0, "saliency", 0)
                for b in range(len(X))]
    return (maps, trajs) if return_trajectories else maps
