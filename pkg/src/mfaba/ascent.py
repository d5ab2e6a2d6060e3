"""Gradient-ascent trajectories that push a sample across the decision boundary."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffnet import Objective

BOUNDARY_CROSSED = "boundary-crossed"
MAX_STEPS_REACHED = "max-steps-reached"
STEP_RULES = ("smooth", "sharp")


@dataclass(frozen=True)
class StepRule:
    kind: str = "smooth"
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.kind not in STEP_RULES:
            raise ValueError(f"unknown step rule {self.kind!r}; expected one of {STEP_RULES}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be > 0")


@dataclass(frozen=True)
class AscentConfig:
    max_steps: int = 50
    learning_rate: float = 0.01
    rule: str = "smooth"
    objective: str = "loss"
    clamp: tuple | None = None

    def __post_init__(self):
        if int(self.max_steps) < 1:
            raise ValueError("max_steps must be >= 1")
        object.__setattr__(self, "objective", Objective(self.objective, 0).kind)
        StepRule(self.rule, self.learning_rate)  # validates

    @property
    def step_rule(self) -> StepRule:
        return StepRule(self.rule, self.learning_rate)


def step(x, grad, rule: StepRule, batched: bool = False) -> np.ndarray:
    """One ascent move. Smooth: ``x + a*sign(g)``; sharp: ``x + a*g/||g||_2``.

    With ``batched=True`` the leading axis indexes samples and the sharp
    norm is taken per sample. A zero gradient leaves ``x`` unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise ValueError(f"x shape {x.shape} != grad shape {grad.shape}")
    a = rule.learning_rate
    if rule.kind == "smooth":
        return x + a * np.sign(grad)
    # divide by max|g| first so the squared norm neither under- nor overflows
    flat = grad.reshape(len(grad), -1) if batched else grad.reshape(1, -1)
    peak = np.abs(flat).max(axis=1, keepdims=True) if flat.size else np.zeros((len(flat), 1))
    unit = np.divide(flat, peak, out=np.zeros_like(flat), where=peak > 0)
    norms = np.linalg.norm(unit, axis=1, keepdims=True)
    d = np.divide(a * unit, norms, out=np.zeros_like(unit), where=norms > 0)
    return x + d.reshape(grad.shape)


@dataclass
class Trajectory:
    """Samples ``x_0..x_n`` with the objective value, gradient and predicted
    label recorded at every sample. ``objective`` names the function the
    stored gradients and values belong to."""

    samples: np.ndarray
    grads: np.ndarray
    objective_values: np.ndarray
    predicted_labels: np.ndarray
    termination: str
    original_label: int
    objective: Objective | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.grads = np.asarray(self.grads, dtype=np.float64)
        self.objective_values = np.asarray(self.objective_values, dtype=np.float64)
        self.predicted_labels = np.asarray(self.predicted_labels, dtype=np.int64)
        if not (len(self.samples) == len(self.grads) == len(self.objective_values)):
            raise ValueError("samples, grads and objective_values must have equal length")
        if self.samples.shape != self.grads.shape:
            raise ValueError("gradient shapes must match sample shapes")

    @property
    def n_steps(self) -> int:
        return len(self.samples) - 1

    @property
    def x0(self) -> np.ndarray:
        return self.samples[0]

    @property
    def xn(self) -> np.ndarray:
        return self.samples[-1]

    @property
    def crossed(self) -> bool:
        return self.termination == BOUNDARY_CROSSED

    def to_dict(self, include_arrays: bool = False) -> dict:
        d = {
            "steps": self.n_steps,
            "termination": self.termination,
            "original_label": int(self.original_label),
            "objective": None if self.objective is None else
            {"kind": self.objective.kind, "target": self.objective.target},
            "objective_values": [float(v) for v in self.objective_values],
            "predicted_labels": [int(v) for v in self.predicted_labels],
        }
        if include_arrays:
            d["samples"] = self.samples.tolist()
            d["grads"] = self.grads.tolist()
        return d


def run_ascent_batch(model, X0, labels, cfg: AscentConfig = AscentConfig()) -> list[Trajectory]:
    """Run independent ascents for a batch of samples.

    Each sample keeps stepping until its predicted label differs from its
    label in ``labels`` or ``cfg.max_steps`` moves were made. The gradient at
    each new sample comes from the same pass that decides the label, so a
    run of n steps costs n + 1 forward/backward passes.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B = len(X0)
    if len(labels) != B:
        raise ValueError("need one label per sample")
    rule = cfg.step_rule
    vals, grads, logits = model.value_and_grad(X0, cfg.objective, labels)
    preds = np.argmax(logits, axis=1)
    hist_x = [[X0[b].copy()] for b in range(B)]
    hist_g = [[grads[b]] for b in range(B)]
    hist_v = [[vals[b]] for b in range(B)]
    hist_p = [[preds[b]] for b in range(B)]
    term = [MAX_STEPS_REACHED] * B

    active = np.arange(B)
    X, G = X0.copy(), grads
    for _ in range(int(cfg.max_steps)):
        Xa = step(X, G, rule, batched=True)
        if cfg.clamp is not None:
            Xa = np.clip(Xa, cfg.clamp[0], cfg.clamp[1])
        v, g, z = model.value_and_grad(Xa, cfg.objective, labels[active])
        p = np.argmax(z, axis=1)
        for k, b in enumerate(active):
            hist_x[b].append(Xa[k])
            hist_g[b].append(g[k])
            hist_v[b].append(v[k])
            hist_p[b].append(p[k])
        crossed = p != labels[active]
        for b in active[crossed]:
            term[b] = BOUNDARY_CROSSED
        keep = ~crossed
        active, X, G = active[keep], Xa[keep], g[keep]
        if len(active) == 0:
            break

    return [
        Trajectory(np.stack(hist_x[b]), np.stack(hist_g[b]), np.array(hist_v[b]),
                   np.array(hist_p[b]), term[b], int(labels[b]),
                   Objective(cfg.objective, int(labels[b])),
                   {"x0_misclassified": bool(hist_p[b][0] != labels[b]),
                    "learning_rate": cfg.learning_rate, "rule": cfg.rule})
        for b in range(B)
    ]


def run_ascent(model, x0, y: int, cfg: AscentConfig = AscentConfig()) -> Trajectory:
    """Ascend the objective from ``x0`` until the label leaves ``y``."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != tuple(model.input_shape):
        raise ValueError(f"input shape {x0.shape} does not match model input {model.input_shape}")
    return run_ascent_batch(model, x0[None], [y], cfg)[0]


def regrade(model, traj: Trajectory, objective: Objective) -> Trajectory:
    """Re-evaluate values and gradients along the stored samples for another
    objective. No extra passes are needed when going from the cross-entropy
    of class t to the softmax probability of t, since dp/dx = -p * dL/dx."""
    if traj.objective == objective:
        return traj
    if traj.objective is not None and traj.objective.kind == "loss" \
            and objective.kind == "softmax" and traj.objective.target == objective.target:
        p = np.exp(-traj.objective_values)
        shape = (-1,) + (1,) * (traj.grads.ndim - 1)
        grads = -p.reshape(shape) * traj.grads
        vals = p
    else:
        vals, grads, _ = model.value_and_grad(traj.samples, objective.kind, objective.target)
    return Trajectory(traj.samples, grads, vals, traj.predicted_labels, traj.termination,
                      traj.original_label, objective, dict(traj.meta))


def loss_direction(objective: Objective | None) -> float:
    """+1 when larger values mean a stronger attack (loss), -1 for values
    that fall as the attack succeeds (probability or logit of the class)."""
    return 1.0 if objective is None or objective.kind == "loss" else -1.0


@dataclass
class PairSet:
    """Consecutive pairs ``(x_j, x_{j+1})`` kept by the aggressiveness filter."""

    index: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    grad_starts: np.ndarray
    grad_ends: np.ndarray
    value_starts: np.ndarray
    value_ends: np.ndarray
    objective_start: float
    objective_end: float
    objective: Objective | None = None

    def __len__(self):
        return len(self.index)


def aggressiveness_filter(traj: Trajectory) -> PairSet:
    """Keep the steps along which the attack objective strictly rises.

    For loss objectives that is ``L(x_{j+1}) > L(x_j)``; for class
    probability or logit trajectories the sign flips, since those fall as the
    attack gains ground.
    """
    if len(traj.samples) < 2:
        raise ValueError("trajectory needs at least two samples")
    v = traj.objective_values
    d = loss_direction(traj.objective)
    keep = np.flatnonzero(d * v[1:] > d * v[:-1])
    return PairSet(keep, traj.samples[keep], traj.samples[keep + 1], traj.grads[keep],
                   traj.grads[keep + 1], v[keep], v[keep + 1], float(v[0]), float(v[-1]),
                   traj.objective)


NORM_ORDERS = {1: 1, 2: 2, "1": 1, "2": 2, "inf": np.inf, np.inf: np.inf}


def is_successful_attack(x0, xn, model, label: int, eps: float = np.inf, p=2) -> bool:
    """``m(x0) == C``, ``m(xn) != C`` and ``||x0 - xn||_p < eps``."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if p not in NORM_ORDERS:
        raise ValueError(f"unsupported norm order {p!r}; supported: 1, 2, inf")
    diff = (np.asarray(x0, dtype=np.float64) - np.asarray(xn, dtype=np.float64)).ravel()
    dist = np.linalg.norm(diff, ord=NORM_ORDERS[p])
    return bool(model.predict(x0) == label and model.predict(xn) != label and dist < eps)
