import numpy as np
import pytest

from mfaba.desk import bars_cnn, blobs_mlp
from mfaba.diffnet import Model, objective_from_logits


class QuadraticField:
    """L(x) = 0.5 x^T A x + b^T x exposed through the model gradient API.

    Exact gradients, so trapezoid sums along any path equal ΔL exactly.
    """

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.input_shape = self.b.shape

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * x @ self.A @ x + self.b @ x

    def grad(self, x):
        return self.A @ np.asarray(x, dtype=np.float64) + self.b

    def value_and_grad(self, X, kind, targets):
        X = np.atleast_2d(X)
        vals = np.array([self.value(x) for x in X])
        grads = np.array([self.grad(x) for x in X])
        return vals, grads, np.zeros((len(X), 1))


def random_quadratic(rng, dim):
    M = rng.normal(size=(dim, dim))
    return QuadraticField(M + M.T, rng.normal(size=dim))


def linear_model(w, bias=None):
    """Single-logit model f(x) = w.x (+ bias); C = 1."""
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(1) if bias is None else np.asarray([bias], dtype=np.float64)
    return Model((len(w),), ({"kind": "dense", "units": 1},), ((w.reshape(-1, 1), b),))


def identity_model(dim):
    return Model((dim,), ({"kind": "dense", "units": dim},), ((np.eye(dim), np.zeros(dim)),))


def traj_from_path(points, grad_fn, values_fn=None, objective=None):
    from mfaba.ascent import MAX_STEPS_REACHED, Trajectory

    pts = np.asarray(points, dtype=np.float64)
    grads = np.array([grad_fn(p) for p in pts])
    vals = np.array([values_fn(p) for p in pts]) if values_fn else np.zeros(len(pts))
    return Trajectory(pts, grads, vals, np.zeros(len(pts), dtype=int), MAX_STEPS_REACHED, 0, objective)


@pytest.fixture(scope="session")
def desk_mlp():
    return blobs_mlp()


@pytest.fixture(scope="session")
def desk_cnn():
    return bars_cnn()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def strip_timing(report: dict, fields) -> dict:
    """Copy of a bench report with the wall-clock fields removed."""
    import copy

    r = copy.deepcopy(report)
    for entry in r.get("methods", {}).values():
        for f in fields:
            entry.pop(f, None)
    return r


def cli_round_trip(workdir, kind, data, extra=(), methods="mfaba-smooth,vanilla"):
    """train -> attribute -> evaluate -> bench in ``workdir``; returns the
    exit codes and the raw report bytes."""
    import os

    from mfaba.cli import main

    model = os.path.join(workdir, "model.mfb")
    out = os.path.join(workdir, "out")
    base = ["--kind", kind, "--data", data, "--model", model, "--out", out, "--seed", "0", *extra]
    codes = [main(["train", *base]),
             main(["attribute", *base, "--method", "mfaba-smooth"]),
             main(["evaluate", *base, "--methods", methods]),
             main(["bench", *base, "--methods", methods, "--reps", "1", "--warmup", "0"])]
    reports = {}
    for name in ("attribution_report.json", "evaluation_report.json", "bench_report.json"):
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path, "rb") as fh:
                reports[name] = fh.read()
    return codes, reports, out, model


_CRITERIA: dict = {}


class CriterionLog:
    def __init__(self, number, title):
        self.number, self.title, self.lines = number, title, []

    def check(self, ok: bool, detail: str) -> bool:
        self.lines.append((bool(ok), detail))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.lines) and all(ok for ok, _ in self.lines)

    def line(self) -> str:
        detail = "; ".join(d for _, d in self.lines)
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number:>2} {self.title}: {detail}"


@pytest.fixture
def criterion(request):
    """Record measured values for one acceptance criterion; the summary
    prints one PASS/FAIL line per criterion at the end of the run."""
    mark = request.node.get_closest_marker("criterion")
    log = CriterionLog(*mark.args)
    _CRITERIA[log.number] = log
    yield log
    print(log.line())


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n].line())
