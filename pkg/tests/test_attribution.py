import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfaba.ascent import AscentConfig, regrade, run_ascent, run_ascent_batch
from mfaba.attribution import (METHODS, MethodSettings, boundary_ig, check_method, explain,
                               integrated_gradients, mfaba, mfaba_aggressive, mfaba_linear,
                               path_positions_cosine, path_positions_norm, saliency_map,
                               streaming_path_attribution, vanilla)
from mfaba.desk import bars_cnn, blobs_mlp
from mfaba.diffnet import Model, Objective, mlp
from mfaba.metrics import mean_error_rate

from conftest import linear_model, random_quadratic, traj_from_path

LOSS = Objective("loss", 0)


def quadratic_traj(rng, dim=4, n=12, q=None):
    q = q or random_quadratic(rng, dim)
    pts = np.cumsum(rng.normal(scale=0.3, size=(n + 1, dim)), axis=0)
    return q, traj_from_path(pts, q.grad, q.value, LOSS)


class TestTrapezoid:
    def test_hand_example(self):
        # g = 2 at x = 0 and 4 at x = 1
        t = traj_from_path([[0.0], [1.0]], lambda x: 2 + 2 * x, objective=LOSS)
        assert mfaba(t).scores[0] == 3.0
        assert vanilla(t).scores[0] == 2.0

    def test_quadratic_completeness(self, rng):
        for _ in range(20):
            q, t = quadratic_traj(rng)
            m = mfaba(t)
            delta = t.objective_values[-1] - t.objective_values[0]
            assert abs(m.total - delta) <= 1e-12 * max(1.0, abs(delta))
            assert m.target_total == pytest.approx(delta)

    def test_linear_objective_mfaba_equals_vanilla(self, rng):
        w = rng.normal(size=5)
        pts = rng.normal(size=(9, 5))
        t = traj_from_path(pts, lambda x: w, lambda x: w @ x, LOSS)
        np.testing.assert_allclose(mfaba(t).scores, vanilla(t).scores, rtol=1e-14, atol=1e-14)

    def test_vanilla_worse_on_curved_objective(self, rng):
        worse = 0
        for _ in range(20):
            q, t = quadratic_traj(rng)
            delta = t.objective_values[-1] - t.objective_values[0]
            worse += abs(vanilla(t).total - delta) > abs(mfaba(t).total - delta)
        assert worse == 20

    def test_sign_for_probability_objective(self, rng):
        q, t = quadratic_traj(rng)
        t.objective = Objective("softmax", 0)
        np.testing.assert_array_equal(mfaba(t).scores, -mfaba(t, sign=1.0).scores)
        assert mfaba(t).sign == -1.0

    def test_single_sample_gives_zero_map(self):
        t = traj_from_path([[1.0, 2.0]], lambda x: np.ones(2), objective=LOSS)
        assert mfaba(t).steps == 0 and np.all(mfaba(t).scores == 0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
    def test_linear_in_gradients(self, a, b, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(6, 3))
        g1, g2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        it1, it2 = iter(g1), iter(g2)
        t1 = traj_from_path(pts, lambda x: next(it1), objective=LOSS)
        t2 = traj_from_path(pts, lambda x: next(it2), objective=LOSS)
        itc = iter(a * g1 + b * g2)
        tc = traj_from_path(pts, lambda x: next(itc), objective=LOSS)
        np.testing.assert_allclose(mfaba(tc).scores, a * mfaba(t1).scores + b * mfaba(t2).scores,
                                   rtol=1e-12, atol=1e-12)


class TestAggressive:
    def test_hand_example(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]])
        grads = {0: np.array([1.0, 1.0]), 1: np.array([2.0, 3.0]), 2: np.array([4.0, 5.0])}
        t = traj_from_path(pts, lambda x: grads[int(x[0] + x[1] // 2)], objective=LOSS)
        t.objective_values = np.array([1.0, 0.9, 1.2])
        m = mfaba_aggressive(t)
        # only (x1, x2): 0.5 * (g1 + g2) * (x2 - x1) = [0, 8]
        np.testing.assert_array_equal(m.scores, [0.0, 8.0])
        assert m.objective_start == 1.0 and m.objective_end == 1.2
        assert m.meta["kept_pairs"] == 1

    def test_nothing_kept(self):
        t = traj_from_path([[0.0], [1.0]], lambda x: np.ones(1), objective=LOSS)
        t.objective_values = np.array([1.0, 0.5])
        assert np.all(mfaba_aggressive(t).scores == 0)

    def test_monotone_equals_mfaba(self, rng):
        w = np.abs(rng.normal(size=3))
        pts = np.cumsum(np.abs(rng.normal(size=(7, 3))), axis=0)
        t = traj_from_path(pts, lambda x: w + 0.1 * x, lambda x: w @ x + 0.05 * x @ x, LOSS)
        np.testing.assert_array_equal(mfaba_aggressive(t).scores, mfaba(t).scores)


class TestPositions:
    def test_norm_example(self):
        t = traj_from_path([[0.0], [2.0], [3.0], [4.0]], lambda x: np.ones(1), objective=LOSS)
        np.testing.assert_array_equal(path_positions_norm(t), [0.0, 0.5, 0.75, 1.0])

    def test_norm_orders(self):
        t = traj_from_path([[0.0, 0.0], [1.0, 1.0], [1.0, 2.0]], lambda x: np.ones(2), objective=LOSS)
        np.testing.assert_allclose(path_positions_norm(t, 1), [0.0, 2 / 3, 1.0])
        np.testing.assert_allclose(path_positions_norm(t, np.inf), [0.0, 0.5, 1.0])
        with pytest.raises(ValueError):
            path_positions_norm(t, 3)

    def test_cosine_example(self):
        t = traj_from_path([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]], lambda x: np.ones(2), objective=LOSS)
        np.testing.assert_array_equal(path_positions_cosine(t), [0.0, 0.5, 1.0])

    def test_cosine_orthogonal_displacement(self):
        t = traj_from_path([[0.0, 0.0], [0.0, 1.0], [2.0, 0.0]], lambda x: np.ones(2), objective=LOSS)
        assert path_positions_cosine(t)[1] == 0.0

    def test_degenerate(self):
        t = traj_from_path([[1.0], [1.0]], lambda x: np.ones(1), objective=LOSS)
        with pytest.raises(ValueError):
            path_positions_norm(t)
        with pytest.raises(ValueError):
            path_positions_cosine(t)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 20))
    def test_invariants(self, seed, n):
        rng = np.random.default_rng(seed)
        t = traj_from_path(rng.normal(size=(n + 1, 3)), lambda x: x, objective=LOSS)
        for pos in (path_positions_norm(t), path_positions_cosine(t)):
            assert pos[0] == 0.0 and pos[-1] == 1.0
        assert np.all(np.diff(path_positions_norm(t)) >= 0)

    def test_collinear_linear_estimators_equal_mfaba(self, rng):
        q = random_quadratic(rng, 4)
        x0, d = rng.normal(size=4), rng.normal(size=4)
        pts = x0 + np.linspace(0, 1, 11)[:, None] * d
        t = traj_from_path(pts, q.grad, q.value, LOSS)
        ref = mfaba(t).scores
        for pos in (path_positions_norm(t), path_positions_cosine(t)):
            np.testing.assert_allclose(mfaba_linear(t, pos).scores, ref, rtol=0, atol=1e-10)

    def test_position_length_mismatch(self, rng):
        _, t = quadratic_traj(rng)
        with pytest.raises(ValueError):
            mfaba_linear(t, [0.0, 1.0])


class TestIntegratedGradients:
    def test_linear_model_exact(self, rng):
        w = rng.normal(size=6)
        x = rng.normal(size=6)
        m = integrated_gradients(linear_model(w), x, np.zeros(6), 7, Objective("logit", 0))
        np.testing.assert_allclose(m.scores, w * x, rtol=1e-14, atol=1e-15)

    def test_quadratic_closed_form(self, rng):
        q = random_quadratic(rng, 5)
        x, base = rng.normal(size=5), rng.normal(size=5)
        d = x - base
        closed = d * (q.A @ (base + d / 2) + q.b)
        m = integrated_gradients(q, x, base, 2000, LOSS)
        assert np.linalg.norm(m.scores - closed) / np.linalg.norm(closed) <= 1e-4
        assert m.total == pytest.approx(q.value(x) - q.value(base), rel=1e-9)

    def test_baseline_shape_error(self):
        with pytest.raises(ValueError):
            integrated_gradients(linear_model([1.0, 2.0]), np.zeros(2), np.zeros(3), 5, Objective("logit", 0))

    def test_batch_equals_single(self, desk_cnn):
        model, _, ev = desk_cnn
        S = MethodSettings(ig_steps=20)
        maps = explain(model, ev.inputs[:4], ev.labels[:4], "ig", S)
        for k, m in enumerate(maps):
            ref = integrated_gradients(model, ev.inputs[k], np.zeros((8, 8)), 20,
                                       Objective("softmax", int(ev.labels[k])))
            np.testing.assert_allclose(m.scores, ref.scores, rtol=1e-10, atol=1e-14)

    def test_saturated_toy_completeness(self):
        toy = saturating_toy()
        m = integrated_gradients(toy, np.array([2.0]), np.zeros(1), 1000, Objective("logit", 0))
        assert m.total == pytest.approx(1.0, abs=1e-3)


def saturating_toy():
    """f(x) = 1 - ReLU(1 - x)."""
    one = np.ones(1)
    return Model((1,), ({"kind": "dense", "units": 1}, {"kind": "relu"}, {"kind": "dense", "units": 1}),
                 ((-one.reshape(1, 1), one), (), (-one.reshape(1, 1), one)))


class TestBoundaryIG:
    def test_degenerate_trajectory(self, desk_mlp):
        model, _, ev = desk_mlp
        t = run_ascent(model, ev.inputs[0], int(ev.labels[0]), AscentConfig(max_steps=1))
        t.samples[-1] = t.samples[0]
        m = boundary_ig(model, ev.inputs[0], t, 10, Objective("softmax", int(ev.labels[0])))
        np.testing.assert_array_equal(m.scores, 0.0)

    def test_linear_model(self, rng):
        w = rng.normal(size=3)
        x, xn = rng.normal(size=3), rng.normal(size=3)
        t = traj_from_path([x, xn], lambda p: w, objective=LOSS)
        m = boundary_ig(linear_model(w), x, t, 5, Objective("logit", 0))
        np.testing.assert_allclose(m.scores, (x - xn) * w, rtol=1e-14, atol=1e-15)
        assert m.method == "big-lite"

    def test_cnn_completeness(self, desk_cnn):
        model, _, ev = desk_cnn
        y = int(ev.labels[0])
        t = run_ascent(model, ev.inputs[0], y)
        obj = Objective("softmax", y)
        for steps, tol in ((200, 0.05), (500, 1e-3)):
            m = boundary_ig(model, ev.inputs[0], t, steps, obj)
            assert abs(m.total - m.target_total) <= tol * abs(m.target_total)


class TestSaliency:
    def test_linear_model(self):
        m = saliency_map(linear_model([1.0, -2.0, 0.5]), np.zeros(3), Objective("logit", 0))
        np.testing.assert_array_equal(m.scores, [1.0, 2.0, 0.5])

    def test_saturated_toy_fails_sensitivity(self):
        m = saliency_map(saturating_toy(), np.array([2.0]), Objective("logit", 0))
        assert m.scores[0] == 0.0

    def test_constant_model(self):
        m = mlp(3, (4,), 2)
        const = m.with_params([[np.zeros_like(a) for a in p] for p in m.params])
        assert np.all(saliency_map(const, np.ones(3), Objective("softmax", 0)).scores == 0)

    def test_argmax_stable_under_logit_scaling(self, desk_mlp):
        model, _, ev = desk_mlp
        W, b = model.params[-1]
        scaled = model.with_params(model.params[:-1] + ((3.0 * W, 3.0 * b),))
        for x, y in zip(ev.inputs[:20], ev.labels[:20]):
            obj = Objective("logit", int(y))
            assert np.argmax(saliency_map(model, x, obj).scores) == \
                np.argmax(saliency_map(scaled, x, obj).scores)


def twin_models(model):
    """A hidden-unit permutation of ``model`` and a copy with an identity
    dense layer inserted after the hidden activation."""
    (W1, b1), _, (W2, b2) = model.params
    perm = np.random.default_rng(0).permutation(W1.shape[1])
    permuted = model.with_params(((W1[:, perm], b1[perm]), (), (W2[perm], b2)))
    h = W1.shape[1]
    layers = list(model.layers[:2]) + [{"kind": "dense", "units": h}] + list(model.layers[2:])
    inserted = Model(model.input_shape, tuple(layers),
                     ((W1, b1), (), (np.eye(h), np.zeros(h)), (W2, b2)))
    return permuted, inserted


class TestInvariance:
    @pytest.mark.parametrize("method", ["mfaba-smooth", "mfaba-sharp", "ig"])
    def test_implementation_invariance(self, desk_mlp, method):
        model, _, ev = desk_mlp
        X, y = ev.inputs[:20], ev.labels[:20]
        ref = explain(model, X, y, method)
        for twin in twin_models(model):
            assert np.array_equal(twin.predict(X), model.predict(X))
            for a, b in zip(ref, explain(twin, X, y, method)):
                assert np.abs(a.scores - b.scores).max() <= 1e-9


class TestOrderOfAccuracy:
    """Halving the step: trapezoid error falls ~4x, left-endpoint ~2x, on smooth models."""

    @staticmethod
    def ratios(model, X, y):
        out = {}
        for lr in (0.01, 0.005):
            trajs = [regrade(model, t, Objective("softmax", t.original_label))
                     for t in run_ascent_batch(model, X, y, AscentConfig(50, lr))]
            out[lr] = (mean_error_rate([mfaba(t) for t in trajs])[0],
                       mean_error_rate([vanilla(t) for t in trajs])[0])
        return out[0.01][0] / out[0.005][0], out[0.01][1] / out[0.005][1], out

    def test_tanh_mlp(self):
        model, _, ev = blobs_mlp(activation="tanh")
        rm, rv, out = self.ratios(model, ev.inputs[:200], ev.labels[:200])
        assert out[0.01][0] <= out[0.01][1]
        assert rm >= 3.0 and rv <= 2.8

    def test_tanh_avgpool_cnn(self):
        model, _, ev = bars_cnn(activation="tanh", pooling="avg")
        rm, rv, out = self.ratios(model, ev.inputs[:200], ev.labels[:200])
        assert out[0.01][0] <= out[0.01][1]
        assert rm >= 3.0 and rv <= 2.8


class TestRegistry:
    def test_unknown_method(self):
        with pytest.raises(ValueError, match="valid methods"):
            check_method("gradcam")

    @pytest.mark.parametrize("method", METHODS)
    def test_every_method_runs(self, desk_cnn, method):
        model, _, ev = desk_cnn
        maps = explain(model, ev.inputs[:3], ev.labels[:3], method, MethodSettings(ig_steps=10))
        assert len(maps) == 3
        for m in maps:
            assert m.scores.shape == (8, 8) and np.all(np.isfinite(m.scores))

    @pytest.mark.parametrize("method,rule,left", [("mfaba-smooth", "smooth", False),
                                                   ("mfaba-sharp", "sharp", False),
                                                   ("vanilla", "smooth", True)])
    def test_streaming_matches_trajectory_path(self, desk_cnn, method, rule, left):
        model, _, ev = desk_cnn
        X, y = ev.inputs[:10], ev.labels[:10]
        S = MethodSettings()
        slow, _ = explain(model, X, y, method, S, return_trajectories=True)
        fast = streaming_path_attribution(model, X, y, S.ascent_config(method), "softmax", left, method)
        for a, b in zip(slow, fast):
            np.testing.assert_allclose(a.scores, b.scores, rtol=0, atol=1e-12)
            assert a.steps == b.steps
            assert a.objective_end == pytest.approx(b.objective_end, abs=1e-12)

    def test_streaming_with_recomputed_objective(self, desk_mlp):
        model, _, ev = desk_mlp
        X, y = ev.inputs[:5], ev.labels[:5]
        S = MethodSettings(objective="logit")
        slow, _ = explain(model, X, y, "mfaba-smooth", S, return_trajectories=True)
        for a, b in zip(slow, explain(model, X, y, "mfaba-smooth", S)):
            np.testing.assert_allclose(a.scores, b.scores, rtol=0, atol=1e-12)

    def test_sign_supports_prediction(self, desk_cnn):
        # softmax of the original class falls along the ascent, so the sum is positive
        model, _, ev = desk_cnn
        for m in explain(model, ev.inputs[:10], ev.labels[:10], "mfaba-smooth"):
            assert m.sign == -1.0
            assert m.total > 0
