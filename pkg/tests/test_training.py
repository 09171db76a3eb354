import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import instance
from stshn import diffcore as dc
from stshn.datapipe import CrimeTensor
from stshn.model import Hyperparams, forward, forward_graph, init_params
from stshn.training import (AdamState, CheckpointError, ForecastData, TrainConfig, TrainingDiverged,
                            adam_step, learning_rate, load_checkpoint, loss_classification,
                            loss_regression, save_checkpoint, train, window_loss)


def loop_bce(pred, counts, params, lam):
    total = 0.0
    for p, n in zip(np.ravel(pred), np.ravel(counts)):
        p = min(max(p, 1e-7), 1 - 1e-7)
        total -= math.log(p) if n > 0 else math.log(1 - p)
    return total + loop_penalty(params, lam)


def loop_squared(pred, target, params, lam):
    return sum((a - b) ** 2 for a, b in zip(np.ravel(pred), np.ravel(target))) + loop_penalty(params, lam)


def loop_penalty(params, lam):
    return lam * sum(float(v) ** 2 for arr in params.values() for v in np.ravel(arr))


def leaves(params):
    return {k: dc.variable(v) for k, v in params.items()}


def tiny_data(T=10, window=2, seed=0, grid=(1, 2), C=2, rate=1.0):
    counts = np.random.default_rng(seed).poisson(rate, size=(grid[0] * grid[1], T, C))
    ct = CrimeTensor(counts, [f"c{k}" for k in range(C)], grid)
    hp = Hyperparams(d=4, heads=2, spatial_layers=1, temporal_layers=1, hyperedges=2, window=window)
    return ForecastData.from_tensor(ct, hp), hp


class TestLossExamples:
    def test_half_probability(self):
        loss = loss_classification(dc.constant(np.array([0.5])), np.array([1]))
        assert float(loss.value) == pytest.approx(0.693147, abs=1e-6)

    def test_confident_predictions_bounded_by_clamp(self):
        target = np.array([[3, 0], [0, 1]])
        pred = dc.constant((target > 0).astype(float))
        bound = target.size * math.log(1 / (1 - 1e-7))
        assert 0 <= float(loss_classification(pred, target).value) <= bound * (1 + 1e-9)

    def test_regression_exact_and_diff_two(self):
        assert float(loss_regression(dc.constant(np.ones(3)), np.ones(3)).value) == 0.0
        assert float(loss_regression(dc.constant(np.array([3.0])), np.array([1.0])).value) == 4.0

    def test_shape_mismatch(self):
        with pytest.raises(dc.DimensionError):
            loss_classification(dc.constant(np.zeros((2, 2))), np.zeros((2, 3)))
        with pytest.raises(dc.DimensionError):
            loss_regression(dc.constant(np.zeros(2)), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_losses_match_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 4)))
    lam = float(rng.choice([0.0, rng.uniform(0, 0.1)]))
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    prob = rng.uniform(0, 1, size=shape)
    prob[rng.random(shape) < 0.1] = 1.0  # exercise the clamp
    counts = rng.poisson(0.8, size=shape)
    got = float(loss_classification(dc.constant(prob), counts, leaves(params), lam).value)
    assert got == pytest.approx(loop_bce(prob, counts, params, lam), abs=1e-10, rel=0)
    pred, target = rng.normal(size=shape), rng.normal(size=shape)
    got = float(loss_regression(dc.constant(pred), target, leaves(params), lam).value)
    assert got == pytest.approx(loop_squared(pred, target, params, lam), abs=1e-10, rel=0)


def test_zero_lambda_is_pure_data_term():
    x, params, hp, topo, *_ = instance((1, 2), T=3, seed=4)
    pred = forward_graph(x, leaves(params), hp, topo, "classification").output
    counts = np.array([[1, 0], [0, 2]])
    loss = loss_classification(pred, counts, leaves(params), 0.0)
    assert float(loss.value) == loop_bce(pred.value, counts, params, 0.0)


@pytest.mark.parametrize("mode", ["classification", "regression"])
def test_full_model_loss_gradients(mode):
    hp = Hyperparams(d=4, heads=2, spatial_layers=2, temporal_layers=2, hyperedges=2, window=3)
    x, params, _, topo, *_ = instance((1, 2), C=2, T=3, hp=hp, seed=21)
    counts = np.array([[1, 0], [0, 3]])
    target = np.array([[0.5, -1.0], [-0.2, 1.5]])

    def f(p):
        out = forward_graph(x, p, hp, topo, mode).output
        if mode == "classification":
            return loss_classification(out, counts, p, 0.01)
        return loss_regression(out, target, p, 0.01)

    report = dc.grad_check(f, params, step=1e-5, tol=1e-4)
    assert report.passed, str(report)


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(m={"w": np.array([0.5, 0.5])}, v={"w": np.array([0.25, 0.25])}, t=3)
        adam_step(params, {"w": np.zeros(2)}, state, 0.1)
        # the bias-corrected step is nonzero only because of the stored momentum
        state0 = AdamState()
        p0 = {"w": np.array([1.0, -2.0])}
        adam_step(p0, {"w": np.zeros(2)}, state0, 0.1)
        np.testing.assert_array_equal(p0["w"], [1.0, -2.0])
        np.testing.assert_allclose(state.m["w"], 0.45)
        np.testing.assert_allclose(state.v["w"], 0.25 * 0.999)

    @pytest.mark.parametrize("g", [1e-3, 0.7, -250.0])
    def test_first_step_has_size_lr(self, g):
        params = {"w": np.array([2.0])}
        adam_step(params, {"w": np.array([g])}, AdamState(), 0.01)
        assert abs(2.0 - params["w"][0]) == pytest.approx(0.01, abs=1e-6)
        assert np.sign(2.0 - params["w"][0]) == np.sign(g)

    def test_quadratic_descends(self):
        A = np.array([[3.0, 0.5], [0.5, 1.0]])
        params = {"w": np.array([1.0, -1.5])}
        state = AdamState()
        losses = [params["w"] @ A @ params["w"]]
        for _ in range(10):
            adam_step(params, {"w": 2 * A @ params["w"]}, state, 0.05)
            losses.append(params["w"] @ A @ params["w"])
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_frozen_untouched(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        adam_step(params, {"a": np.ones(2), "b": np.ones(2)}, AdamState(), 0.1, frozen=("b",))
        assert params["b"].tolist() == [1.0, 1.0] and params["a"][0] < 1

    def test_schedule(self):
        assert learning_rate(1e-3, 0.96, 0) == 1e-3
        assert learning_rate(1e-3, 0.96, 2) == pytest.approx(1e-3 * 0.9216)


class TestTrain:
    def test_zero_epochs_returns_initial(self):
        data, hp = tiny_data()
        init = init_params(hp, data.n_regions, data.n_categories, 3)
        res = train(data, hp, TrainConfig(epochs=0, seed=3))
        assert res.best_epoch == 0 and len(res.history) == 1
        for k in init:
            np.testing.assert_array_equal(res.params[k], init[k])

    @pytest.mark.parametrize("mode", ["classification", "regression"])
    def test_same_seed_same_history(self, mode):
        data, hp = tiny_data(T=14)
        cfg = TrainConfig(mode=mode, epochs=3, seed=5, learning_rate=1e-2)
        a, b = train(data, hp, cfg), train(data, hp, cfg)
        assert repr(a.history) == repr(b.history)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_nan_aborts_naming_epoch(self):
        data, hp = tiny_data()
        params = init_params(hp, data.n_regions, data.n_categories, 0)
        params["readout"][:] = np.nan
        with pytest.raises(TrainingDiverged, match="epoch 1"):
            train(data, hp, TrainConfig(mode="regression", epochs=2), params)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(decay=1.5)
        with pytest.raises(ValueError):
            TrainConfig(mode="ranking")

    def test_unknown_frozen_parameter(self):
        data, hp = tiny_data()
        with pytest.raises(ValueError, match="nope"):
            train(data, hp, TrainConfig(epochs=1, frozen=("nope",)))

    def test_memorizes_tiny_dataset(self):
        data, hp = tiny_data(T=8, window=2, seed=1, rate=2.0)
        cfg = TrainConfig(mode="regression", epochs=500, learning_rate=1e-2, decay=1.0, seed=0)
        params = init_params(hp, data.n_regions, data.n_categories, 0)
        initial = np.mean([float(window_loss(params, data, int(t), hp, "regression", 0.0).value)
                           for t in data.windows.train])
        res = train(data, hp, cfg, params)
        losses = [h["train_loss"] for h in res.history[1:]]
        assert min(losses) < 0.1 * initial, (initial, losses[-5:])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"embed": rng.normal(size=(2, 4)) * 1e-7, "hyper.psi": rng.uniform(size=(3, 5)),
                  "scalarish": np.array([math.pi])}
        save_checkpoint(tmp_path / "m.ckpt", params, {"mode": "regression"})
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"mode": "regression"} and set(loaded) == set(params)
        for k in params:
            assert loaded[k].shape == params[k].shape
            np.testing.assert_allclose(loaded[k], params[k], atol=1e-12, rtol=0)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"a": np.ones((2, 2))})
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_text("stshn-ckpt v0\nend\n")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_wrong_value_count(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_text("stshn-ckpt v1\nparam a 2,2 1 2 3\nend\n")
        with pytest.raises(CheckpointError, match="line 2"):
            load_checkpoint(path)

    def test_trained_model_forward_identical(self, tmp_path):
        data, hp = tiny_data(T=12)
        res = train(data, hp, TrainConfig(epochs=2, learning_rate=1e-2))
        save_checkpoint(tmp_path / "m.ckpt", res.params)
        loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
        x = data.window_input(int(data.windows.test[0]))
        a = forward(x, res.params, hp, data.topo)[0]
        b = forward(x, loaded, hp, data.topo)[0]
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
