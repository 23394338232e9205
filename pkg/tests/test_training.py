from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kno.model import ModelConfig, init_params
from kno.pdegen import build_dataset, burgers_problem
from kno.training import (
    NonFiniteLossError,
    OptimState,
    TrainConfig,
    adam_update,
    compute_metrics,
    evaluate,
    gradient_check,
    loss,
    model_loss_fn,
    rollout,
    train,
    window_arrays,
)


@pytest.fixture(scope="module")
def tiny_dataset():
    return build_dataset(burgers_problem(s=32, t_end=0.25), 2, 1, base_seed=3)


TINY = ModelConfig(o=4, f=4, r_train=3)


class TestLoss:
    def test_perfect(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 8, 1))
        lb, _, _ = loss(x, x, x[:, 0], x[:, 0], 0.5)
        assert lb.total == 0.0

    def test_lambda_zero(self):
        rng = np.random.default_rng(1)
        p, t = rng.standard_normal((2, 2, 3, 8, 1))
        lb, _, g_rec = loss(p, t, rng.standard_normal((2, 8, 1)), np.zeros((2, 8, 1)), 0.0)
        assert lb.total == lb.pred_loss
        assert not g_rec.any()

    def test_hand_case(self):
        lb, _, _ = loss(np.array([2.0]), np.array([0.0]), np.array([1.0]), np.array([0.0]), 0.5)
        assert (lb.pred_loss, lb.recon_loss, lb.total) == (4.0, 1.0, 4.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(2), np.zeros(2), 0.5)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        p, t = rng.standard_normal((2, 5))
        r, x = rng.standard_normal((2, 3))
        _, g_p, g_r = loss(p, t, r, x, 0.7)
        h = 1e-6
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            num = (loss(p + e, t, r, x, 0.7)[0].total - loss(p - e, t, r, x, 0.7)[0].total) / (2 * h)
            assert g_p[i] == pytest.approx(num, rel=1e-7)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            num = (loss(p, t, r + e, x, 0.7)[0].total - loss(p, t, r - e, x, 0.7)[0].total) / (2 * h)
            assert g_r[i] == pytest.approx(num, rel=1e-7)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_batch_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.standard_normal((2, 6, 2, 8, 1))
        r, x = rng.standard_normal((2, 6, 8, 1))
        perm = rng.permutation(6)
        a = loss(p, t, r, x, 0.5)[0].total
        b = loss(p[perm], t[perm], r[perm], x[perm], 0.5)[0].total
        assert a == pytest.approx(b, rel=1e-14)


class TestAdam:
    def params(self):
        return {"w": np.array([1.0, -2.0, 3.0]), "k": np.array([1 + 1j, -0.5j])}

    def test_zero_gradient(self):
        p = self.params()
        new, state = adam_update(p, {k: np.zeros_like(v) for k, v in p.items()}, OptimState.zeros(p), TrainConfig())
        assert state.step == 1
        for k in p:
            np.testing.assert_array_equal(new[k], p[k])

    def test_one_step_closed_form(self):
        # from a zero state the bias-corrected moments are g and g^2,
        # so the update is lr * g / (|g| + eps)
        cfg = TrainConfig(lr=0.01, eps_opt=1e-8)
        p = self.params()
        g = {"w": np.array([0.5, -4.0, 1e-9]), "k": np.array([2 - 3j, 0.25 + 0j])}
        new, state = adam_update(p, g, OptimState.zeros(p), cfg)
        want_w = p["w"] - 0.01 * g["w"] / (np.abs(g["w"]) + 1e-8)
        np.testing.assert_allclose(new["w"], want_w, rtol=1e-12)
        gr, gi = g["k"].real, g["k"].imag
        want_k = p["k"] - 0.01 * (gr / (np.abs(gr) + 1e-8) + 1j * gi / (np.abs(gi) + 1e-8))
        np.testing.assert_allclose(new["k"], want_k, rtol=1e-12)
        np.testing.assert_allclose(state.v["k"], 0.001 * (gr**2 + 1j * gi**2), rtol=1e-12)

    def test_two_steps_by_hand(self):
        cfg = TrainConfig(lr=0.1, beta1=0.9, beta2=0.99, eps_opt=0.0)
        p = {"w": np.array([0.0])}
        state = OptimState.zeros(p)
        p, state = adam_update(p, {"w": np.array([1.0])}, state, cfg)
        p, state = adam_update(p, {"w": np.array([3.0])}, state, cfg)
        m = 0.9 * 0.1 + 0.1 * 3.0
        v = 0.99 * 0.01 + 0.01 * 9.0
        want = -0.1 - 0.1 * (m / (1 - 0.81)) / np.sqrt(v / (1 - 0.99**2))
        assert p["w"][0] == pytest.approx(want, rel=1e-13)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_zero_lr_is_identity(self, seed):
        rng = np.random.default_rng(seed)
        p = init_params(TINY, seed)
        g = {k: rng.standard_normal(v.shape) * (1 + 1j if np.iscomplexobj(v) else 1) for k, v in p.items()}
        new, _ = adam_update(p, g, OptimState.zeros(p), TrainConfig(), lr=0.0)
        for k in p:
            np.testing.assert_array_equal(new[k], p[k])

    def test_second_moment_nonnegative(self):
        p = self.params()
        rng = np.random.default_rng(3)
        state = OptimState.zeros(p)
        for _ in range(5):
            g = {"w": rng.standard_normal(3), "k": rng.standard_normal(2) + 1j * rng.standard_normal(2)}
            p, state = adam_update(p, g, state, TrainConfig())
        assert (state.v["w"] >= 0).all()
        assert (state.v["k"].real >= 0).all() and (state.v["k"].imag >= 0).all()

    def test_shape_mismatch(self):
        p = self.params()
        with pytest.raises(ValueError):
            adam_update(p, {"w": np.zeros(2), "k": np.zeros(2, complex)}, OptimState.zeros(p), TrainConfig())

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(beta1=1.0), dict(beta2=-0.1), dict(lambda_rec=-1.0)])
    def test_config_invariants(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestWindowsArray:
    def test_shapes(self):
        x, y = window_arrays(np.zeros((3, 41, 16, 1)), 2, 10)
        assert x.shape == (3 * 30, 16, 2) and y.shape == (90, 10, 16, 1)

    def test_trajectory_major_order(self):
        snaps = np.arange(2 * 5, dtype=float).reshape(2, 5, 1, 1) * np.ones((1, 1, 4, 1))
        x, y = window_arrays(snaps, 1, 2)
        np.testing.assert_array_equal(x[:, 0, 0], [0, 1, 2, 5, 6, 7])
        np.testing.assert_array_equal(y[3, :, 0, 0], [6, 7])


class TestMetrics:
    def test_oracle_stub(self):
        t = np.random.default_rng(4).standard_normal((3, 4, 16, 1))
        m = compute_metrics(t, t)
        assert m.mse == 0 and m.rel_l2 == 0 and not m.per_step.any()

    def test_zero_stub(self):
        t = np.random.default_rng(5).standard_normal((3, 4, 16, 1))
        m = compute_metrics(np.zeros_like(t), t)
        assert m.rel_l2 == pytest.approx(1.0, rel=1e-15)
        np.testing.assert_allclose(m.per_step, 1.0, rtol=1e-15)
        assert m.mse == pytest.approx(np.mean(t**2), rel=1e-14)

    def test_per_step_mse(self):
        t = np.ones((2, 3, 4, 1))
        p = np.zeros_like(t)
        p[:, 1] = 3.0
        m = compute_metrics(p, t)
        np.testing.assert_allclose(m.per_step_mse, [1.0, 4.0, 1.0])
        np.testing.assert_allclose(m.per_step, [1.0, 2.0, 1.0])


class TestTrain:
    def test_zero_epochs(self, tiny_dataset):
        ckpt, history = train(tiny_dataset, TINY, TrainConfig(epochs=0, seed=4))
        assert len(history) == 0
        init = init_params(TINY, 4)
        assert all(np.array_equal(ckpt.params[k], init[k]) for k in init)

    def test_loss_decreases(self, tiny_dataset):
        _, history = train(tiny_dataset, TINY, TrainConfig(epochs=20, batch_size=4))
        totals = [r.train.total for r in history]
        recon = [r.train.recon_loss for r in history]
        assert totals[-1] < totals[0]
        assert np.isfinite(recon).all() and recon[-1] < recon[0]

    def test_deterministic(self, tiny_dataset):
        cfg = TrainConfig(epochs=3, batch_size=4, seed=9)
        a, ha = train(tiny_dataset, TINY, cfg)
        b, hb = train(tiny_dataset, TINY, cfg)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        assert [r.to_dict() for r in ha] == [r.to_dict() for r in hb]

    def test_seed_changes_result(self, tiny_dataset):
        a, _ = train(tiny_dataset, TINY, TrainConfig(epochs=1, seed=0))
        b, _ = train(tiny_dataset, TINY, TrainConfig(epochs=1, seed=1))
        assert not np.array_equal(a.params["encoder.weight"], b.params["encoder.weight"])

    def test_best_checkpoint_is_kept(self, tiny_dataset):
        ckpt, history = train(tiny_dataset, TINY, TrainConfig(epochs=6, batch_size=4, lr=0.05))
        best = min(r.test.mse for r in history)
        assert evaluate(ckpt, tiny_dataset.test, TINY.r_train).mse == pytest.approx(best, rel=1e-12)

    def test_lr_schedule(self, tiny_dataset):
        cfg = TrainConfig(epochs=5, lr=0.01, lr_decay_every=2, lr_decay_factor=0.1)
        _, history = train(tiny_dataset, TINY, cfg)
        np.testing.assert_allclose([r.lr for r in history], [0.01, 0.01, 1e-3, 1e-3, 1e-4])

    def test_non_finite_loss(self, tiny_dataset):
        bad = replace(tiny_dataset, snapshots=tiny_dataset.snapshots * np.inf)
        bad.mean, bad.std = tiny_dataset.mean, tiny_dataset.std
        with pytest.raises(NonFiniteLossError, match="epoch 0, batch 0"), np.errstate(invalid="ignore"):
            train(bad, TINY, TrainConfig(epochs=1))

    def test_incompatible_dataset(self, tiny_dataset):
        with pytest.raises(ValueError):
            train(tiny_dataset, ModelConfig(o=2, f=2, r_train=1, d=2), TrainConfig(epochs=1))


class TestEvaluate:
    def test_pure(self, tiny_dataset):
        ckpt, _ = train(tiny_dataset, TINY, TrainConfig(epochs=0))
        a = evaluate(ckpt, tiny_dataset.test, 4)
        b = evaluate(ckpt, tiny_dataset.test, 4)
        assert a.to_dict() == b.to_dict()

    def test_batch_partition_invariance(self, tiny_dataset):
        ckpt, _ = train(tiny_dataset, TINY, TrainConfig(epochs=0))
        a = evaluate(ckpt, tiny_dataset.snapshots, 3, batch_size=64)
        b = evaluate(ckpt, tiny_dataset.snapshots, 3, batch_size=5)
        assert a.mse == pytest.approx(b.mse, rel=1e-14)
        np.testing.assert_allclose(a.per_step, b.per_step, rtol=1e-14)

    def test_horizon_too_long(self, tiny_dataset):
        ckpt, _ = train(tiny_dataset, TINY, TrainConfig(epochs=0))
        with pytest.raises(ValueError, match="horizon too long"):
            evaluate(ckpt, tiny_dataset.test, 11)

    def test_rollout_denormalizes(self, tiny_dataset):
        ckpt, _ = train(tiny_dataset, TINY, TrainConfig(epochs=0))
        ckpt.params = {k: np.zeros_like(v) for k, v in ckpt.params.items()}
        out = rollout(ckpt, tiny_dataset.test[:, 0], 2)
        np.testing.assert_allclose(out, ckpt.mean[0], rtol=1e-15)


class TestGradientCheck:
    def test_linear_function(self):
        c = {"a": np.array([1.5, -2.0]), "b": np.array([0.25 + 2j])}

        def fn(p):
            val = float(np.sum(c["a"] * p["a"]) + np.sum(c["b"].real * p["b"].real + c["b"].imag * p["b"].imag))
            return val, {"a": c["a"].copy(), "b": c["b"].copy()}

        report = gradient_check(fn, {"a": np.zeros(2), "b": np.zeros(1, complex)})
        assert report.max_rel_error < 1e-10

    def test_fault_injection(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 16, 1))
        y = rng.standard_normal((2, 2, 16, 1))
        cfg = ModelConfig(o=4, f=3, r_train=2)
        base = model_loss_fn(x, y, cfg, 0.5)
        target = ("unit0.conv.weight", 5)

        def corrupted(p):
            val, grads = base(p)
            grads[target[0]].reshape(-1)[target[1]] *= 2
            return val, grads

        report = gradient_check(corrupted, init_params(cfg, 1))
        assert (report.worst_param, report.worst_index) == target
        assert not report.passed(1e-3)

    def test_size_guard(self):
        cfg = ModelConfig(o=32, f=16, r_train=1)
        with pytest.raises(ValueError, match="guard"):
            gradient_check(lambda p: (0.0, p), init_params(cfg))
