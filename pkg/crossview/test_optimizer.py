"""
Tests for AdamW, the cosine schedule and (adaptive) sharpness-aware steps.
"""

import math

import numpy as np
import pytest

from crossview.errors import NonFiniteError
from crossview.optimizer import (
    AdamWState,
    AsamConfig,
    AsamOptimizer,
    CosineSchedule,
    adamw_step,
    asam_perturb,
    asam_step,
    cosine_lr,
    sam_perturb,
    sharpness_estimate,
)
from crossview.tensor import Tensor, parameter


class Toy:
    """Two parameter tensors and a quadratic bowl"""

    def __init__(self, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.params = {
            "w": parameter(rng.standard_normal((3, 2)), dtype=dtype),
            "b": parameter(rng.standard_normal(4), dtype=dtype),
        }

    def parameters(self):
        return dict(self.params)

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.params.items()}


def bowl(model, target):
    w, b = model.params["w"], model.params["b"]
    dw = w - target["w"]
    db = b - target["b"]
    return (dw * dw).sum() + (db * db).sum() * 3.0


def flat(model, _batch):
    return (model.params["w"] * 0.0).sum() + 1.0


@pytest.fixture
def target():
    rng = np.random.default_rng(99)
    return {"w": Tensor(rng.standard_normal((3, 2))), "b": Tensor(rng.standard_normal(4))}


# =============================================================================
# Perturbations
# =============================================================================

class TestPerturbation:

    def test_scaled_radius_is_rho(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            params = {"a": rng.standard_normal((4, 3)), "b": rng.standard_normal(5) * 10}
            grads = {"a": rng.standard_normal((4, 3)), "b": rng.standard_normal(5)}
            cfg = AsamConfig(rho=float(rng.uniform(0.1, 3.0)), eta=float(rng.uniform(0.0, 0.1)))
            eps = asam_perturb(params, grads, cfg)
            scaled = np.concatenate([(eps[k] / (np.abs(params[k]) + cfg.eta)).ravel() for k in params])
            assert np.linalg.norm(scaled) == pytest.approx(cfg.rho, rel=1e-9)

    def test_unit_weights_reduce_to_sam(self):
        rng = np.random.default_rng(1)
        params = {"a": np.sign(rng.standard_normal(6)), "b": -np.ones((2, 2))}
        grads = {"a": rng.standard_normal(6), "b": rng.standard_normal((2, 2))}
        adaptive = asam_perturb(params, grads, AsamConfig(rho=0.7, eta=0.0))
        plain = sam_perturb(grads, 0.7)
        for k in params:
            np.testing.assert_allclose(adaptive[k], plain[k], rtol=1e-12)

    def test_sam_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        eps = sam_perturb(grads, 2.0)
        np.testing.assert_allclose(eps["a"], [1.2, 0.0])
        np.testing.assert_allclose(eps["b"], [[1.6]])

    def test_zero_gradient_has_no_direction(self):
        with pytest.raises(ValueError):
            asam_perturb({"a": np.ones(2)}, {"a": np.zeros(2)}, AsamConfig())
        with pytest.raises(ValueError):
            sam_perturb({"a": np.zeros(2)}, 1.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AsamConfig(rho=0.0)
        with pytest.raises(ValueError):
            AsamConfig(eta=-0.1)


# =============================================================================
# Schedules and AdamW
# =============================================================================

class TestSchedule:

    def test_endpoints_and_midpoint(self):
        sched = CosineSchedule(total_steps=10, lr0=1e-3, lr_min=1e-5)
        assert cosine_lr(0, sched) == pytest.approx(1e-3)
        assert cosine_lr(10, sched) == pytest.approx(1e-5)
        assert cosine_lr(5, sched) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_monotone_decay(self):
        sched = CosineSchedule(total_steps=50, lr0=1e-4)
        lrs = [cosine_lr(t, sched) for t in range(51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, CosineSchedule(total_steps=10))
        with pytest.raises(ValueError):
            CosineSchedule(total_steps=0)


class TestAdamW:

    def test_first_step_moves_by_lr(self, target):
        model = Toy()
        before = model.snapshot()
        adamw_step(model, target, bowl, AdamWState(lr0=0.01, weight_decay=0.0), lr=0.01)
        grad_sign = np.sign(before["w"] - target["w"].data)
        np.testing.assert_allclose(model.params["w"].data, before["w"] - 0.01 * grad_sign, atol=1e-6)

    def test_decay_is_decoupled(self):
        model = Toy()
        before = model.snapshot()
        adamw_step(model, None, flat, AdamWState(weight_decay=0.03), lr=0.1)
        for k in before:
            np.testing.assert_allclose(model.params[k].data, before[k] * (1.0 - 0.1 * 0.03), rtol=1e-6)

    def test_two_step_scalar_trace(self):
        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        p = parameter([1.0], dtype=np.float64)
        state = AdamWState(weight_decay=wd)
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate((0.5, -0.2), start=1):
            state.step({"w": p}, {"w": np.array([g])}, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w * (1 - lr * wd)
            w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert p.data[0] == pytest.approx(w, abs=1e-7)
        # first step moves by lr after decay; the second still carries the first gradient
        first = 0.999 - 0.1 * 0.5 / (0.5 + eps)
        assert p.data[0] == pytest.approx(first * 0.999 - 0.1 * (0.025 / 0.19) /
                                          (math.sqrt(0.00028975 / 0.001999) + eps), abs=1e-7)

    def test_state_round_trip(self, target):
        model = Toy()
        state = AdamWState()
        for _ in range(3):
            adamw_step(model, target, bowl, state, lr=1e-3)
        restored = AdamWState()
        restored.load_arrays(state.state_arrays())
        assert restored.t == 3
        for k in state.m:
            np.testing.assert_array_equal(restored.m[k], state.m[k])
            np.testing.assert_array_equal(restored.v[k], state.v[k])

    def test_descends_the_bowl(self, target):
        model = Toy()
        state = AdamWState(weight_decay=0.0)
        first = bowl(model, target).item()
        sched = CosineSchedule(total_steps=200, lr0=0.05)
        for t in range(200):
            adamw_step(model, target, bowl, state, lr=cosine_lr(t, sched))
        assert bowl(model, target).item() < 0.01 * first


# =============================================================================
# Two-pass steps
# =============================================================================

class TestAsamStep:

    def test_two_passes_per_step(self, target):
        model = Toy()
        opt = AsamOptimizer(AdamWState(), AsamConfig(rho=0.5))
        for _ in range(3):
            opt.step(model, target, bowl, lr=1e-3)
        assert opt.passes == 6

    def test_single_pass_when_disabled(self, target):
        model = Toy()
        opt = AsamOptimizer(AdamWState(), enabled=False)
        for _ in range(3):
            opt.step(model, target, bowl, lr=1e-3)
        assert opt.passes == 3

    def test_vanishing_rho_matches_adamw(self, target):
        a, b = Toy(seed=4), Toy(seed=4)
        state_a, state_b = AdamWState(), AdamWState()
        for _ in range(3):
            asam_step(a, target, bowl, AsamConfig(rho=1e-300), state_a, lr=1e-2)
            adamw_step(b, target, bowl, state_b, lr=1e-2)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_update_uses_perturbed_gradient(self, target):
        model = Toy(dtype=np.float64)
        w0 = model.snapshot()
        cfg = AsamConfig(rho=0.3, eta=0.01)
        asam_step(model, target, bowl, cfg, AdamWState(weight_decay=0.0), lr=0.01)

        grads = {"w": 2.0 * (w0["w"] - target["w"].data), "b": 6.0 * (w0["b"] - target["b"].data)}
        eps = asam_perturb(w0, grads, cfg)
        perturbed = {"w": 2.0 * (w0["w"] + eps["w"] - target["w"].data),
                     "b": 6.0 * (w0["b"] + eps["b"] - target["b"].data)}
        reference = {k: parameter(v.copy(), dtype=np.float64) for k, v in w0.items()}
        AdamWState(weight_decay=0.0).step(reference, perturbed, lr=0.01)
        for k in w0:
            np.testing.assert_allclose(model.params[k].data, reference[k].data, rtol=1e-6, atol=1e-9)

    def test_weights_restored_before_update(self, target):
        model = Toy()
        before = model.snapshot()
        asam_step(model, target, bowl, AsamConfig(rho=1.0), AdamWState(), lr=0.0)
        for k in before:
            np.testing.assert_array_equal(model.params[k].data, before[k])

    def test_failed_perturbed_pass_restores_weights(self, target):
        calls = []

        def blows_up_when_perturbed(model, batch):
            calls.append(1)
            if len(calls) == 1:
                return bowl(model, batch)
            return (model.params["w"] * 1e30 * 1e30).sum()

        model = Toy()
        before = model.snapshot()
        state = AdamWState()
        with pytest.raises(NonFiniteError):
            asam_step(model, target, blows_up_when_perturbed, AsamConfig(rho=1.0), state, lr=1e-3)
        assert len(calls) == 2
        assert state.t == 0
        for k in before:
            np.testing.assert_array_equal(model.params[k].data, before[k])

    def test_returns_unperturbed_loss(self, target):
        model = Toy()
        expected = bowl(model, target).item()
        loss = asam_step(model, target, bowl, AsamConfig(rho=1.0), AdamWState(), lr=1e-3)
        assert loss == pytest.approx(expected, rel=1e-6)


class TestSharpness:

    def test_flat_loss_scores_zero(self):
        assert sharpness_estimate(Toy(), None, flat, rho=1.0) == 0.0

    def test_bowl_is_sharp(self, target):
        model = Toy()
        before = model.snapshot()
        for adaptive in (True, False):
            assert sharpness_estimate(model, target, bowl, rho=0.5, adaptive=adaptive) > 0.0
        for k in before:
            np.testing.assert_array_equal(model.params[k].data, before[k])

    def test_sam_sharpness_on_a_known_bowl(self):
        # L = sum w^2 at w = (3, 4): ascent of 1 along g adds 2 * 5 * 1 + 1
        class Single:
            def __init__(self):
                self.w = parameter([3.0, 4.0], dtype=np.float64)

            def parameters(self):
                return {"w": self.w}

        def loss(model, _):
            return (model.w * model.w).sum()

        assert sharpness_estimate(Single(), None, loss, rho=1.0, adaptive=False) == pytest.approx(11.0)
        assert math.isfinite(sharpness_estimate(Single(), None, loss, rho=1.0, adaptive=True))
