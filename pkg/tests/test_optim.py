"""Learning-rate schedule, Adam and gradient clipping."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argus import autograd as ag
from argus.optim import Adam, adam_step, clip_grad_norm, lr_schedule

W, T = 300, 10_000


class TestSchedule:
    def test_backbone_endpoints(self):
        assert lr_schedule(0, "backbone", W, T) == 1e-5
        assert lr_schedule(W, "backbone", W, T) == 1e-4
        assert lr_schedule(T, "backbone", W, T) == 1e-4

    def test_head_endpoints(self):
        assert lr_schedule(0, "head", W, T) == 1e-3
        assert lr_schedule(W, "head", W, T) == 1e-3
        assert lr_schedule(T, "head", W, T) == pytest.approx(1e-4, abs=1e-18)

    def test_head_midpoint(self):
        # linear decay from 1e-3 to 1e-4 is 5.5e-4 halfway through
        assert lr_schedule((W + T) // 2, "head", W, T) == pytest.approx(5.5e-4, rel=1e-12)

    def test_backbone_warmup_linear(self):
        assert lr_schedule(W // 2, "backbone", W, T) == pytest.approx(5.5e-5)

    def test_clamped_past_end(self):
        assert lr_schedule(T + 500, "head", W, T) == lr_schedule(T, "head", W, T)
        assert lr_schedule(-3, "backbone", W, T) == 1e-5

    def test_unknown_group(self):
        with pytest.raises(ValueError):
            lr_schedule(0, "encoder", W, T)


def _hand_adam(grads, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = 1.0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(x)
    return trace


class TestAdam:
    def test_three_step_trace(self):
        grads = [0.5, -1.5, 2.0]
        p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
        got = []
        for t, g in enumerate(grads, 1):
            adam_step(p, np.array([g]), m, v, t, 0.1)
            got.append(p[0])
        np.testing.assert_allclose(got, _hand_adam(grads), rtol=0, atol=1e-12)
        # first step moves by exactly lr against the gradient sign
        assert got[0] == pytest.approx(0.9, abs=1e-7)

    def test_zero_gradient(self):
        with ag.precision(np.float64):
            p = ag.parameter(np.array([1.0, -2.0]))
        opt = Adam({"backbone": [("p", p)], "head": []})
        p.grad = np.zeros(2)
        opt.step({"backbone": 0.1, "head": 0.1})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_constant_gradient_step_size(self):
        p, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
        for t in range(1, 200):
            before = p.copy()
            adam_step(p, np.array([0.3, -2.0, 1e-3]), m, v, t, 0.01)
        np.testing.assert_allclose(p - before, [-0.01, 0.01, -0.01], rtol=1e-3)

    def test_non_finite_skips(self, caplog):
        with ag.precision(np.float64):
            p = ag.parameter(np.array([1.0]))
        opt = Adam({"backbone": [("p", p)], "head": []})
        p.grad = np.array([np.inf])
        assert opt.step({"backbone": 0.1, "head": 0.1}) is False
        assert opt.skipped == 1 and opt.t == 0 and p.data[0] == 1.0
        assert "skipped" in caplog.text

    def test_groups_use_their_rates(self):
        with ag.precision(np.float64):
            a, b = ag.parameter(np.array([0.0])), ag.parameter(np.array([0.0]))
        opt = Adam({"backbone": [("a", a)], "head": [("b", b)]})
        a.grad, b.grad = np.array([0.1]), np.array([0.1])
        opt.step({"backbone": 1e-3, "head": 1e-1})
        assert a.data[0] == pytest.approx(-1e-3) and b.data[0] == pytest.approx(-1e-1)

    def test_state_round_trip(self):
        with ag.precision(np.float64):
            p = ag.parameter(np.array([1.0, 2.0]))
        opt = Adam({"backbone": [("p", p)], "head": []})
        p.grad = np.array([0.4, -0.2])
        opt.step({"backbone": 0.1, "head": 0.1})
        other = Adam({"backbone": [("p", p)], "head": []})
        other.load_state(opt.state())
        assert other.t == 1
        np.testing.assert_array_equal(other.m["p"], opt.m["p"])


class TestClip:
    def test_scales_to_unit_norm(self):
        grads, norm = clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
        assert norm == 5.0
        np.testing.assert_allclose(np.concatenate(grads), [0.6, 0.8])

    def test_small_untouched(self):
        g = [np.array([0.1, 0.2])]
        out, _ = clip_grad_norm(g, 1.0)
        np.testing.assert_array_equal(out[0], g[0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_post_clip_norm_bounded(self, values):
        grads, _ = clip_grad_norm([np.array(values[: len(values) // 2 + 1]), np.array(values)], 1.0)
        total = math.sqrt(sum(float(np.sum(g**2)) for g in grads))
        assert total <= 1 + 1e-6
