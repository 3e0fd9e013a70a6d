import math

import numpy as np
import pytest

from capgen import tensor as T
from capgen.errors import ConfigError, UsageError
from capgen.nn import Parameter
from capgen.optim import Adam, ParamGroup, SchedulerConfig, adam_step, cawr_factor, cycle_position

import oracles


def scalar_param(value):
    with T.precision(np.float64):
        return Parameter(np.array([value]))


def single_group(params, lr=0.1, **kw):
    return Adam([ParamGroup("decoder", lr, params)], **kw)


class TestAdam:
    def test_first_step_is_a_sign_step(self):
        with T.precision(np.float64):
            p = Parameter(np.array([1.0, -2.0, 3.0]))
        opt = single_group({"p": p}, lr=0.01, weight_decay=0.0)
        p.grad = np.array([0.3, -5.0, 0.25])
        adam_step(opt, 1.0)
        step = np.array([1.0, -2.0, 3.0]) - p.data
        np.testing.assert_allclose(np.abs(step), 0.01, rtol=1e-6)
        np.testing.assert_array_equal(np.sign(step), [1, -1, 1])

    def test_gradient_rescaling_invariance_at_first_step(self):
        results = []
        for scale in (1.0, 1000.0):
            p = scalar_param(0.5)
            opt = single_group({"p": p}, weight_decay=0.0)
            p.grad = np.array([0.2 * scale])
            opt.step()
            results.append(p.data[0])
        assert results[0] == pytest.approx(results[1], rel=1e-6)

    def test_zero_gradient_without_decay_is_noop(self):
        p = scalar_param(1.5)
        opt = single_group({"p": p}, weight_decay=0.0)
        for _ in range(3):
            p.grad = np.zeros(1)
            opt.step()
        assert p.data[0] == 1.5

    def test_three_step_recurrence(self):
        theta, lr, wd, b1, b2, eps = 1.0, 0.1, 0.01, 0.9, 0.999, 1e-8
        grads = [0.5, -1.0, 2.0]
        factors = [1.0, 0.5, 0.25]
        m = v = 0.0
        expected = []
        for t, (g, f) in enumerate(zip(grads, factors), 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat, v_hat = m / (1 - b1**t), v / (1 - b2**t)
            theta = theta - f * lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * theta)
            expected.append(theta)
        p = scalar_param(1.0)
        opt = single_group({"p": p}, lr=lr, weight_decay=wd)
        for g, f, e in zip(grads, factors, expected):
            p.grad = np.array([g])
            opt.step(f)
            assert p.data[0] == pytest.approx(e, rel=1e-14)
        assert opt.state.t == 3
        assert np.all(opt.state.v["p"] >= 0)

    def test_group_learning_rates(self):
        enc, dec = scalar_param(0.0), scalar_param(0.0)
        opt = Adam([ParamGroup("encoder", 1e-4, {"e": enc}), ParamGroup("decoder", 4e-4, {"d": dec})],
                   weight_decay=0.0)
        enc.grad, dec.grad = np.array([1.0]), np.array([1.0])
        opt.step()
        assert enc.data[0] == pytest.approx(-1e-4, rel=1e-6)
        assert dec.data[0] == pytest.approx(-4e-4, rel=1e-6)

    def test_missing_gradient_names_parameter(self):
        opt = single_group({"decoder.out.weight": scalar_param(1.0)})
        with pytest.raises(UsageError, match="decoder.out.weight"):
            opt.step()

    def test_overlapping_groups(self):
        p = scalar_param(1.0)
        with pytest.raises(ConfigError):
            Adam([ParamGroup("encoder", 0.1, {"p": p}), ParamGroup("decoder", 0.1, {"p": p})])

    def test_quadratic_convergence(self):
        p = scalar_param(1.0)
        opt = single_group({"theta": p}, lr=0.01)
        sched = SchedulerConfig(T0=500, T_mult=1.0)
        for step in range(2000):
            p.grad = 2 * p.data
            opt.step(cawr_factor(step, sched))
        assert abs(p.data[0]) < 1e-3


class TestScheduler:
    def test_start(self):
        assert cawr_factor(0, SchedulerConfig(T0=10)) == 1.0

    def test_cycle_end_reaches_floor(self):
        cfg = SchedulerConfig(T0=10, eta_min=0.1)
        assert cawr_factor(10 - 1e-9, cfg) == pytest.approx(0.1, abs=1e-9)
        assert cawr_factor(10, cfg) == 1.0  # restart

    def test_midpoint(self):
        assert cawr_factor(5, SchedulerConfig(T0=10)) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("T_mult", [1.0, 2.0, 3.0])
    @pytest.mark.parametrize("eta_min", [0.0, 0.05])
    def test_closed_form_every_step(self, T_mult, eta_min):
        cfg = SchedulerConfig(T0=7, T_mult=T_mult, eta_min=eta_min)
        for step in range(300):
            assert cawr_factor(step, cfg) == pytest.approx(
                oracles.cawr_closed_form(step, 7, T_mult, eta_min), abs=1e-12)

    @pytest.mark.parametrize("T_mult", [1.0, 2.0])
    def test_monotone_within_cycle_and_restart(self, T_mult):
        cfg = SchedulerConfig(T0=8, T_mult=T_mult, eta_min=0.1)
        prev_cycle, prev = 0, 1.0
        for step in range(120):
            cycle, t_cur, _ = cycle_position(step, 8, T_mult)
            f = cawr_factor(step, cfg)
            assert 0.1 <= f <= 1.0
            if cycle != prev_cycle:
                assert t_cur == 0 and f == 1.0
            else:
                assert f <= prev
            prev_cycle, prev = cycle, f

    def test_unresolved_T0(self):
        with pytest.raises(ConfigError):
            cawr_factor(0, SchedulerConfig())

    def test_invalid(self):
        with pytest.raises(ConfigError):
            SchedulerConfig(T0=0)
        with pytest.raises(ConfigError):
            SchedulerConfig(T0=4, T_mult=0.5)
        with pytest.raises(UsageError):
            cawr_factor(-1, SchedulerConfig(T0=4))
