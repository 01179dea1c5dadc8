import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from appode import tensor as T
from appode.ode import SolverError, StiffnessError, heun_fixed, heun_step, solve_adaptive, solve_dense
from oracles import rk4


def zero(z, t):
    return T.zeros_like(z)


def identity(z, t):
    return z


def one(z, t):
    return T.ones_like(z)


def f64(x):
    return T.Tensor(np.asarray(x, dtype=np.float64))


def test_heun_zero_field():
    z = f64([0.3, -2.0])
    zt, err = heun_step(zero, z, 0.0, 0.7)
    np.testing.assert_array_equal(zt.data, z.data)
    assert err == 0.0


def test_heun_constant_field_exact():
    zt, err = heun_step(one, f64([0.0]), 0.0, 0.5)
    assert zt.data[0] == 0.5 and err == 0.0


def test_heun_exponential_local_error():
    zt, _ = heun_step(identity, f64([1.0]), 0.0, 0.1)
    assert zt.data[0] == pytest.approx(1.105, abs=1e-12)
    assert abs(math.exp(0.1) - zt.data[0]) == pytest.approx(1.7e-4, rel=0.05)


def test_heun_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        heun_step(identity, f64([1.0]), 0.0, 0.0)


def test_adaptive_hits_e():
    z, stats = solve_adaptive(identity, f64([1.0]), 0.0, 1.0, tol=1e-4)
    assert abs(z.data[0] - math.e) < 1e-3
    assert stats.accepted_steps >= 1


def test_adaptive_zero_field_unchanged():
    z0 = f64(np.arange(4.0))
    z, stats = solve_adaptive(zero, z0, -1.0, 0.0)
    np.testing.assert_array_equal(z.data, z0.data)
    assert stats.rejected_steps == 0 and stats.accepted_steps <= 4


def test_adaptive_matches_rk4_on_minus_sin():
    tol = 1e-3
    z, _ = solve_adaptive(lambda z, t: T.ones_like(z) * -math.sin(t), f64([1.0]), 0.0, math.pi, tol)
    ref = rk4(lambda z, t: -math.sin(t) * np.ones_like(z), [1.0], 0.0, math.pi, 1e-4)
    assert ref[0] == pytest.approx(-1.0, abs=1e-9)
    assert abs(z.data[0] - ref[0]) < 10 * tol


def test_adaptive_lands_exactly_on_t1():
    times = []

    def rec(z, t):
        times.append(t)
        return z * 0.3

    solve_adaptive(rec, f64([1.0]), 0.0, 1.3, tol=1e-3)
    assert max(times) == 1.3


def test_adaptive_default_tolerance_terminates():
    z, stats = solve_adaptive(identity, f64([1.0]), 0.0, 1.0)
    assert stats.accepted_steps < 50 and abs(z.data[0] - math.e) < 0.1


def test_adaptive_rejects_bad_interval():
    with pytest.raises(ValueError):
        solve_adaptive(identity, f64([1.0]), 1.0, 1.0)


def test_stiffness_underflow():
    with pytest.raises(StiffnessError) as info:
        solve_adaptive(lambda z, t: z * -1e9, f64([1.0]), 0.0, 1.0)
    assert 0.0 <= info.value.t < 1.0


def test_non_finite_field_aborts():
    with pytest.raises(SolverError, match="non-finite"):
        solve_adaptive(lambda z, t: z * np.inf, f64([1.0]), 0.0, 1.0)


def test_dense_zero_field_snapshots():
    traj, _ = solve_dense(zero, f64([1.0, 2.0]), 0.0, [0.0, 1.0, 2.0])
    assert len(traj.states) == 3
    for s in traj.states:
        np.testing.assert_array_equal(s.data, [1.0, 2.0])


def test_dense_constant_field():
    traj, _ = solve_dense(one, f64([0.0]), 0.0, [1.0, 2.0, 3.0])
    np.testing.assert_allclose([s.data[0] for s in traj.states], [1.0, 2.0, 3.0], atol=1e-2)


def test_dense_exponential_ten_samples():
    tol = 1e-3
    times = np.linspace(0.1, 2.0, 10)
    traj, _ = solve_dense(identity, f64([1.0]), 0.0, times, tol)
    for t, s in zip(times, traj.states):
        assert abs(s.data[0] - math.exp(t)) < 10 * tol * math.exp(t)


def test_dense_rejects_unordered_times():
    with pytest.raises(ValueError):
        solve_dense(identity, f64([1.0]), 0.0, [1.0, 0.5])


def test_dense_matches_chained_segments():
    tol = 1e-3
    f = lambda z, t: z * math.cos(t)  # noqa: E731
    traj, _ = solve_dense(f, f64([1.0]), 0.0, [1.0, 2.5], tol)
    zb, _ = solve_adaptive(f, f64([1.0]), 0.0, 1.0, tol)
    zc, _ = solve_adaptive(f, zb, 1.0, 2.5, tol)
    assert abs(traj.states[-1].data[0] - zc.data[0]) < 2 * tol * abs(zc.data[0])


def test_fixed_heun_second_order():
    errs = [abs(heun_fixed(identity, f64([1.0]), 0.0, 1.0, n).data[0] - math.e) for n in (20, 40, 80)]
    for a, b in zip(errs, errs[1:]):
        assert 4.0 * 0.85 <= a / b <= 4.0 * 1.15


def test_gradient_through_solver():
    a = T.parameter(np.array([0.7]))
    a.data = a.data.astype(np.float64)
    z, _ = solve_adaptive(lambda z, t: z * a, f64([1.5]), 0.0, 1.0, tol=1e-4)
    T.backward(T.tsum(z))

    def value(av):
        with T.no_grad():
            zz, _ = solve_adaptive(lambda z, t: z * av, f64([1.5]), 0.0, 1.0, tol=1e-4)
        return zz.data[0]

    h = 1e-4
    fd = (value(0.7 + h) - value(0.7 - h)) / (2 * h)
    assert abs(a.grad[0] - fd) / abs(fd) < 1e-2
    assert abs(a.grad[0] - 1.5 * math.exp(0.7)) / (1.5 * math.exp(0.7)) < 1e-2


def test_rejected_steps_stay_off_the_tape():
    a = T.parameter(np.array([3.0]))
    z, stats = solve_adaptive(lambda z, t: z * a, T.Tensor(np.ones(1)), 0.0, 2.0, tol=1e-2, dt0=1.0)
    assert stats.rejected_steps > 0
    # two field evaluations per accepted step, each a handful of nodes
    assert T.graph_size(z) <= 8 * stats.accepted_steps + 4


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(-3, 3), span=st.floats(0.1, 4.0), tol=st.sampled_from([1e-1, 1e-2, 1e-3]))
def test_nfe_accounting(rate, span, tol):
    _, stats = solve_adaptive(lambda z, t: z * rate + math.sin(3 * t), f64([1.0, -0.5]), 0.0, span, tol)
    assert stats.nfe == 2 * (stats.accepted_steps + stats.rejected_steps)
    assert stats.accepted_steps >= 1
    assert len(stats.steps_per_unit_time) == stats.accepted_steps


@settings(max_examples=15, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 1000))
def test_trajectory_times_and_shapes(n, seed):
    times = np.sort(np.random.default_rng(seed).uniform(0, 3, n))
    times = np.unique(times)
    traj, _ = solve_dense(lambda z, t: -z, f64(np.ones((2, 3))), 0.0, times)
    assert traj.times == sorted(traj.times)
    assert all(s.shape == (2, 3) for s in traj.states)
