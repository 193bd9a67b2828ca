"""Tests for local, centralized and coordinated moving horizon estimation."""

import numpy as np
import pytest

from dmhe.benchmark import cstr4_bounds, cstr4_scales
from dmhe.cstr4 import Q_NOMINAL
from dmhe.decomposition import SubsystemSpec
from dmhe.mhe import (DMHECoordinator, MHEConfig, MHEProblem, _LocalProblem, arrival_cost, centralized_spec,
                      dmhe_step, open_loop_window, solve_centralized_mhe)
from dmhe.model import NoiseSpec, NonlinearModel, simulate

from conftest import linear_model, random_stable_system


def kalman_filter(A, B, C, Q, R, x0, P0, y, u):
    """Filtered estimates and the predicted (prior) mean/covariance at every instant."""
    n = len(x0)
    xp, Pp = np.asarray(x0, float), np.asarray(P0, float)
    preds, filt = [], []
    for k in range(len(y)):
        preds.append((xp.copy(), Pp.copy()))
        K = Pp @ C.T @ np.linalg.inv(C @ Pp @ C.T + R)
        xf = xp + K @ (y[k] - C @ xp)
        Pf = (np.eye(n) - K @ C) @ Pp
        filt.append(xf)
        if k < len(u):
            xp = A @ xf + B @ u[k]
            Pp = A @ Pf @ A.T + Q
    return filt, preds


def pendulum_like():
    """Small nonlinear model with one parameter: damped oscillator with unknown stiffness."""
    dt = 0.05
    f = lambda x, u, th: np.array([x[0] + dt * x[1], x[1] + dt * (-th[0] * np.sin(x[0]) - 0.3 * x[1] + u[0])])
    h = lambda x, th: np.array([x[0]])
    return NonlinearModel(2, 1, 1, 1, f, h)


# --------------------------------------------------------------------------- arrival cost and config

def test_arrival_cost_examples():
    assert arrival_cost([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0.0
    assert arrival_cost([3.0, 4.0], [0.0, 0.0], np.eye(2)) == pytest.approx(25.0)
    assert arrival_cost([0.1, 0.07], [0.0, 0.0], np.diag([0.1 ** 2, 0.07 ** 2])) == pytest.approx(2.0)


def test_config_validation():
    with pytest.raises(ValueError):
        MHEConfig(horizon=0)
    with pytest.raises(ValueError):
        MHEConfig(q_std=0.0)
    with pytest.raises(ValueError):
        MHEConfig(lb=np.array([1.0]), ub=np.array([0.0]))
    with pytest.raises(ValueError):
        MHEConfig(weights={0: (np.eye(2), -np.eye(1), np.eye(3))})


def test_default_weights_shapes():
    spec = SubsystemSpec(0, (0, 1, 2, 3), (8, 9, 10, 11, 12), (0, 1), (0, 1))
    Q, R, P = MHEConfig().weights_for(spec)
    assert Q.shape == (4, 4) and R.shape == (2, 2) and P.shape == (9, 9)
    np.testing.assert_allclose(np.diag(P), [0.01] * 4 + [0.0049] * 5)


def test_problem_validation(cstr, x_s, params):
    spec = centralized_spec(cstr)
    z = np.r_[x_s, params.theta()]
    with pytest.raises(ValueError):
        MHEProblem(cstr, spec, 2, np.zeros((2, 4)), np.zeros((2, 4)), np.tile(z, (3, 1)), z)
    with pytest.raises(ValueError):
        MHEProblem(cstr, spec, 1, np.zeros((2, 4)), np.zeros((1, 4)), np.tile(z, (2, 1)), z[:5])


# --------------------------------------------------------------------------- local problems

def test_exact_model_zero_noise_recovers_truth(cstr, x_s, params):
    scales, ys = cstr4_scales()
    lb, ub = cstr4_bounds()
    z = np.r_[x_s, params.theta()]
    traj = simulate(cstr, x_s * 1.002, params.theta(), np.tile(Q_NOMINAL, (6, 1)))
    cfg = MHEConfig(horizon=6, scales=scales, output_scales=ys, lb=lb, ub=ub)
    prior = np.r_[traj.x[0], params.theta()]
    res = solve_centralized_mhe(cstr, traj.y, traj.u, prior, cfg)
    assert res.objective <= 1e-8
    np.testing.assert_allclose(res.estimate, np.r_[traj.x[-1], params.theta()], rtol=1e-8)
    assert res.converged
    assert z.shape == res.estimate.shape


def test_kalman_filter_equivalence():
    rng = np.random.default_rng(1)
    for trial in range(3):
        A, B, C = random_stable_system(rng)
        m = linear_model(A, B, C)
        Q = np.diag(rng.uniform(0.01, 0.1, 3))
        R = np.diag(rng.uniform(0.01, 0.1, 2))
        P0 = np.eye(3)
        u = rng.standard_normal((30, 1))
        tr = simulate(m, rng.standard_normal(3), [], u, NoiseSpec(np.sqrt(np.diag(Q)), np.sqrt(np.diag(R)), trial))
        filt, preds = kalman_filter(A, B, C, Q, R, np.zeros(3), P0, tr.y, u)
        N = 5
        cfg = MHEConfig(horizon=N, weights={0: (Q, R, P0)})
        for t in range(31):
            t0 = max(0, t - N)
            prior, P = preds[t0]
            res = solve_centralized_mhe(m, tr.y[t0:t + 1], u[t0:t], prior, cfg, P=P)
            assert np.linalg.norm(res.estimate - filt[t]) <= 1e-6 * max(np.linalg.norm(filt[t]), 1e-12)


def test_unselected_parameter_is_held_at_prior():
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((15, 1)), NoiseSpec(0.0, 0.01, 4))
    prior = np.array([0.35, 0.05, 2.3])
    spec = centralized_spec(m)
    cfg = MHEConfig(horizon=15)
    res = solve_centralized_mhe(m, traj.y, traj.u, prior, cfg, unselected=(2,))
    np.testing.assert_array_equal(res.window[:, 2], 2.3)
    free = solve_centralized_mhe(m, traj.y, traj.u, prior, cfg)
    assert free.estimate[2] != 2.3
    assert spec.local == (0, 1, 2)


def test_open_loop_freezing_of_a_state_channel():
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((12, 1)), NoiseSpec(0.0, 0.01, 5))
    prior = np.array([0.35, 0.05, 2.1])
    cfg = MHEConfig(horizon=12)
    res = solve_centralized_mhe(m, traj.y, traj.u, prior, cfg, unselected=(1,))
    Z = res.window
    assert Z[0, 1] == prior[1]
    for l in range(len(traj.u)):
        # the frozen velocity channel follows the model with zero disturbance
        xn = m.step(Z[l, :2], traj.u[l], Z[l, 2:])
        assert abs(Z[l + 1, 1] - xn[1]) <= 1e-10


def test_window_consistency_with_disturbances():
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((10, 1)), NoiseSpec([0.01, 0.01], 0.01, 6))
    prior = np.array([0.35, 0.05, 2.1])
    cfg = MHEConfig(horizon=10)
    res = solve_centralized_mhe(m, traj.y, traj.u, prior, cfg)
    Z, W = res.window, res.w
    for l in range(10):
        np.testing.assert_allclose(Z[l + 1, :2], m.step(Z[l, :2], traj.u[l], Z[l, 2:]) + W[l], atol=1e-8)
        assert Z[l + 1, 2] == Z[l, 2]


def test_residual_jacobian_matches_differences():
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((6, 1)), NoiseSpec(0.0, 0.01, 7))
    spec = centralized_spec(m)
    prob = MHEProblem(m, spec, 6, traj.y, traj.u, np.tile([0.3, 0.0, 1.8], (7, 1)), np.array([0.3, 0.0, 1.8]))
    lp = _LocalProblem(prob, MHEConfig(horizon=6, lb=np.array([-0.5, -5, 1.0]), ub=np.array([0.5, 5, 3.0])))
    d = lp.initial_decision() + 0.01 * np.random.default_rng(0).standard_normal(lp.nd)
    r, J, _ = lp.residual(d)
    Jn = np.empty_like(J)
    for j in range(lp.nd):
        e = np.zeros(lp.nd)
        e[j] = 1e-6
        Jn[:, j] = (lp.residual(d + e, False)[0] - lp.residual(d - e, False)[0]) / 2e-6
    np.testing.assert_allclose(J, Jn, atol=1e-6)


def test_estimate_respects_bounds():
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((8, 1)), NoiseSpec(0.0, 0.01, 8))
    lb, ub = np.array([-1.0, -1.0, 1.9]), np.array([1.0, 1.0, 1.95])
    res = solve_centralized_mhe(m, traj.y, traj.u, np.array([0.4, 0.0, 1.92]), MHEConfig(horizon=8, lb=lb, ub=ub))
    assert np.all(res.estimate >= lb) and np.all(res.estimate <= ub)


def test_determinism():
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((8, 1)), NoiseSpec(0.0, 0.02, 9))
    cfg = MHEConfig(horizon=8)
    a = solve_centralized_mhe(m, traj.y, traj.u, np.array([0.3, 0.0, 1.5]), cfg)
    b = solve_centralized_mhe(m, traj.y, traj.u, np.array([0.3, 0.0, 1.5]), cfg)
    np.testing.assert_array_equal(a.window, b.window)
    assert a.objective == b.objective and a.iterations == b.iterations


def test_open_loop_window():
    m = pendulum_like()
    spec = centralized_spec(m)
    u = np.zeros((4, 1))
    Z = open_loop_window(m, spec, np.array([0.2, 0.0, 2.0]), u, np.tile([0.2, 0.0, 2.0], (5, 1)))
    ref = simulate(m, [0.2, 0.0], [2.0], u)
    np.testing.assert_array_equal(Z[:, :2], ref.x)


# --------------------------------------------------------------------------- coordination

def run_coordinator(model, specs, cfg, guess, traj, steps, unselected=()):
    coord = DMHECoordinator(model, specs, cfg, guess, keep_messages=True)
    for t in range(steps):
        coord.step(traj.y[t], traj.u[t - 1] if t else None, unselected)
    return coord


def test_single_subsystem_coordinator_equals_local_solve():
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((12, 1)), NoiseSpec(0.0, 0.01, 10))
    cfg = MHEConfig(horizon=5)
    guess = np.array([0.3, 0.1, 1.7])
    coord = DMHECoordinator(m, [centralized_spec(m)], cfg, guess)
    res0 = coord.step(traj.y[0])[0]
    direct = solve_centralized_mhe(m, traj.y[:1], traj.u[:0], guess, cfg)
    np.testing.assert_array_equal(res0.estimate, direct.estimate)
    # later instants: prior is the previous window's value at the new window start
    for t in range(1, 8):
        coord.step(traj.y[t], traj.u[t - 1])
    hist = coord.state.history
    assert len(hist) == 8 and np.all(np.isfinite(hist))


def test_decoupled_subsystems_match_independent_runs():
    A = np.diag([0.8, 0.6])
    B = np.eye(2)
    C = np.eye(2)
    m = linear_model(A, B, C)
    rng = np.random.default_rng(3)
    u = rng.standard_normal((20, 2))
    traj = simulate(m, [1.0, -1.0], [], u, NoiseSpec(0.05, 0.05, 11))
    s1 = SubsystemSpec(0, (0,), (), (0,), (0,))
    s2 = SubsystemSpec(1, (1,), (), (1,), (1,))
    cfg = MHEConfig(horizon=5)
    guess = np.array([0.5, -0.5])
    both = run_coordinator(m, [s1, s2], cfg, guess, traj, 20)
    only1 = run_coordinator(m, [s1], cfg, guess, traj, 20)
    only2 = run_coordinator(m, [SubsystemSpec(0, (1,), (), (1,), (1,))], cfg, guess, traj, 20)
    H = np.array(both.state.history)
    np.testing.assert_array_equal(H[:, 0], np.array(only1.state.history)[:, 0])
    np.testing.assert_array_equal(H[:, 1], np.array(only2.state.history)[:, 1])


def test_barrier_semantics_uses_previous_instant():
    # x2 drives x1; subsystem 0 must see subsystem 1's estimate from the previous instant
    A = np.array([[0.5, 0.4], [0.0, 0.9]])
    m = linear_model(A, np.eye(2), np.eye(2))
    traj = simulate(m, [1.0, 2.0], [], np.zeros((6, 2)), NoiseSpec(0.0, 0.01, 12))
    s1 = SubsystemSpec(0, (0,), (), (0,), (0,), chi=(1,), neighbors=(1,))
    s2 = SubsystemSpec(1, (1,), (), (1,), (1,))
    cfg = MHEConfig(horizon=3)
    guess = np.array([0.0, 0.0])
    coord = DMHECoordinator(m, [s1, s2], cfg, guess, keep_messages=True)
    coord.step(traj.y[0])
    G = coord._assembled_window(0, 1)
    w1 = coord.state.windows[1][1]
    # times 0 and 1 both use subsystem 1's window element at instant 0 (held for the newest time)
    np.testing.assert_array_equal(G[:, 1], [w1[0, 0], w1[0, 0]])
    coord.step(traj.y[1], traj.u[0])
    sent = [(t, i) for t, i, _ in coord.state.messages]
    assert sent == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_coordinator_validation():
    m = pendulum_like()
    spec = centralized_spec(m)
    with pytest.raises(ValueError):
        DMHECoordinator(m, [spec, spec], MHEConfig(), np.zeros(3))
    with pytest.raises(ValueError):
        DMHECoordinator(m, [spec], MHEConfig(), np.zeros(2))
    coord = DMHECoordinator(m, [spec], MHEConfig(), np.zeros(3) + 0.1)
    coord.step([0.1])
    with pytest.raises(ValueError):
        coord.step([0.1])


def test_dmhe_step_accepts_selection():
    from dmhe.selection import SelectionResult
    m = pendulum_like()
    traj = simulate(m, [0.4, 0.0], [2.0], np.zeros((4, 1)))
    coord = DMHECoordinator(m, [centralized_spec(m)], MHEConfig(horizon=3), np.array([0.4, 0.0, 1.5]))
    sel = SelectionResult((0, 1), (), 0.1, (0, 1), 3)
    for t in range(4):
        dmhe_step(coord, traj.y[t], traj.u[t - 1] if t else None, sel)
    assert coord.state.estimate[2] == 1.5


def test_failed_local_solve_falls_back_to_open_loop():
    def h(x, th):
        if abs(x[0]) > 5:
            raise FloatingPointError("sensor model out of range")
        return x.copy()
    m = NonlinearModel(1, 1, 1, 0, lambda x, u, th: 0.9 * x, h)
    coord = DMHECoordinator(m, [centralized_spec(m)], MHEConfig(horizon=2), np.array([10.0]))
    res = coord.step([1.0])[0]
    assert coord.state.degraded == [0] and not res.converged
    assert coord.state.estimate[0] == 10.0
    coord.step([1.0], [0.0])
    # the open-loop window from the prior: 10 -> 9
    assert coord.state.degraded == [0, 1]
    assert coord.state.estimate[0] == pytest.approx(9.0)


def test_failed_rollout_holds_the_prior():
    def f(x, u, th):
        raise FloatingPointError("blow-up")
    m = NonlinearModel(1, 1, 1, 0, f, lambda x, th: x.copy())
    coord = DMHECoordinator(m, [centralized_spec(m)], MHEConfig(horizon=2), np.array([3.0]))
    coord.step([1.0])                     # a one-sample window needs no model step
    coord.step([1.0], [0.0])
    assert coord.state.degraded == [1]
    # the window still starts at 0, so the held prior is the initial guess
    assert coord.state.estimate[0] == 3.0


def test_cstr4_distributed_short_run(cstr, x_s, params):
    from dmhe.benchmark import THREE_SUBSYSTEMS, alternating_mismatch
    from dmhe.decomposition import subsystems_from_groups
    scales, ys = cstr4_scales()
    lb, ub = cstr4_bounds()
    specs = subsystems_from_groups(cstr, THREE_SUBSYSTEMS, (x_s, params.theta()), Q_NOMINAL)
    traj = simulate(cstr, x_s, params.theta(), np.tile(Q_NOMINAL, (15, 1)), NoiseSpec(0.0, 1e-3 * x_s[1::2], 0))
    truth = np.r_[x_s, params.theta()]
    guess = alternating_mismatch(truth)
    cfg = MHEConfig(horizon=10, scales=scales, output_scales=ys, lb=lb, ub=ub)
    coord = run_coordinator(cstr, specs, cfg, guess, traj, 15)
    est = coord.state.estimate
    err_T = np.abs(est[1:8:2] / traj.x[-1, 1::2] - 1)
    assert err_T.max() < 0.01
    assert not coord.state.degraded
