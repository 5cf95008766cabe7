import numpy as np
import pytest

from teleop_mpc.model import AugmentedTarget, DoubleIntegrator, PlanarArm, augment_model
from teleop_mpc.ocp import CostWeights, OcpProblem, ReferenceTrajectory
from teleop_mpc.slq import (
    AffinePolicy,
    SolverSettings,
    backward_pass,
    interpolate,
    knot_grid,
    line_search,
    rollout,
    solve,
)
from oracles import riccati_gains

SETTINGS = SolverSettings()
TIGHT = SolverSettings(max_iterations=200, convergence_tol=1e-12)


def lti_problem(q_ee=2.0, r=0.5, q_terminal=3.0):
    """Augmented 3-D double integrator tracking the origin via an external reference."""
    aug = augment_model(DoubleIntegrator(dim=3))
    weights = CostWeights.make(q_ee, r, q_terminal, ee_dim=3, n_u=3)
    ref = ReferenceTrajectory(np.array([0.0, 1.0]), np.zeros((2, 3)))
    return OcpProblem(model=aug, weights=weights, horizon=1.0, reference=ref)


def lti_x0():
    aug = augment_model(DoubleIntegrator(dim=3))
    return aug.augment_state(
        np.array([1.0, 0.5, -0.3, 0.0, 0.0, 0.0]),
        AugmentedTarget.make([0.2, 0.1, 0.0], [0.1, 0.0, 0.0]),
    )


def arm_problem(q_ee=50.0, r=0.1, q_terminal=10.0):
    aug = augment_model(PlanarArm([0.5, 0.5, 0.3]))
    weights = CostWeights.make(q_ee, r, q_terminal, ee_dim=2, n_u=3)
    return OcpProblem(model=aug, weights=weights, horizon=1.0)


def arm_x0(problem, q=(0.4, 0.5, -0.3), x_d=None, v_d=(0.0, 0.0)):
    aug = problem.model
    q = np.asarray(q, dtype=float)
    if x_d is None:
        x_d = aug.plant.ee(q)
    return aug.augment_state(q, AugmentedTarget.make(x_d, v_d))


def oracle_gains_for(problem, settings):
    """Closed-form discretization + textbook Riccati recursion, solver-independent."""
    times = knot_grid(problem, settings)
    dt = times[1] - times[0]
    N = times.size - 1
    I3 = np.eye(3)
    A = np.eye(12)
    A[0:3, 3:6] = dt * I3       # p += dt v
    A[6:9, 9:12] = dt * I3      # x_d += dt v_d
    B = np.zeros((12, 3))
    B[0:3, :] = 0.5 * dt * dt * I3
    B[3:6, :] = dt * I3
    J = np.zeros((3, 12))
    J[:, 0:3] = I3              # ee = p, tracking the origin
    w = np.full(N, dt)
    w[0] = 0.5 * dt
    Q_ee, R, Q_t = problem.weights.Q_ee, problem.weights.R, problem.weights.Q_terminal
    C = [wi * (J.T @ Q_ee @ J) for wi in w]
    D = [wi * R for wi in w]
    C_f = J.T @ Q_t @ J + 0.5 * dt * (J.T @ Q_ee @ J)
    return riccati_gains(A, B, C, D, C_f)


# ---------------------------------------------------------------- rollout

def test_rollout_stationary_double_integrator():
    problem = lti_problem(q_ee=1.0, r=1.0, q_terminal=0.0)
    aug = problem.model
    x0 = aug.augment_state(np.array([0.1, 0, 0, 0, 0, 0]),
                           AugmentedTarget.make(np.zeros(3), np.zeros(3)))
    times = knot_grid(problem, SETTINGS)
    X, U, cost = rollout(problem, x0, np.zeros((times.size - 1, 3)), SETTINGS)
    assert np.allclose(X, X[0], atol=1e-15)
    # stationary error 0.1 m against the zero reference integrates to T * err^2
    assert cost == pytest.approx(1.0 * 0.01, rel=1e-12)


def test_rollout_policy_with_zero_gains_is_open_loop():
    problem = arm_problem()
    x0 = arm_x0(problem)
    times = knot_grid(problem, SETTINGS)
    N = times.size - 1
    rng = np.random.default_rng(2)
    U = 0.2 * rng.normal(size=(N, 3))
    X_open, _, _ = rollout(problem, x0, U, SETTINGS)
    policy = AffinePolicy(
        times=times,
        x_nom=X_open + 0.1,  # wrong nominal: must not matter with K = 0
        u_nom=np.vstack([U, U[-1][None, :]]),
        K=np.zeros((N + 1, 3, problem.model.n_x)),
        aug_start=problem.model.aug_start,
    )
    X_pol, _, _ = rollout(problem, x0, policy, SETTINGS)
    assert np.allclose(X_pol, X_open, atol=1e-12)


def test_rollout_target_block_closed_form():
    problem = arm_problem()
    x0 = arm_x0(problem, x_d=[0.6, 0.2], v_d=[0.3, -0.1])
    times = knot_grid(problem, SETTINGS)
    N = times.size - 1
    X, _, _ = rollout(problem, x0, np.zeros((N, 3)), SETTINGS)
    aug = problem.model
    for i, t in enumerate(times):
        assert np.allclose(X[i][aug.slice_xd], np.array([0.6, 0.2]) + t * np.array([0.3, -0.1]),
                           atol=1e-12)
        assert np.allclose(X[i][aug.slice_vd], [0.3, -0.1], atol=1e-15)


# ---------------------------------------------------------------- backward pass

def test_gains_match_riccati_oracle():
    problem = lti_problem()
    settings = SETTINGS
    times = knot_grid(problem, settings)
    N = times.size - 1
    X, U, _ = rollout(problem, lti_x0(), np.zeros((N, 3)), settings)
    policy, _ = backward_pass(problem, times, X, U, settings)
    oracle = oracle_gains_for(problem, settings)
    for i in range(N):
        assert np.allclose(policy.K[i], -oracle[i], rtol=1e-8, atol=1e-10)


def test_zero_state_cost_gives_zero_gains():
    problem = lti_problem(q_ee=0.0, r=1.0, q_terminal=0.0)
    settings = SETTINGS
    times = knot_grid(problem, settings)
    N = times.size - 1
    X, U, _ = rollout(problem, lti_x0(), np.zeros((N, 3)), settings)
    policy, info = backward_pass(problem, times, X, U, settings)
    assert np.max(np.abs(policy.K)) < 1e-12
    assert np.max(np.abs(info.k_ff)) < 1e-12


def test_augmented_gain_columns_nonzero_on_tracking_problem():
    problem = arm_problem()
    x0 = arm_x0(problem, x_d=[0.9, 0.3], v_d=[0.1, 0.0])
    policy, report = solve(problem, x0, SETTINGS)
    assert report.converged
    K_aug = policy.K[:, :, policy.aug_start:]
    assert np.max(np.abs(K_aug)) > 1e-3


def test_value_hessians_stay_symmetric():
    problem = arm_problem()
    x0 = arm_x0(problem, x_d=[0.8, 0.4])
    settings = SETTINGS
    times = knot_grid(problem, settings)
    N = times.size - 1
    X, U, _ = rollout(problem, x0, np.zeros((N, 3)), settings)
    _, info = backward_pass(problem, times, X, U, settings)
    assert info.max_hessian_asymmetry < 1e-10


# ---------------------------------------------------------------- line search

def test_line_search_accepts_full_step_on_lq():
    problem = lti_problem()
    settings = SETTINGS
    times = knot_grid(problem, settings)
    N = times.size - 1
    X, U, cost = rollout(problem, lti_x0(), np.zeros((N, 3)), settings)
    policy, _ = backward_pass(problem, times, X, U, settings)
    result = line_search(problem, lti_x0(), (X, U, cost), policy, settings)
    assert result.accepted and result.alpha == 1.0
    assert result.cost < cost


def test_line_search_accepts_identical_candidate():
    problem = arm_problem()
    x0 = arm_x0(problem)
    settings = SETTINGS
    times = knot_grid(problem, settings)
    N = times.size - 1
    X, U, cost = rollout(problem, x0, np.zeros((N, 3)), settings)
    identical = AffinePolicy(
        times=times, x_nom=X, u_nom=np.vstack([U, U[-1][None, :]]),
        K=np.zeros((N + 1, 3, problem.model.n_x)), aug_start=problem.model.aug_start,
    )
    result = line_search(problem, x0, (X, U, cost), identical, settings)
    assert result.accepted
    assert result.cost == pytest.approx(cost, abs=1e-12)


def test_line_search_backtracks_on_inflated_feedforward():
    problem = arm_problem()
    x0 = arm_x0(problem, x_d=[0.9, 0.3])
    settings = SETTINGS
    times = knot_grid(problem, settings)
    N = times.size - 1
    X, U, cost = rollout(problem, x0, np.zeros((N, 3)), settings)
    policy, info = backward_pass(problem, times, X, U, settings)
    inflated = AffinePolicy(
        times=policy.times, x_nom=policy.x_nom,
        u_nom=np.vstack([U + 100.0 * info.k_ff, (U[-1] + 100.0 * info.k_ff[-1])[None, :]]),
        K=policy.K, aug_start=policy.aug_start,
    )
    result = line_search(problem, x0, (X, U, cost), inflated, settings)
    assert result.accepted and result.alpha < 1.0


# ---------------------------------------------------------------- solve

def test_lq_converges_in_one_iteration():
    problem = lti_problem()
    policy, report = solve(problem, lti_x0(), SETTINGS)
    assert report.converged
    assert report.iterations == 1


def test_arm_reaches_fixed_target():
    problem = arm_problem()
    x0 = arm_x0(problem, x_d=[0.7, 0.5])
    policy, report = solve(problem, x0, SETTINGS)
    assert report.converged
    ee_final = problem.model.ee(policy.x_nom[-1])
    assert np.linalg.norm(ee_final - np.array([0.7, 0.5])) < 1e-2


def test_warm_start_is_no_slower():
    problem = arm_problem()
    x0 = arm_x0(problem, x_d=[0.8, 0.35], v_d=[0.2, 0.1])
    cold_policy, cold = solve(problem, x0, SETTINGS)
    _, warm = solve(problem, x0, SETTINGS, warm_start=cold_policy)
    assert warm.iterations <= cold.iterations


def test_cost_trace_non_increasing():
    problem = arm_problem()
    x0 = arm_x0(problem, x_d=[0.9, -0.2], v_d=[-0.3, 0.2])
    _, report = solve(problem, x0, SETTINGS)
    trace = np.array(report.cost_trace)
    assert np.all(np.diff(trace) <= 1e-12 * (1 + np.abs(trace[:-1])))


def test_policy_first_order_consistency():
    problem = arm_problem()
    x0 = arm_x0(problem, q=(0.4, 0.7, -0.5))
    base_policy, base_report = solve(problem, x0, TIGHT)
    assert base_report.converged
    aug = problem.model
    d = aug.target_dim
    direction = np.array([1.0, 0.0])
    errors = {}
    for scale in (1e-3, 1e-2):
        delta_aug = np.concatenate([scale * direction, np.zeros(d)])
        pi = base_policy.u_nom[0] + base_policy.K[0][:, base_policy.aug_start:] @ delta_aug
        x0_pert = x0.copy()
        x0_pert[aug.slice_xd] += scale * direction
        pert_policy, pert_report = solve(problem, x0_pert, TIGHT)
        assert pert_report.converged
        errors[scale] = np.linalg.norm(pi - pert_policy.u_nom[0])
    ratio = errors[1e-2] / errors[1e-3]
    assert 50.0 <= ratio <= 200.0


# ---------------------------------------------------------------- interpolate

def make_simple_policy():
    times = np.array([0.0, 0.1, 0.2])
    x_nom = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    u_nom = np.array([[1.0], [2.0], [3.0]])
    K = np.full((3, 1, 2), 0.5)
    return AffinePolicy(times=times, x_nom=x_nom, u_nom=u_nom, K=K, aug_start=1)


def test_interpolate_at_knot():
    policy = make_simple_policy()
    ev = interpolate(policy, 0.1)
    assert not ev.stale
    assert np.allclose(ev.x_nom, [1.0, 0.0])
    assert np.allclose(ev.u_nom, [2.0])


def test_interpolate_midway_constant_gain():
    policy = make_simple_policy()
    ev = interpolate(policy, 0.05)
    assert np.allclose(ev.K, 0.5)
    assert np.allclose(ev.u_nom, [1.5])


def test_interpolate_beyond_span_clamps_and_flags():
    policy = make_simple_policy()
    ev = interpolate(policy, 0.5)
    assert ev.stale
    assert np.allclose(ev.x_nom, [2.0, 0.0])
    assert np.allclose(ev.u_nom, [3.0])


def test_rollout_divergence_carries_knot():
    from teleop_mpc.exceptions import RolloutDivergenceError
    from teleop_mpc.model import DynamicsModel
    from teleop_mpc.ocp import CostWeights, OcpProblem, ReferenceTrajectory

    class Exploding(DynamicsModel):
        n_x = 1
        n_u = 1
        ee_dim = 1
        lti = False

        def flow(self, x, u, t):
            return x * x + u

        def ee(self, x):
            return x.copy()

    weights = CostWeights.make(1.0, 1.0, 1.0, ee_dim=1, n_u=1)
    ref = ReferenceTrajectory(np.array([0.0, 1.0]), np.zeros((2, 1)))
    problem = OcpProblem(model=Exploding(), weights=weights, horizon=1.0, reference=ref)
    with pytest.raises(RolloutDivergenceError) as excinfo:
        rollout(problem, np.array([3.0]), np.zeros((50, 1)), SETTINGS)
    assert excinfo.value.knot > 0
