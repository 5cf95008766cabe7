"""Iterative LQR on a fixed knot grid.

Solves the tracking OCP by alternating a forward rollout, an LQ backward pass
(discrete Riccati recursion on the linearized/quadratized problem), and a
backtracking line search. The output is a time-varying affine policy

    u(x, t) = u_nom(t) + K(t) (x - x_nom(t))

whose gain columns are partitioned at ``aug_start`` into plant and target
blocks.

Transcription: knots at uniform spacing dt over [0, T], zero-order-hold
inputs, RK4 integration between knots (collapsed to its exact affine map for
LTI models). The cost integral uses trapezoidal knot weights; the terminal
half-weight stage is evaluated at zero input and folded into the terminal
cost.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ContractViolationError, RolloutDivergenceError, SolverError
from .model import lti_discretization, rk4_jacobians, rk4_step
from .ocp import (
    OcpProblem,
    quadratize,
    quadratize_batch,
    stage_costs_batch,
    terminal_cost,
    terminal_quadratize,
)

Array = np.ndarray


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 50
    convergence_tol: float = 1e-8      # on relative cost decrease
    line_search_factor: float = 0.5
    line_search_floor: float = 1e-3
    substeps: int = 1                  # RK4 substeps per knot interval
    dt_knot: float = 0.02

    def __post_init__(self):
        if self.max_iterations < 1 or self.convergence_tol <= 0 or self.substeps < 1:
            raise ContractViolationError("solver settings must be positive")
        if not 0 < self.line_search_factor < 1 or self.line_search_floor <= 0:
            raise ContractViolationError("line search factor must lie in (0,1), floor > 0")
        if self.dt_knot <= 0:
            raise ContractViolationError("dt_knot must be positive")


@dataclass(frozen=True)
class AffinePolicy:
    """Time-indexed nominal trajectory plus feedback gains.

    ``times`` are absolute (sim-clock) knot instants. ``aug_start`` is the
    column where target-state gains begin; ``aug_start == n_x`` marks the
    degenerate unaugmented case.
    """

    times: Array
    x_nom: Array
    u_nom: Array
    K: Array
    aug_start: int

    def __post_init__(self):
        n = self.times.shape[0]
        if n < 2 or np.any(np.diff(self.times) <= 0):
            raise ContractViolationError("policy needs >= 2 strictly increasing knots")
        n_x = self.x_nom.shape[1]
        n_u = self.u_nom.shape[1]
        if self.x_nom.shape[0] != n or self.u_nom.shape[0] != n or self.K.shape != (n, n_u, n_x):
            raise ContractViolationError("policy arrays are dimension-inconsistent")
        if not 0 < self.aug_start <= n_x:
            raise ContractViolationError("aug_start out of range")

    @property
    def n_x(self) -> int:
        return self.x_nom.shape[1]

    @property
    def n_u(self) -> int:
        return self.u_nom.shape[1]

    @property
    def span(self):
        return float(self.times[0]), float(self.times[-1])


class PolicyEval(NamedTuple):
    x_nom: Array
    u_nom: Array
    K: Array
    stale: bool


def interpolate(policy: AffinePolicy, t: float) -> PolicyEval:
    """Evaluate nominal state/input and gain at ``t``, linearly between knots.

    Beyond the final knot the terminal values are held and ``stale`` is set.
    """
    times = policy.times
    stale = t > times[-1] + 1e-12
    if t <= times[0]:
        return PolicyEval(policy.x_nom[0], policy.u_nom[0], policy.K[0], False)
    if t >= times[-1]:
        return PolicyEval(policy.x_nom[-1], policy.u_nom[-1], policy.K[-1], stale)
    i = int(np.searchsorted(times, t, side="right") - 1)
    w = (t - times[i]) / (times[i + 1] - times[i])
    return PolicyEval(
        (1 - w) * policy.x_nom[i] + w * policy.x_nom[i + 1],
        (1 - w) * policy.u_nom[i] + w * policy.u_nom[i + 1],
        (1 - w) * policy.K[i] + w * policy.K[i + 1],
        False,
    )


def interpolate_batch(policy: AffinePolicy, ts: Array):
    """Vectorized interpolation at many instants: (x_nom, u_nom, K) stacks."""
    times = policy.times
    ts = np.clip(ts, times[0], times[-1])
    idx = np.clip(np.searchsorted(times, ts, side="right") - 1, 0, times.size - 2)
    w = ((ts - times[idx]) / (times[idx + 1] - times[idx]))[:, None]
    X = (1 - w) * policy.x_nom[idx] + w * policy.x_nom[idx + 1]
    U = (1 - w) * policy.u_nom[idx] + w * policy.u_nom[idx + 1]
    K = (1 - w[:, :, None]) * policy.K[idx] + w[:, :, None] * policy.K[idx + 1]
    return X, U, K


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_cost: float
    cost_trace: tuple
    converged: bool
    solve_time: float


@dataclass(frozen=True)
class BackwardInfo:
    k_ff: Array                 # feedforward corrections, shape (N, n_u)
    expected_improvement: float
    max_hessian_asymmetry: float = 0.0   # worst |V_xx - V_xxᵀ| seen before re-symmetrization


def knot_grid(problem: OcpProblem, settings: SolverSettings) -> Array:
    """Uniform knot times over [0, T]; dt adjusted to divide T exactly."""
    n_intervals = max(2, int(round(problem.horizon / settings.dt_knot)))
    return np.linspace(0.0, problem.horizon, n_intervals + 1)


def _aug_start(problem: OcpProblem) -> int:
    return getattr(problem.model, "aug_start", problem.model.n_x)


class _Stepper:
    """One-knot integrator; collapses to an exact affine map for LTI models."""

    def __init__(self, model, dt: float, substeps: int):
        self.model = model
        self.dt = dt
        self.substeps = substeps
        if model.lti:
            self.A, self.B, self.c = lti_discretization(model, dt, substeps)
        else:
            self.A = None

    def step(self, x: Array, u: Array, t: float) -> Array:
        if self.A is not None:
            return self.A @ x + self.B @ u + self.c
        return rk4_step(self.model, x, u, t, self.dt, self.substeps)

    def jacobians(self, X: Array, U: Array, times: Array):
        N = U.shape[0]
        if self.A is not None:
            return [self.A] * N, [self.B] * N
        As, Bs = [], []
        for i in range(N):
            A, B = rk4_jacobians(self.model, X[i], U[i], float(times[i]), self.dt, self.substeps)
            As.append(A)
            Bs.append(B)
        return As, Bs


def trajectory_cost(problem: OcpProblem, times: Array, X: Array, U: Array) -> float:
    """Trapezoidal cost integral plus terminal cost on the knot grid."""
    dt = times[1] - times[0]
    N = U.shape[0]
    U_ext = np.vstack([U, np.zeros((1, problem.model.n_u))])
    weights = np.full(N + 1, dt)
    weights[0] = 0.5 * dt
    weights[N] = 0.5 * dt
    costs = stage_costs_batch(problem, X, U_ext, times)
    return float(weights @ costs + terminal_cost(problem, X[N]))


def _check_finite_traj(X: Array):
    finite = np.all(np.isfinite(X), axis=1)
    if not finite.all():
        raise RolloutDivergenceError(int(np.argmin(finite)))


def _rollout_impl(problem, x0, controls, settings, t0, times, stepper):
    N = times.size - 1
    n_x, n_u = problem.model.n_x, problem.model.n_u
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n_x,):
        raise ContractViolationError(f"x0: expected shape ({n_x},), got {x0.shape}")
    X = np.empty((N + 1, n_x))
    U = np.empty((N, n_u))
    X[0] = x0
    if isinstance(controls, AffinePolicy):
        Xn, Un, Kn = interpolate_batch(controls, t0 + times)
        for i in range(N):
            U[i] = Un[i] + Kn[i] @ (X[i] - Xn[i])
            X[i + 1] = stepper.step(X[i], U[i], float(times[i]))
    else:
        U[:] = np.asarray(controls, dtype=float)
        for i in range(N):
            X[i + 1] = stepper.step(X[i], U[i], float(times[i]))
    _check_finite_traj(X)
    return X, U, trajectory_cost(problem, times, X, U)


def rollout(problem: OcpProblem, x0: Array, controls, settings: SolverSettings, t0: float = 0.0):
    """Integrate the flow from x0 under an input sequence or an affine policy.

    ``controls`` is either an (N, n_u) open-loop input array on the knot grid
    or an AffinePolicy evaluated closed-loop at absolute times ``t0 + τ``.
    Returns (states on the knot grid, inputs actually applied, total cost).
    """
    times = knot_grid(problem, settings)
    stepper = _Stepper(problem.model, times[1] - times[0], settings.substeps)
    return _rollout_impl(problem, x0, controls, settings, t0, times, stepper)


def _terminal_expansion(problem: OcpProblem, x_N: Array, half_weight: float):
    v0, v_x, V_xx = terminal_quadratize(problem, x_N)
    sq = quadratize(problem, x_N, np.zeros(problem.model.n_u), problem.horizon)
    return v_x + half_weight * sq.q_x, V_xx + half_weight * sq.Q_xx


def backward_pass(problem: OcpProblem, times: Array, X: Array, U: Array,
                  settings: SolverSettings, t0: float = 0.0, _stepper=None):
    """Riccati recursion over the linearized/quadratized problem.

    Returns a candidate AffinePolicy (u_nom already includes the full
    feedforward correction) and a BackwardInfo with the raw corrections and
    the expected cost improvement for a unit step.
    """
    N = U.shape[0]
    n_x, n_u = problem.model.n_x, problem.model.n_u
    dt = times[1] - times[0]
    w = np.full(N, dt)
    w[0] = 0.5 * dt
    stepper = _stepper or _Stepper(problem.model, dt, settings.substeps)
    As, Bs = stepper.jacobians(X, U, times)
    sq = quadratize_batch(problem, X[:N], U, times[:N])

    V_x, V_xx = _terminal_expansion(problem, X[N], 0.5 * dt)
    K = np.empty((N + 1, n_u, n_x))
    k = np.empty((N, n_u))
    dV1 = 0.0
    dV2 = 0.0
    asym = 0.0
    for i in range(N - 1, -1, -1):
        A, B = As[i], Bs[i]
        wi = w[i]
        Q_x = wi * sq.q_x[i] + A.T @ V_x
        Q_u = wi * sq.q_u[i] + B.T @ V_x
        V_A = V_xx @ A
        Q_xx = wi * sq.Q_xx[i] + A.T @ V_A
        Q_uu = wi * sq.Q_uu[i] + B.T @ (V_xx @ B)
        Q_ux = wi * sq.Q_ux[i] + B.T @ V_A
        try:
            np.linalg.cholesky(Q_uu)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"Q_uu not positive definite at knot {i}") from exc
        sol = np.linalg.solve(Q_uu, np.concatenate([Q_u[:, None], Q_ux], axis=1))
        k[i] = -sol[:, 0]
        K[i] = -sol[:, 1:]
        dV1 += float(k[i] @ Q_u)
        dV2 += float(k[i] @ Q_uu @ k[i])
        KtQuu = K[i].T @ Q_uu
        V_x = Q_x + KtQuu @ k[i] + K[i].T @ Q_u + Q_ux.T @ k[i]
        V_xx = Q_xx + KtQuu @ K[i] + K[i].T @ Q_ux + Q_ux.T @ K[i]
        asym = max(asym, float(np.max(np.abs(V_xx - V_xx.T))))
        V_xx = 0.5 * (V_xx + V_xx.T)
    K[N] = K[N - 1]

    u_nom = np.vstack([U + k, (U[-1] + k[-1])[None, :]])
    policy = AffinePolicy(
        times=t0 + times, x_nom=X.copy(), u_nom=u_nom, K=K, aug_start=_aug_start(problem)
    )
    expected = -(dV1 + 0.5 * dV2)
    return policy, BackwardInfo(k_ff=k, expected_improvement=expected, max_hessian_asymmetry=asym)


@dataclass(frozen=True)
class LineSearchResult:
    X: Array | None
    U: Array | None
    cost: float
    alpha: float | None

    @property
    def accepted(self) -> bool:
        return self.alpha is not None


def line_search(problem: OcpProblem, x0: Array, current, candidate: AffinePolicy,
                settings: SolverSettings, _stepper=None):
    """Backtrack on the feedforward correction until the rollout cost decreases.

    ``current`` is the accepted (X, U, cost) triple. Failure (floor reached
    without decrease) is reported as a result with alpha None, not an error.
    """
    X_cur, U_cur, cost_cur = current
    times = knot_grid(problem, settings)
    N = U_cur.shape[0]
    stepper = _stepper or _Stepper(problem.model, times[1] - times[0], settings.substeps)
    k = candidate.u_nom[:N] - U_cur
    accept_tol = 1e-12 * (1.0 + abs(cost_cur))
    alpha = 1.0
    while alpha >= settings.line_search_floor:
        X = np.empty_like(X_cur)
        U = np.empty_like(U_cur)
        X[0] = x0
        diverged = False
        for i in range(N):
            U[i] = U_cur[i] + alpha * k[i] + candidate.K[i] @ (X[i] - X_cur[i])
            X[i + 1] = stepper.step(X[i], U[i], float(times[i]))
            if not np.all(np.isfinite(X[i + 1])):
                diverged = True
                break
        if not diverged:
            cost = trajectory_cost(problem, times, X, U)
            if np.isfinite(cost) and cost <= cost_cur + accept_tol:
                return LineSearchResult(X, U, cost, alpha)
        alpha *= settings.line_search_factor
    return LineSearchResult(None, None, cost_cur, None)


def solve(problem: OcpProblem, x0: Array, settings: SolverSettings,
          warm_start: AffinePolicy | None = None, t0: float = 0.0):
    """Iterate rollout / backward pass / line search to convergence.

    The returned policy's gains are always recomputed around the final
    nominal trajectory, so (x_nom, u_nom, K) is a consistent triple.
    """
    started = time.perf_counter()
    times = knot_grid(problem, settings)
    N = times.size - 1
    x0 = np.asarray(x0, dtype=float)
    stepper = _Stepper(problem.model, times[1] - times[0], settings.substeps)

    X = U = None
    if warm_start is not None:
        try:
            X, U, cost = _rollout_impl(problem, x0, warm_start, settings, t0, times, stepper)
        except RolloutDivergenceError:
            X = None
    if X is None:
        try:
            X, U, cost = _rollout_impl(
                problem, x0, np.zeros((N, problem.model.n_u)), settings, t0, times, stepper
            )
        except RolloutDivergenceError as exc:
            raise SolverError("initial rollout diverged even from zero input") from exc

    trace = [cost]
    iterations = 0
    converged = False
    flagged = False
    policy = None
    for _ in range(settings.max_iterations + 1):
        policy, info = backward_pass(problem, times, X, U, settings, t0=t0, _stepper=stepper)
        # gains are now consistent with (X, U); safe to stop here
        if flagged or info.expected_improvement <= settings.convergence_tol * (1.0 + abs(cost)):
            converged = True
            break
        if iterations >= settings.max_iterations:
            break
        ls = line_search(problem, x0, (X, U, cost), policy, settings, _stepper=stepper)
        if not ls.accepted:
            break
        rel = (cost - ls.cost) / max(1.0, abs(cost))
        X, U, cost = ls.X, ls.U, ls.cost
        iterations += 1
        trace.append(cost)
        if rel < settings.convergence_tol:
            flagged = True

    final = AffinePolicy(
        times=t0 + times,
        x_nom=X.copy(),
        u_nom=np.vstack([U, U[-1][None, :]]),
        K=policy.K,
        aug_start=_aug_start(problem),
    )
    report = SolveReport(
        iterations=iterations,
        final_cost=float(cost),
        cost_trace=tuple(float(c) for c in trace),
        converged=converged,
        solve_time=time.perf_counter() - started,
    )
    return final, report
