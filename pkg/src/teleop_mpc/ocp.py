"""Optimal control problem: tracking costs, relaxed-barrier constraints, quadratization.

Quadratic forms use the ``‖e‖²_Q = eᵀQe`` convention (no 1/2 factor).
Cost Hessians are Gauss-Newton: exact for the quadratic terms, with the
second-order kinematics/constraint curvature dropped, which keeps every
state Hessian positive semi-definite.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ContractViolationError, NumericalError
from .model import AugmentedModel, DynamicsModel, ee_jacobian

Array = np.ndarray


def _sym_matrix(M, n: int, name: str) -> Array:
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = float(M) * np.eye(n)
    elif M.ndim == 1:
        if M.shape != (n,):
            raise ContractViolationError(f"{name}: diagonal must have length {n}")
        M = np.diag(M)
    if M.shape != (n, n):
        raise ContractViolationError(f"{name}: expected ({n},{n}), got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ContractViolationError(f"{name}: must be symmetric")
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class CostWeights:
    """Tracking and input weights. Q's PSD, R strictly positive definite."""

    Q_ee: Array
    R: Array
    Q_terminal: Array

    @staticmethod
    def make(q_ee, r, q_terminal, ee_dim: int, n_u: int) -> "CostWeights":
        Q = _sym_matrix(q_ee, ee_dim, "Q_ee")
        R = _sym_matrix(r, n_u, "R")
        Qt = _sym_matrix(q_terminal, ee_dim, "Q_terminal")
        for name, M in (("Q_ee", Q), ("Q_terminal", Qt)):
            if np.min(np.linalg.eigvalsh(M)) < -1e-10:
                raise ContractViolationError(f"{name}: must be positive semi-definite")
        if np.min(np.linalg.eigvalsh(R)) <= 0:
            raise ContractViolationError("R: must be positive definite")
        return CostWeights(Q, R, Qt)


@dataclass(frozen=True)
class RelaxedBarrier:
    """Relaxed log-barrier parameters: weight mu, relaxation threshold delta."""

    mu: float = 0.1
    delta: float = 0.01

    def __post_init__(self):
        if self.mu <= 0 or self.delta <= 0:
            raise ContractViolationError("barrier requires mu > 0 and delta > 0")


def barrier(g_value: float, params: RelaxedBarrier) -> float:
    """Penalty for the inequality g ≥ 0: -mu·ln(g) above delta, quadratic below.

    The quadratic extension keeps the penalty finite for any g and matches
    value and slope at the switch point (C¹, in fact C²).
    """
    mu, delta = params.mu, params.delta
    if g_value > delta:
        return -mu * np.log(g_value)
    z = (g_value - 2.0 * delta) / delta
    return -mu * np.log(delta) + 0.5 * mu * (z * z - 1.0)


def barrier_derivatives(g_value: float, params: RelaxedBarrier):
    """(value, d/dg, d²/dg²) of the relaxed barrier."""
    mu, delta = params.mu, params.delta
    if g_value > delta:
        return -mu * np.log(g_value), -mu / g_value, mu / (g_value * g_value)
    z = (g_value - 2.0 * delta) / delta
    value = -mu * np.log(delta) + 0.5 * mu * (z * z - 1.0)
    return value, mu * z / delta, mu / (delta * delta)


def barrier_derivatives_batch(g: Array, params: RelaxedBarrier):
    """Vectorized (value, d/dg, d²/dg²); identical branch logic to the scalar form."""
    mu, delta = params.mu, params.delta
    g = np.asarray(g, dtype=float)
    log_branch = g > delta
    g_safe = np.where(log_branch, g, 1.0)
    z = (g - 2.0 * delta) / delta
    value = np.where(log_branch, -mu * np.log(g_safe),
                     -mu * np.log(delta) + 0.5 * mu * (z * z - 1.0))
    d1 = np.where(log_branch, -mu / g_safe, mu * z / delta)
    d2 = np.where(log_branch, mu / (g_safe * g_safe), mu / (delta * delta))
    return value, d1, d2


class InequalityConstraint(ABC):
    """Path constraint g(x, u, t) ≥ 0, penalized through an attached relaxed barrier."""

    barrier: RelaxedBarrier

    @abstractmethod
    def value(self, model: DynamicsModel, x: Array, u: Array, t: float) -> Array:
        """Constraint values, shape (m,)."""

    @abstractmethod
    def jacobians(self, model: DynamicsModel, x: Array, u: Array, t: float):
        """(g_x, g_u) with shapes (m, n_x) and (m, n_u)."""

    def value_batch(self, model: DynamicsModel, X: Array, U: Array, times: Array) -> Array:
        """Constraint values per knot, shape (N, m)."""
        return np.stack([self.value(model, X[i], U[i], float(times[i])) for i in range(X.shape[0])])

    def jacobians_batch(self, model: DynamicsModel, X: Array, U: Array, times: Array):
        """(g_x, g_u) stacks with shapes (N, m, n_x) and (N, m, n_u)."""
        pairs = [self.jacobians(model, X[i], U[i], float(times[i])) for i in range(X.shape[0])]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


class ObstacleConstraint(InequalityConstraint):
    """Keep the end effector outside a circle/sphere: g = ‖ee(x) - center‖ - radius."""

    def __init__(self, center, radius: float, barrier_params: RelaxedBarrier):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.barrier = barrier_params
        if self.radius <= 0:
            raise ContractViolationError("obstacle radius must be positive")

    def value(self, model, x, u, t):
        return np.array([np.linalg.norm(model.ee(x) - self.center) - self.radius])

    def jacobians(self, model, x, u, t):
        diff = model.ee(x) - self.center
        dist = np.linalg.norm(diff)
        if dist < 1e-9:
            # direction undefined at the center; pick a fixed one
            direction = np.zeros_like(diff)
            direction[0] = 1.0
        else:
            direction = diff / dist
        g_x = (direction @ ee_jacobian(model, x)).reshape(1, -1)
        return g_x, np.zeros((1, model.n_u))

    def value_batch(self, model, X, U, times):
        ee = model.ee_batch(X)
        return (np.linalg.norm(ee - self.center, axis=1) - self.radius)[:, None]

    def jacobians_batch(self, model, X, U, times):
        diff = model.ee_batch(X) - self.center
        dist = np.linalg.norm(diff, axis=1)
        safe = np.maximum(dist, 1e-9)
        direction = diff / safe[:, None]
        J = model.ee_jacobian_batch(X)
        g_x = np.einsum("nd,ndk->nk", direction, J)[:, None, :]
        return g_x, np.zeros((X.shape[0], 1, model.n_u))


def obstacle_constraint(center, radius: float, buffer: float, mu: float = 0.1) -> ObstacleConstraint:
    """Obstacle-avoidance constraint whose soft buffer is the barrier relaxation zone.

    The penalty ramps up steeply inside ``radius + buffer``; the quadratic
    extension takes over below the buffer so the cost stays finite even when
    the hard radius is violated.
    """
    if buffer < 0:
        raise ContractViolationError("obstacle buffer must be non-negative")
    delta = buffer if buffer > 0 else 1e-3
    return ObstacleConstraint(center, radius, RelaxedBarrier(mu=mu, delta=delta))


class JointLimitConstraint(InequalityConstraint):
    """Box limits on the plant configuration block: lo ≤ q ≤ hi."""

    def __init__(self, lower, upper, barrier_params: RelaxedBarrier = RelaxedBarrier(mu=0.05, delta=0.05)):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ContractViolationError("joint limits: need lower < upper elementwise")
        self.barrier = barrier_params

    def _q(self, model, x):
        n = self.lower.size
        if isinstance(model, AugmentedModel):
            return x[model.slice_plant][:n]
        return x[:n]

    def value(self, model, x, u, t):
        q = self._q(model, x)
        return np.concatenate([q - self.lower, self.upper - q])

    def jacobians(self, model, x, u, t):
        n = self.lower.size
        g_x = np.zeros((2 * n, model.n_x))
        g_x[:n, :n] = np.eye(n)
        g_x[n:, :n] = -np.eye(n)
        return g_x, np.zeros((2 * n, model.n_u))

    def value_batch(self, model, X, U, times):
        n = self.lower.size
        Q = X[:, :n]
        return np.concatenate([Q - self.lower, self.upper - Q], axis=1)

    def jacobians_batch(self, model, X, U, times):
        g_x, g_u = self.jacobians(model, X[0], U[0], float(times[0]))
        N = X.shape[0]
        return (
            np.broadcast_to(g_x, (N,) + g_x.shape).copy(),
            np.broadcast_to(g_u, (N,) + g_u.shape).copy(),
        )


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Sampled end-effector position reference over the horizon."""

    times: Array
    positions: Array

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        positions = np.asarray(self.positions, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
            raise ContractViolationError("reference times must be strictly increasing, length >= 2")
        if positions.shape[0] != times.size:
            raise ContractViolationError("reference sample count mismatch")

    def at(self, t: float) -> Array:
        return np.array(
            [np.interp(t, self.times, self.positions[:, j]) for j in range(self.positions.shape[1])]
        )


@dataclass(frozen=True)
class OcpProblem:
    """Tracking OCP over a fixed horizon.

    Exactly one reference source is active: an external ``reference``
    trajectory, or (when ``reference`` is None) the target block of the
    augmented state itself.
    """

    model: DynamicsModel
    weights: CostWeights
    horizon: float
    constraints: tuple = ()
    reference: ReferenceTrajectory | None = None

    def __post_init__(self):
        if self.horizon <= 0:
            raise ContractViolationError("horizon must be positive")
        if self.reference is None:
            if not isinstance(self.model, AugmentedModel):
                raise ContractViolationError("augmented-state tracking requires an augmented model")
        else:
            t = self.reference.times
            if t[0] > 1e-12 or t[-1] < self.horizon - 1e-9:
                raise ContractViolationError("reference must span [0, horizon]")
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def tracks_augmented(self) -> bool:
        return self.reference is None

    def with_reference(self, reference: ReferenceTrajectory | None) -> "OcpProblem":
        return replace(self, reference=reference)

    def tracking_error(self, x: Array, t: float) -> Array:
        ee = self.model.ee(x)
        if self.tracks_augmented:
            return ee - x[self.model.slice_xd]
        return ee - self.reference.at(t)

    def tracking_jacobian(self, x: Array) -> Array:
        J = ee_jacobian(self.model, x)
        if self.tracks_augmented:
            J = J.copy()
            d = self.model.target_dim
            J[:, self.model.slice_xd] -= np.eye(d)
        return J


@dataclass(frozen=True)
class StageQuadratic:
    """Second-order expansion of the stage cost at a point (x, u)."""

    q0: float
    q_x: Array
    q_u: Array
    Q_xx: Array
    Q_uu: Array
    Q_ux: Array


def _check_time(problem: OcpProblem, t: float):
    if t < -1e-9 or t > problem.horizon + 1e-9:
        raise ContractViolationError(f"t={t} outside horizon [0, {problem.horizon}]")


def stage_cost(problem: OcpProblem, x: Array, u: Array, t: float) -> float:
    """Running cost: tracking + input regularization + barrier penalties."""
    _check_time(problem, t)
    err = problem.tracking_error(x, t)
    w = problem.weights
    cost = float(err @ w.Q_ee @ err + u @ w.R @ u)
    for con in problem.constraints:
        for g in con.value(problem.model, x, u, t):
            cost += barrier(float(g), con.barrier)
    return cost


def terminal_cost(problem: OcpProblem, x: Array) -> float:
    err = problem.tracking_error(x, problem.horizon)
    return float(err @ problem.weights.Q_terminal @ err)


def quadratize(problem: OcpProblem, x: Array, u: Array, t: float) -> StageQuadratic:
    """Quadratic model of the stage cost; Q_uu floored to min eigenvalue 1e-6."""
    _check_time(problem, t)
    n_x, n_u = problem.model.n_x, problem.model.n_u
    w = problem.weights
    err = problem.tracking_error(x, t)
    J = problem.tracking_jacobian(x)
    q0 = float(err @ w.Q_ee @ err + u @ w.R @ u)
    q_x = 2.0 * (J.T @ (w.Q_ee @ err))
    Q_xx = 2.0 * (J.T @ w.Q_ee @ J)
    q_u = 2.0 * (w.R @ u)
    Q_uu = 2.0 * w.R.copy()
    Q_ux = np.zeros((n_u, n_x))
    for con in problem.constraints:
        g = con.value(problem.model, x, u, t)
        g_x, g_u = con.jacobians(problem.model, x, u, t)
        for i in range(g.size):
            b, db, d2b = barrier_derivatives(float(g[i]), con.barrier)
            q0 += b
            q_x += db * g_x[i]
            q_u += db * g_u[i]
            Q_xx += d2b * np.outer(g_x[i], g_x[i])
            Q_uu += d2b * np.outer(g_u[i], g_u[i])
            Q_ux += d2b * np.outer(g_u[i], g_x[i])
    if not (np.isfinite(q0) and np.all(np.isfinite(q_x)) and np.all(np.isfinite(q_u))):
        raise NumericalError(f"non-finite cost derivative at t={t}")
    min_eig = float(np.min(np.linalg.eigvalsh(Q_uu)))
    if min_eig < 1e-6:
        Q_uu = Q_uu + (1e-6 - min_eig) * np.eye(n_u)
    return StageQuadratic(q0, q_x, q_u, Q_xx, Q_uu, Q_ux)


def terminal_quadratize(problem: OcpProblem, x: Array):
    """(value, gradient, Hessian) of the terminal cost."""
    err = problem.tracking_error(x, problem.horizon)
    J = problem.tracking_jacobian(x)
    Qt = problem.weights.Q_terminal
    return (
        float(err @ Qt @ err),
        2.0 * (J.T @ (Qt @ err)),
        2.0 * (J.T @ Qt @ J),
    )


# ------------------------------------------------------------------ batch paths
# Vectorized equivalents of stage_cost / quadratize used by the solver's hot
# loop. They must agree with the scalar forms; tests assert that.

def tracking_errors_batch(problem: OcpProblem, X: Array, times: Array) -> Array:
    ee = problem.model.ee_batch(X)
    if problem.tracks_augmented:
        return ee - X[:, problem.model.slice_xd]
    ref = np.stack(
        [np.interp(times, problem.reference.times, problem.reference.positions[:, j])
         for j in range(problem.reference.positions.shape[1])],
        axis=1,
    )
    return ee - ref


def tracking_jacobians_batch(problem: OcpProblem, X: Array) -> Array:
    J = problem.model.ee_jacobian_batch(X)
    if problem.tracks_augmented:
        d = problem.model.target_dim
        J[:, :, problem.model.slice_xd] -= np.eye(d)
    return J


def stage_costs_batch(problem: OcpProblem, X: Array, U: Array, times: Array) -> Array:
    """Stage cost at each knot, shape (N,)."""
    err = tracking_errors_batch(problem, X, times)
    w = problem.weights
    costs = np.einsum("nd,de,ne->n", err, w.Q_ee, err) + np.einsum("nu,uv,nv->n", U, w.R, U)
    for con in problem.constraints:
        g = con.value_batch(problem.model, X, U, times)
        b, _, _ = barrier_derivatives_batch(g, con.barrier)
        costs += b.sum(axis=1)
    return costs


@dataclass(frozen=True)
class StageQuadraticBatch:
    q0: Array
    q_x: Array
    q_u: Array
    Q_xx: Array
    Q_uu: Array
    Q_ux: Array


def quadratize_batch(problem: OcpProblem, X: Array, U: Array, times: Array) -> StageQuadraticBatch:
    """Vectorized quadratize over a knot grid, same floor rule on Q_uu."""
    N = X.shape[0]
    n_x, n_u = problem.model.n_x, problem.model.n_u
    w = problem.weights
    err = tracking_errors_batch(problem, X, times)
    J = tracking_jacobians_batch(problem, X)
    JQ = np.einsum("ndk,de->nke", J, w.Q_ee)
    q0 = np.einsum("nd,de,ne->n", err, w.Q_ee, err) + np.einsum("nu,uv,nv->n", U, w.R, U)
    q_x = 2.0 * np.einsum("nke,ne->nk", JQ, err)
    Q_xx = 2.0 * np.einsum("nke,nef->nkf", JQ, J)
    q_u = 2.0 * U @ w.R
    Q_uu = np.broadcast_to(2.0 * w.R, (N, n_u, n_u)).copy()
    Q_ux = np.zeros((N, n_u, n_x))
    for con in problem.constraints:
        g = con.value_batch(problem.model, X, U, times)
        g_x, g_u = con.jacobians_batch(problem.model, X, U, times)
        b, db, d2b = barrier_derivatives_batch(g, con.barrier)
        q0 += b.sum(axis=1)
        q_x += np.einsum("nm,nmk->nk", db, g_x)
        q_u += np.einsum("nm,nmu->nu", db, g_u)
        Q_xx += np.einsum("nm,nmk,nml->nkl", d2b, g_x, g_x)
        Q_uu += np.einsum("nm,nmu,nmv->nuv", d2b, g_u, g_u)
        Q_ux += np.einsum("nm,nmu,nmk->nuk", d2b, g_u, g_x)
    min_eig = np.linalg.eigvalsh(Q_uu)[:, 0]
    deficient = min_eig < 1e-6
    if np.any(deficient):
        shift = np.where(deficient, 1e-6 - min_eig, 0.0)
        Q_uu = Q_uu + shift[:, None, None] * np.eye(n_u)
    if not (np.all(np.isfinite(q0)) and np.all(np.isfinite(q_x)) and np.all(np.isfinite(q_u))):
        raise NumericalError("non-finite cost derivative in batch quadratize")
    return StageQuadraticBatch(q0, q_x, q_u, Q_xx, Q_uu, Q_ux)
