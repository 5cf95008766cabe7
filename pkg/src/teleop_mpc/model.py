"""Plant and target dynamics.

State vectors are plain 1-D numpy arrays. The augmented layout is always
plant-then-target, ``x = (x_plant, x_d, v_d)``; gain partitioning downstream
indexes into this layout, so the order is part of the public contract.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolationError, NumericalError

Array = np.ndarray


def _vector(x, n: int, name: str) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ContractViolationError(f"{name}: expected shape ({n},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolationError(f"{name}: non-finite entries")
    return x


@dataclass(frozen=True)
class AugmentedTarget:
    """Operator-commanded end-effector position and velocity (x_d, v_d)."""

    x_d: Array
    v_d: Array

    @staticmethod
    def make(x_d, v_d, v_max: float = 1.0) -> "AugmentedTarget":
        """Build a target, clamping ``|v_d|`` to ``v_max`` by norm scaling."""
        x_d = np.asarray(x_d, dtype=float)
        v_d = np.asarray(v_d, dtype=float)
        if x_d.shape != v_d.shape or x_d.ndim != 1:
            raise ContractViolationError("target position/velocity shape mismatch")
        if not (np.all(np.isfinite(x_d)) and np.all(np.isfinite(v_d))):
            raise ContractViolationError("target has non-finite entries")
        speed = float(np.linalg.norm(v_d))
        if speed > v_max:
            v_d = v_d * (v_max / speed)
        return AugmentedTarget(x_d, v_d)

    @property
    def dim(self) -> int:
        return self.x_d.shape[0]

    def vector(self) -> Array:
        return np.concatenate([self.x_d, self.v_d])


class DynamicsModel(ABC):
    """Continuous-time dynamics with an end-effector output map.

    ``flow`` must be deterministic and twice differentiable on the admissible
    domain. Models with constant flow Jacobians set ``lti = True`` so callers
    may cache discrete linearizations.
    """

    n_x: int
    n_u: int
    ee_dim: int
    lti: bool = False

    @abstractmethod
    def flow(self, x: Array, u: Array, t: float) -> Array:
        """Time derivative of the state."""

    @abstractmethod
    def ee(self, x: Array) -> Array:
        """End-effector position in the world frame."""

    def flow_jacobians(self, x: Array, u: Array, t: float):
        """Analytic (A, B) = (df/dx, df/du), or None to fall back to finite differences."""
        return None

    def ee_jacobian(self, x: Array):
        """Analytic d ee/dx, or None to fall back to finite differences."""
        return None

    def ee_batch(self, X: Array) -> Array:
        """End-effector positions for a stack of states, shape (N, ee_dim)."""
        return np.stack([self.ee(x) for x in X])

    def ee_jacobian_batch(self, X: Array) -> Array:
        """End-effector Jacobians for a stack of states, shape (N, ee_dim, n_x)."""
        return np.stack([ee_jacobian(self, x) for x in X])


class DoubleIntegrator(DynamicsModel):
    """Point-mass end-effector: state (p, v), input a, with p̈ = a."""

    lti = True

    def __init__(self, dim: int = 3):
        self.dim = dim
        self.n_x = 2 * dim
        self.n_u = dim
        self.ee_dim = dim
        self._A = np.zeros((self.n_x, self.n_x))
        self._A[:dim, dim:] = np.eye(dim)
        self._B = np.zeros((self.n_x, self.n_u))
        self._B[dim:, :] = np.eye(dim)
        self._J_ee = np.zeros((dim, self.n_x))
        self._J_ee[:, :dim] = np.eye(dim)

    def flow(self, x, u, t):
        return np.concatenate([x[self.dim:], u])

    def ee(self, x):
        return x[: self.dim].copy()

    def flow_jacobians(self, x, u, t):
        return self._A, self._B

    def ee_jacobian(self, x):
        return self._J_ee.copy()

    def ee_batch(self, X):
        return X[:, : self.dim].copy()

    def ee_jacobian_batch(self, X):
        return np.broadcast_to(self._J_ee, (X.shape[0],) + self._J_ee.shape).copy()


class PlanarArm(DynamicsModel):
    """Planar serial-chain arm with velocity-controlled joints: q̇ = u.

    The end effector is the tip of the chain, base at the configured origin.
    """

    lti = True

    def __init__(self, link_lengths, base=(0.0, 0.0)):
        self.lengths = np.asarray(link_lengths, dtype=float)
        if self.lengths.ndim != 1 or self.lengths.size < 1 or np.any(self.lengths <= 0):
            raise ContractViolationError("link lengths must be a positive vector")
        self.base = np.asarray(base, dtype=float)
        self.n_x = self.lengths.size
        self.n_u = self.lengths.size
        self.ee_dim = 2
        self._A = np.zeros((self.n_x, self.n_x))
        self._B = np.eye(self.n_u)

    def flow(self, x, u, t):
        return u.copy()

    def ee(self, x):
        angles = np.cumsum(x)
        return self.base + np.array(
            [np.sum(self.lengths * np.cos(angles)), np.sum(self.lengths * np.sin(angles))]
        )

    def flow_jacobians(self, x, u, t):
        return self._A, self._B

    def ee_jacobian(self, x):
        angles = np.cumsum(x)
        lx = self.lengths * np.cos(angles)
        ly = self.lengths * np.sin(angles)
        # column j sums contributions of links j..k-1 (joint j rotates everything distal)
        J = np.zeros((2, self.n_x))
        J[0, :] = -np.cumsum(ly[::-1])[::-1]
        J[1, :] = np.cumsum(lx[::-1])[::-1]
        return J

    def ee_batch(self, X):
        angles = np.cumsum(X, axis=1)
        return self.base + np.stack(
            [
                np.sum(self.lengths * np.cos(angles), axis=1),
                np.sum(self.lengths * np.sin(angles), axis=1),
            ],
            axis=1,
        )

    def ee_jacobian_batch(self, X):
        angles = np.cumsum(X, axis=1)
        lx = self.lengths * np.cos(angles)
        ly = self.lengths * np.sin(angles)
        J = np.empty((X.shape[0], 2, self.n_x))
        J[:, 0, :] = -np.cumsum(ly[:, ::-1], axis=1)[:, ::-1]
        J[:, 1, :] = np.cumsum(lx[:, ::-1], axis=1)[:, ::-1]
        return J


class AugmentedModel(DynamicsModel):
    """Wraps a plant model with target states (x_d, v_d) obeying ẋ_d = v_d, v̇_d = 0."""

    def __init__(self, plant: DynamicsModel):
        self.plant = plant
        self.target_dim = plant.ee_dim
        self.aug_start = plant.n_x
        self.n_x = plant.n_x + 2 * self.target_dim
        self.n_u = plant.n_u
        self.ee_dim = plant.ee_dim
        self.lti = plant.lti
        d = self.target_dim
        self.slice_plant = slice(0, plant.n_x)
        self.slice_xd = slice(plant.n_x, plant.n_x + d)
        self.slice_vd = slice(plant.n_x + d, plant.n_x + 2 * d)

    def augment_state(self, x_plant: Array, target: AugmentedTarget) -> Array:
        return np.concatenate([x_plant, target.x_d, target.v_d])

    def split(self, x: Array):
        return x[self.slice_plant], x[self.slice_xd], x[self.slice_vd]

    def flow(self, x, u, t):
        dx = np.empty(self.n_x)
        dx[self.slice_plant] = self.plant.flow(x[self.slice_plant], u, t)
        dx[self.slice_xd] = x[self.slice_vd]
        dx[self.slice_vd] = 0.0
        return dx

    def ee(self, x):
        return self.plant.ee(x[self.slice_plant])

    def flow_jacobians(self, x, u, t):
        inner = self.plant.flow_jacobians(x[self.slice_plant], u, t)
        if inner is None:
            return None
        A_p, B_p = inner
        d = self.target_dim
        A = np.zeros((self.n_x, self.n_x))
        A[self.slice_plant, self.slice_plant] = A_p
        A[self.slice_xd, self.slice_vd] = np.eye(d)
        B = np.zeros((self.n_x, self.n_u))
        B[self.slice_plant, :] = B_p
        return A, B

    def ee_jacobian(self, x):
        inner = self.plant.ee_jacobian(x[self.slice_plant])
        if inner is None:
            return None
        J = np.zeros((self.ee_dim, self.n_x))
        J[:, self.slice_plant] = inner
        return J

    def ee_batch(self, X):
        return self.plant.ee_batch(X[:, self.slice_plant])

    def ee_jacobian_batch(self, X):
        J = np.zeros((X.shape[0], self.ee_dim, self.n_x))
        J[:, :, self.slice_plant] = self.plant.ee_jacobian_batch(X[:, self.slice_plant])
        return J


def augment_model(model: DynamicsModel) -> AugmentedModel:
    """Append (x_d, v_d) target states with constant-velocity prediction dynamics."""
    return AugmentedModel(model)


def eval_flow(model: DynamicsModel, x, u, t: float) -> Array:
    """Evaluate ẋ = f(x, u, t) with dimension/finiteness checks."""
    x = _vector(x, model.n_x, "state")
    u = _vector(u, model.n_u, "input")
    return model.flow(x, u, t)


def forward_kinematics(model: DynamicsModel, x) -> Array:
    """World-frame end-effector position for the given state."""
    x = _vector(x, model.n_x, "state")
    return model.ee(x)


def _fd_step(v: Array) -> Array:
    return 1e-6 * np.maximum(1.0, np.abs(v))


def fd_flow_jacobians(model: DynamicsModel, x: Array, u: Array, t: float):
    """Central finite differences of the flow map."""
    hx = _fd_step(x)
    A = np.empty((model.n_x, model.n_x))
    for j in range(model.n_x):
        e = np.zeros(model.n_x)
        e[j] = hx[j]
        A[:, j] = (model.flow(x + e, u, t) - model.flow(x - e, u, t)) / (2 * hx[j])
    hu = _fd_step(u)
    B = np.empty((model.n_x, model.n_u))
    for j in range(model.n_u):
        e = np.zeros(model.n_u)
        e[j] = hu[j]
        B[:, j] = (model.flow(x, u + e, t) - model.flow(x, u - e, t)) / (2 * hu[j])
    return A, B


def fd_ee_jacobian(model: DynamicsModel, x: Array) -> Array:
    h = _fd_step(x)
    J = np.empty((model.ee_dim, model.n_x))
    for j in range(model.n_x):
        e = np.zeros(model.n_x)
        e[j] = h[j]
        J[:, j] = (model.ee(x + e) - model.ee(x - e)) / (2 * h[j])
    return J


def linearize(model: DynamicsModel, x, u, t: float):
    """(A, B) = (∂f/∂x, ∂f/∂u), analytic when the model provides it, else central differences."""
    x = _vector(x, model.n_x, "state")
    u = _vector(u, model.n_u, "input")
    jac = model.flow_jacobians(x, u, t)
    if jac is None:
        jac = fd_flow_jacobians(model, x, u, t)
    A, B = jac
    for name, M in (("A", A), ("B", B)):
        if not np.all(np.isfinite(M)):
            i, j = np.argwhere(~np.isfinite(M))[0]
            raise NumericalError(f"non-finite Jacobian entry {name}[{i},{j}]")
    return A, B


def ee_jacobian(model: DynamicsModel, x: Array) -> Array:
    J = model.ee_jacobian(x)
    if J is None:
        J = fd_ee_jacobian(model, x)
    return J


def rk4_step(model: DynamicsModel, x: Array, u: Array, t: float, dt: float, substeps: int = 1) -> Array:
    """Fixed-step RK4 integration of the flow under a zero-order-hold input."""
    h = dt / substeps
    for k in range(substeps):
        tk = t + k * h
        k1 = model.flow(x, u, tk)
        k2 = model.flow(x + 0.5 * h * k1, u, tk + 0.5 * h)
        k3 = model.flow(x + 0.5 * h * k2, u, tk + 0.5 * h)
        k4 = model.flow(x + h * k3, u, tk + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def rk4_jacobians(model: DynamicsModel, x: Array, u: Array, t: float, dt: float, substeps: int = 1):
    """Jacobians of the RK4 step map, chain-ruled through the stages.

    Returns (A_d, B_d) with x_next ≈ A_d δx + B_d δu around (x, u).
    """
    n, m = model.n_x, model.n_u
    A_tot = np.eye(n)
    B_tot = np.zeros((n, m))
    h = dt / substeps
    for k in range(substeps):
        tk = t + k * h
        k1 = model.flow(x, u, tk)
        x2 = x + 0.5 * h * k1
        k2 = model.flow(x2, u, tk + 0.5 * h)
        x3 = x + 0.5 * h * k2
        k3 = model.flow(x3, u, tk + 0.5 * h)
        x4 = x + h * k3
        k4 = model.flow(x4, u, tk + h)
        A1, B1 = linearize(model, x, u, tk)
        A2, B2 = linearize(model, x2, u, tk + 0.5 * h)
        A3, B3 = linearize(model, x3, u, tk + 0.5 * h)
        A4, B4 = linearize(model, x4, u, tk + h)
        dk1_x, dk1_u = A1, B1
        dk2_x = A2 @ (np.eye(n) + 0.5 * h * dk1_x)
        dk2_u = A2 @ (0.5 * h * dk1_u) + B2
        dk3_x = A3 @ (np.eye(n) + 0.5 * h * dk2_x)
        dk3_u = A3 @ (0.5 * h * dk2_u) + B3
        dk4_x = A4 @ (np.eye(n) + h * dk3_x)
        dk4_u = A4 @ (h * dk3_u) + B4
        A_step = np.eye(n) + (h / 6.0) * (dk1_x + 2 * dk2_x + 2 * dk3_x + dk4_x)
        B_step = (h / 6.0) * (dk1_u + 2 * dk2_u + 2 * dk3_u + dk4_u)
        A_tot = A_step @ A_tot
        B_tot = A_step @ B_tot + B_step
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return A_tot, B_tot


def lti_discretization(model: DynamicsModel, dt: float, substeps: int = 1):
    """Exact RK4-equivalent discrete map for models flagged ``lti``.

    For a linear (possibly affine) time-invariant flow the RK4 step is itself
    affine, so x_next = A_d x + B_d u + c_d reproduces rk4_step exactly.
    """
    if not model.lti:
        raise ContractViolationError("lti_discretization requires an LTI model")
    x0 = np.zeros(model.n_x)
    u0 = np.zeros(model.n_u)
    A_d, B_d = rk4_jacobians(model, x0, u0, 0.0, dt, substeps)
    c_d = rk4_step(model, x0, u0, 0.0, dt, substeps)
    return A_d, B_d, c_d
