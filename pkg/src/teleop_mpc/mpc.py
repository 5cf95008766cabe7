"""Receding-horizon runner: controller variants, policy snapshots, fast evaluation.

Three controller variants share one solver:

- ``baseline``: tracks the commanded position as a frozen reference
- ``feedforward``: tracks a reference extrapolated with the commanded velocity
- ``feedback``: tracks the target block of the augmented state and applies
  the policy's target-gain columns at the fast rate

The snapshot handoff models the slow loop: a solve triggered at ``solved_at``
becomes usable only at ``available_at = solved_at + compute delay``.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolationError, SolverError
from .model import AugmentedTarget
from .ocp import OcpProblem, ReferenceTrajectory
from .slq import AffinePolicy, SolveReport, SolverSettings, interpolate, solve

logger = logging.getLogger(__name__)

Array = np.ndarray


class ControllerVariant(str, enum.Enum):
    BASELINE = "baseline"
    FEEDFORWARD = "feedforward"
    FEEDBACK = "feedback"


@dataclass(frozen=True)
class DelayModel:
    """Compute-delay model for the solver task.

    ``fixed`` uses ``value``; ``uniform`` draws from [lo, hi]; ``measured``
    defers to actual solver wall time (serve mode only).
    """

    kind: str = "uniform"
    value: float = 0.014
    lo: float = 0.012
    hi: float = 0.015

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "measured"):
            raise ContractViolationError(f"unknown delay kind '{self.kind}'")
        if self.kind == "fixed" and self.value < 0:
            raise ContractViolationError("fixed delay must be non-negative")
        if self.kind == "uniform" and not 0 <= self.lo <= self.hi:
            raise ContractViolationError("uniform delay needs 0 <= lo <= hi")

    @property
    def upper_bound(self) -> float:
        return {"fixed": self.value, "uniform": self.hi, "measured": float("inf")}[self.kind]

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        raise ContractViolationError("measured delay is taken from wall time in serve mode")


@dataclass(frozen=True)
class MpcConfig:
    variant: ControllerVariant = ControllerVariant.FEEDBACK
    replan_period: float = 1.0 / 70.0
    horizon: float = 1.0
    delay: DelayModel = DelayModel()

    def __post_init__(self):
        if self.replan_period <= 0:
            raise ContractViolationError("replan period must be positive")
        if self.horizon <= self.replan_period:
            raise ContractViolationError("horizon must exceed the replan period")
        if self.delay.upper_bound > self.replan_period:
            logger.warning(
                "compute delay can exceed the replan period (%.1f ms > %.1f ms); "
                "in-flight replan ticks will be skipped",
                self.delay.upper_bound * 1e3,
                self.replan_period * 1e3,
            )


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable solver output handed from the slow MPC task to the tracker."""

    policy: AffinePolicy | None
    solved_at: float
    available_at: float
    target_at_solve: AugmentedTarget
    variant: ControllerVariant
    index: int
    report: SolveReport | None = None
    failed: bool = False

    def __post_init__(self):
        if self.available_at < self.solved_at:
            raise ContractViolationError("available_at must not precede solved_at")


def build_reference(variant: ControllerVariant, target: AugmentedTarget,
                    horizon: float, knots: int):
    """Per-variant reference: constant, velocity-extrapolated, or None.

    None signals the OCP to track its own augmented target block.
    """
    if variant == ControllerVariant.FEEDBACK:
        return None
    times = np.linspace(0.0, horizon, knots + 1)
    if variant == ControllerVariant.BASELINE:
        positions = np.tile(target.x_d, (knots + 1, 1))
    else:
        steps = (np.arange(knots + 1) / knots)[:, None]
        positions = target.x_d + steps * (target.v_d * horizon)
    return ReferenceTrajectory(times, positions)


def mpc_step(config: MpcConfig, template: OcpProblem, settings: SolverSettings,
             x_plant: Array, target: AugmentedTarget, warm: PolicySnapshot | None,
             now: float, rng: np.random.Generator, index: int = 0,
             delay_override: float | None = None) -> PolicySnapshot:
    """One replan: assemble the augmented initial state, solve, stamp availability.

    Solver failures yield a snapshot with ``failed`` set; the runner keeps
    using the previous snapshot (fail-operational).
    """
    model = template.model
    x0 = model.augment_state(np.asarray(x_plant, dtype=float), target)
    knots = max(2, int(round(config.horizon / settings.dt_knot)))
    reference = build_reference(config.variant, target, config.horizon, knots)
    problem = template.with_reference(reference)
    warm_policy = warm.policy if (warm is not None and not warm.failed) else None
    delay = delay_override if delay_override is not None else config.delay.sample(rng)
    try:
        policy, report = solve(problem, x0, settings, warm_start=warm_policy, t0=now)
    except SolverError as exc:
        logger.warning("solve at t=%.4f failed: %s", now, exc)
        return PolicySnapshot(
            policy=None, solved_at=now, available_at=now + delay, target_at_solve=target,
            variant=config.variant, index=index, report=None, failed=True,
        )
    return PolicySnapshot(
        policy=policy, solved_at=now, available_at=now + delay, target_at_solve=target,
        variant=config.variant, index=index, report=report,
    )


def evaluate_command(variant: ControllerVariant, snapshot: PolicySnapshot, t: float,
                     live_target: AugmentedTarget, x_measured: Array | None = None):
    """Tracker-rate command from the active snapshot.

    Baseline/feed-forward interpolate the nominal input only; between
    snapshots the live target cannot influence them. The feedback variant
    adds the target-gain correction K_aug (x_aug_live - x_aug_nominal),
    leaving the plant-gain columns unused (plant states are assumed to match
    the nominal plan; the tracking loop closes that error separately).

    Returns (input, stale), where ``stale`` reports evaluation past the end
    of the policy span.
    """
    if snapshot.failed or snapshot.policy is None:
        raise ContractViolationError("cannot evaluate a failed snapshot")
    ev = interpolate(snapshot.policy, t)
    if variant != ControllerVariant.FEEDBACK:
        return ev.u_nom.copy(), ev.stale
    aug_start = snapshot.policy.aug_start
    live_aug = live_target.vector()
    nominal_aug = ev.x_nom[aug_start:]
    u = ev.u_nom + ev.K[:, aug_start:] @ (live_aug - nominal_aug)
    return u, ev.stale
