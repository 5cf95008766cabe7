"""Operator side: haptic device, position coupling with clutching, scripted operators.

The device is a gravity-pre-compensated point mass in Cartesian space
(diagonal inertia, so Coriolis terms vanish), damped for stability:

    M v̇ = f_hf + f_hu - B v

``f_hf`` is the haptic feedback force, ``f_hu`` the human-hand force from an
operator model. Everything here is dimension-generic (2-D for the planar
arm, 3-D for the point-mass testbed).
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ContractViolationError
from .model import AugmentedTarget

Array = np.ndarray


@dataclass(frozen=True)
class HapticDevice:
    mass: Array          # diagonal inertia entries (kg)
    damping: Array       # diagonal damping entries (N s/m)
    x_h: Array           # device position (m)
    v_h: Array           # device velocity (m/s)
    workspace_lo: Array
    workspace_hi: Array

    @staticmethod
    def make(dim: int, mass=0.1, damping=3.0, x_h=None, workspace=0.6) -> "HapticDevice":
        m = np.full(dim, float(mass)) if np.isscalar(mass) else np.asarray(mass, float)
        b = np.full(dim, float(damping)) if np.isscalar(damping) else np.asarray(damping, float)
        if np.any(m <= 0) or np.any(b < 0):
            raise ContractViolationError("device needs positive mass, non-negative damping")
        if np.isscalar(workspace):
            lo, hi = -workspace * np.ones(dim), workspace * np.ones(dim)
        else:
            lo, hi = (np.asarray(w, float) for w in workspace)
        return HapticDevice(
            mass=m, damping=b,
            x_h=np.zeros(dim) if x_h is None else np.asarray(x_h, float),
            v_h=np.zeros(dim), workspace_lo=lo, workspace_hi=hi,
        )

    @property
    def dim(self) -> int:
        return self.x_h.shape[0]


def device_step(dev: HapticDevice, f_hf: Array, f_hu: Array, dt: float) -> HapticDevice:
    """Semi-implicit Euler update of the device, with workspace clamping.

    Velocity components driving into a workspace wall are zeroed (the wall
    absorbs them), positions are clamped to the box.
    """
    if dt <= 0:
        raise ContractViolationError("dt must be positive")
    f = np.asarray(f_hf, float) + np.asarray(f_hu, float)
    if not np.all(np.isfinite(f)):
        raise ContractViolationError("device forces must be finite")
    v = dev.v_h + dt * (f - dev.damping * dev.v_h) / dev.mass
    x = dev.x_h + dt * v
    below = x < dev.workspace_lo
    above = x > dev.workspace_hi
    if below.any() or above.any():
        x = np.clip(x, dev.workspace_lo, dev.workspace_hi)
        v = np.where(below & (v < 0), 0.0, v)
        v = np.where(above & (v > 0), 0.0, v)
    return replace(dev, x_h=x, v_h=v)


@dataclass(frozen=True)
class Coupling:
    """Position-to-position coupling between device and robot target.

    Anchors ``x_h0``/``x_d0`` are captured at clutch-in; while unclutched the
    last commanded target stays frozen with zero velocity.
    """

    x_h0: Array
    x_d0: Array
    clutched: bool
    scale: float = 1.0
    v_max: float = 1.0
    frozen: AugmentedTarget | None = None

    def __post_init__(self):
        if self.scale <= 0:
            raise ContractViolationError("coupling scale must be positive")


def couple(coupling: Coupling, dev: HapticDevice) -> AugmentedTarget:
    """Map device pose to the commanded target.

    Clutched:    x_d = x_d0 + scale (x_h - x_h0),  v_d = scale v_h.
    Unclutched:  the target frozen at disengage, with v_d = 0.
    """
    if coupling.clutched:
        x_d = coupling.x_d0 + coupling.scale * (dev.x_h - coupling.x_h0)
        v_d = coupling.scale * dev.v_h
        return AugmentedTarget.make(x_d, v_d, v_max=coupling.v_max)
    if coupling.frozen is None:
        raise ContractViolationError("unclutched coupling has no frozen target")
    return AugmentedTarget.make(coupling.frozen.x_d, np.zeros(dev.dim), v_max=coupling.v_max)


def clutch(coupling: Coupling, dev: HapticDevice, current_target: AugmentedTarget,
           engage: bool) -> Coupling:
    """Engage or disengage the clutch.

    Engaging re-anchors both sides at their current poses so the target is
    continuous across the transition; disengaging freezes the target.
    """
    if engage:
        return replace(coupling, clutched=True, x_h0=dev.x_h.copy(),
                       x_d0=current_target.x_d.copy(), frozen=None)
    return replace(coupling, clutched=False, frozen=current_target)


def force_feedback(contact_force: Array, gain: float, cap: float) -> Array:
    """Reaction force displayed to the operator: -gain * contact force, norm-capped."""
    if gain <= 0:
        raise ContractViolationError("force feedback gain must be positive")
    f = -gain * np.asarray(contact_force, float)
    magnitude = float(np.linalg.norm(f))
    if magnitude > cap:
        f = f * (cap / magnitude)
    return f


class OperatorModel(ABC):
    """Produces the human-hand force on the device, once per operator tick.

    Implementations may keep internal state (reflex phases); they must be
    deterministic given their construction arguments.
    """

    f_max: float = 40.0

    @abstractmethod
    def force(self, t: float, dev: HapticDevice, f_hf: Array) -> Array:
        """Hand force (N) at time t given the current device state and feedback force."""

    def clutch_engaged(self, t: float) -> bool:
        """Scripted clutch state; engaged for the whole run by default."""
        return True

    def _cap(self, f: Array) -> Array:
        magnitude = float(np.linalg.norm(f))
        if magnitude > self.f_max:
            return f * (self.f_max / magnitude)
        return f


class _PathPD(OperatorModel):
    """PD pull toward a reference path in device space."""

    def __init__(self, kp: float = 60.0, kd: float = 4.0):
        self.kp = kp
        self.kd = kd

    def path(self, t: float):
        raise NotImplementedError

    def force(self, t, dev, f_hf):
        p_ref, v_ref = self.path(t)
        return self._cap(self.kp * (p_ref - dev.x_h) + self.kd * (v_ref - dev.v_h))


class WaypointFollower(_PathPD):
    """Follows a timed waypoint list; ``interp`` is 'linear' or 'hold'.

    Hold interpolation produces discontinuous reference jumps, useful for
    step-reflex style scripts.
    """

    def __init__(self, times, points, kp=60.0, kd=4.0, interp="linear"):
        super().__init__(kp, kd)
        self.times = np.asarray(times, float)
        self.points = np.asarray(points, float)
        if self.times.ndim != 1 or self.points.shape[0] != self.times.size:
            raise ContractViolationError("waypoint times/points mismatch")
        if np.any(np.diff(self.times) <= 0):
            raise ContractViolationError("waypoint times must be strictly increasing")
        if interp not in ("linear", "hold"):
            raise ContractViolationError("interp must be 'linear' or 'hold'")
        self.interp = interp

    def path(self, t):
        dim = self.points.shape[1]
        if self.interp == "hold":
            idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 1)
            return self.points[idx], np.zeros(dim)
        p = np.array([np.interp(t, self.times, self.points[:, j]) for j in range(dim)])
        if t <= self.times[0] or t >= self.times[-1]:
            v = np.zeros(dim)
        else:
            i = int(np.searchsorted(self.times, t, side="right") - 1)
            v = (self.points[i + 1] - self.points[i]) / (self.times[i + 1] - self.times[i])
        return p, v


class MultiSine(_PathPD):
    """Smooth multi-sine device path, the free-motion operator script."""

    def __init__(self, center, amplitudes, frequencies, phases=None, kp=60.0, kd=4.0):
        super().__init__(kp, kd)
        self.center = np.asarray(center, float)
        self.amplitudes = np.asarray(amplitudes, float)   # (n_terms, dim)
        self.frequencies = np.asarray(frequencies, float)  # (n_terms,)
        if self.amplitudes.ndim != 2 or self.amplitudes.shape[0] != self.frequencies.size:
            raise ContractViolationError("amplitudes must be (n_terms, dim)")
        self.phases = (np.zeros(self.frequencies.size) if phases is None
                       else np.asarray(phases, float))

    def path(self, t):
        omega = 2.0 * np.pi * self.frequencies
        s = np.sin(omega * t + self.phases)
        c = np.cos(omega * t + self.phases)
        p = self.center + s @ self.amplitudes
        v = (omega * c) @ self.amplitudes
        return p, v


class StepReflex(_PathPD):
    """Alternates the reference between two poses, reversing direction
    discontinuously every half period."""

    def __init__(self, center, offset, period: float, kp=60.0, kd=4.0):
        super().__init__(kp, kd)
        self.center = np.asarray(center, float)
        self.offset = np.asarray(offset, float)
        if period <= 0:
            raise ContractViolationError("period must be positive")
        self.period = period

    def path(self, t):
        sign = 1.0 if (t % self.period) < 0.5 * self.period else -1.0
        return self.center + sign * self.offset, np.zeros_like(self.center)


class ContactPresser(OperatorModel):
    """Drives the device into a surface and holds a target contact force,
    with a discontinuous pull-back reflex on force spikes.

    The hand is a PD around a commanded point that approaches the surface,
    then creeps to regulate the felt force toward ``target_force``. The
    commanded point never leads the hand by more than ``max_lead`` (humans
    do not push through a table), which bounds the intended press force.

    The reflex models jerky human reactions: when the felt force both rises
    faster than ``spike_rate`` and exceeds ``spike_factor * target_force``,
    the commanded point snaps back by ``reflex_retreat`` for ``reflex_hold``
    seconds, reversing the commanded velocity discontinuously. The recovery
    is just as jerky: the commanded point surges back toward the pre-reflex
    press at ``surge_factor`` times the approach speed before normal force
    regulation resumes.
    """

    def __init__(self, start, press_direction, approach_speed=0.25, target_force=8.0,
                 force_adapt_gain=0.02, contact_threshold=1.0, spike_rate=150.0,
                 spike_factor=1.8, reflex_retreat=0.04, reflex_hold=0.12,
                 surge_factor=3.0, max_lead=0.22, kp=60.0, kd=12.0,
                 rng: np.random.Generator | None = None, jitter=0.15):
        self.start = np.asarray(start, float)
        direction = np.asarray(press_direction, float)
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise ContractViolationError("press direction must be nonzero")
        self.direction = direction / norm
        rng = rng or np.random.default_rng(0)
        scale = 1.0 + jitter * float(rng.uniform(-1.0, 1.0))
        self.approach_speed = approach_speed * scale
        self.target_force = target_force * (1.0 + jitter * float(rng.uniform(-1.0, 1.0)))
        self.force_adapt_gain = force_adapt_gain
        self.contact_threshold = contact_threshold
        self.spike_rate = spike_rate * (1.0 + jitter * float(rng.uniform(-1.0, 1.0)))
        self.spike_factor = spike_factor
        self.reflex_retreat = reflex_retreat
        self.reflex_hold = reflex_hold
        self.surge_factor = surge_factor
        self.max_lead = max_lead
        self.kp = kp
        self.kd = kd
        # state
        self._p_ref = self.start.copy()
        self._prev_force = 0.0
        self._prev_t = None
        self._reflex_until = -1.0
        self._surge_remaining = 0.0
        self.reflex_count = 0

    def force(self, t, dev, f_hf):
        magnitude = float(np.linalg.norm(f_hf))
        dt = 0.0 if self._prev_t is None else max(t - self._prev_t, 1e-9)
        if self._prev_t is not None and dt > 0 and t >= self._reflex_until:
            rate = (magnitude - self._prev_force) / dt
            if rate > self.spike_rate and magnitude > self.spike_factor * self.target_force:
                # reflex: snap the commanded point back out of the surface
                self._p_ref = self._p_ref - self.reflex_retreat * self.direction
                self._reflex_until = t + self.reflex_hold
                self._surge_remaining = self.reflex_retreat
                self.reflex_count += 1
        if t >= self._reflex_until:
            if self._surge_remaining > 0.0:
                # jerky recovery: shove back toward the press
                step = min(self._surge_remaining, dt * self.surge_factor * self.approach_speed)
                self._p_ref = self._p_ref + step * self.direction
                self._surge_remaining -= step
            elif magnitude < self.contact_threshold:
                self._p_ref = self._p_ref + dt * self.approach_speed * self.direction
            else:
                # regulate toward the force setpoint by creeping the reference,
                # force_adapt_gain in m/(N s)
                error = self.target_force - magnitude
                self._p_ref = self._p_ref + dt * self.force_adapt_gain * error * self.direction
        lead = float((self._p_ref - dev.x_h) @ self.direction)
        if lead > self.max_lead:
            self._p_ref = self._p_ref - (lead - self.max_lead) * self.direction
        self._prev_force = magnitude
        self._prev_t = t
        return self._cap(self.kp * (self._p_ref - dev.x_h) - self.kd * dev.v_h)


class ForceKick(OperatorModel):
    """Wraps another operator and injects an extra hand force over a window.

    Used to replay a scenario with different mid-cycle target changes.
    """

    def __init__(self, inner: OperatorModel, t_start: float, duration: float, extra):
        self.inner = inner
        self.t_start = t_start
        self.duration = duration
        self.extra = np.asarray(extra, float)
        self.f_max = inner.f_max

    def force(self, t, dev, f_hf):
        f = self.inner.force(t, dev, f_hf)
        if self.t_start <= t < self.t_start + self.duration:
            f = f + self.extra
        return self._cap(f)

    def clutch_engaged(self, t):
        return self.inner.clutch_engaged(t)


class StationaryOperator(OperatorModel):
    """Holds the device still (zero hand force)."""

    def force(self, t, dev, f_hf):
        return np.zeros(dev.dim)
