"""Deterministic multi-rate teleoperation simulation.

A discrete-event core on an integer virtual clock runs four periodic tasks:
plant integration (2.5 kHz), the tracking loop (400 Hz), the device/operator
update (400 Hz) and MPC replans (70 Hz) whose results become visible only
after a modeled compute delay. Events at equal timestamps execute in a fixed
priority order, so a (scenario, seed) pair reproduces the identical run.

The clock ticks at the least common multiple of all task rates; every period
is an exact integer number of ticks and no floating-point drift can reorder
events.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Callable

import numpy as np

from . import __version__
from .exceptions import ContractViolationError
from .model import AugmentedTarget, DynamicsModel, augment_model, ee_jacobian, rk4_step
from .mpc import MpcConfig, PolicySnapshot, evaluate_command, mpc_step
from .ocp import CostWeights, OcpProblem
from .slq import SolverSettings, interpolate
from .teleop import (
    Coupling,
    HapticDevice,
    OperatorModel,
    clutch,
    couple,
    device_step,
    force_feedback,
)

Array = np.ndarray

# event priorities at equal timestamps (lower runs first)
PRIO_PLANT = 0
PRIO_TRACKER = 1
PRIO_SOLVER_DONE = 2
PRIO_SOLVER_START = 3
PRIO_OPERATOR = 4
PRIO_LOGGER = 5


class Scheduler:
    """Event queue on an integer tick clock with priority tie-breaking."""

    def __init__(self, tick_hz: int):
        self.tick_hz = tick_hz
        self.now_ticks = 0
        self._heap = []
        self._seq = 0

    @property
    def now(self) -> float:
        return self.now_ticks / self.tick_hz

    def to_time(self, ticks: int) -> float:
        return ticks / self.tick_hz

    def schedule(self, ticks: int, priority: int, fn: Callable[[], None]):
        if ticks < self.now_ticks:
            raise ContractViolationError("cannot schedule into the past")
        heappush(self._heap, (ticks, priority, self._seq, fn))
        self._seq += 1

    def schedule_periodic(self, period_ticks: int, priority: int,
                          fn: Callable[[], None], start_ticks: int = 0,
                          end_ticks: int | None = None):
        def run():
            fn()
            nxt = self.now_ticks + period_ticks
            if end_ticks is None or nxt < end_ticks:
                self.schedule(nxt, priority, run)

        self.schedule(start_ticks, priority, run)

    def run_until(self, end_ticks: int):
        """Execute all events strictly before ``end_ticks`` in key order."""
        while self._heap and self._heap[0][0] < end_ticks:
            ticks, _, _, fn = heappop(self._heap)
            self.now_ticks = ticks
            fn()
        self.now_ticks = end_ticks


# ------------------------------------------------------------------ environment

@dataclass(frozen=True)
class Wall:
    point: Array
    normal: Array          # unit outward normal (into free space)
    stiffness: float = 2000.0
    damping: float = 50.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if norm == 0.0:
            raise ContractViolationError("wall normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        if self.stiffness < 0 or self.damping < 0:
            raise ContractViolationError("wall stiffness/damping must be non-negative")


@dataclass(frozen=True)
class Obstacle:
    center: Array
    radius: float
    buffer: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        if self.radius <= 0 or self.buffer < 0:
            raise ContractViolationError("obstacle needs radius > 0, buffer >= 0")


@dataclass(frozen=True)
class Environment:
    wall: Wall | None = None
    obstacles: tuple = ()


def contact_force(env: Environment, ee_pos: Array, ee_vel: Array) -> Array:
    """Penalty spring-damper wall force on the end effector (zero if separated)."""
    if env.wall is None:
        return np.zeros_like(np.asarray(ee_pos, float))
    w = env.wall
    penetration = max(0.0, -float((ee_pos - w.point) @ w.normal))
    if penetration == 0.0:
        return np.zeros_like(np.asarray(ee_pos, float))
    approach = max(0.0, -float(ee_vel @ w.normal))
    return (w.stiffness * penetration + w.damping * approach) * w.normal


def tracking_loop_step(x_plant: Array, command: Array, q_nom: Array | None,
                       kp_joint: float) -> Array:
    """Fast tracking layer: policy command plus a P pull toward the nominal plan.

    The correction acts on the first n_u configuration coordinates (joint
    angles for the arm, position for the point mass); with kp_joint = 0 the
    command passes through untouched.
    """
    command = np.asarray(command, float)
    if q_nom is None or kp_joint == 0.0:
        return command.copy()
    n_u = command.shape[0]
    return command + kp_joint * (np.asarray(q_nom, float)[:n_u] - x_plant[:n_u])


# ------------------------------------------------------------------ scenario

@dataclass(frozen=True)
class Rates:
    plant: int = 2500
    tracker: int = 400
    device: int = 400

    def __post_init__(self):
        if min(self.plant, self.tracker, self.device) <= 0:
            raise ContractViolationError("rates must be positive")


@dataclass
class Scenario:
    """Everything needed to run one experiment (built by config or by hand)."""

    plant: DynamicsModel
    q0: Array
    weights: CostWeights
    mpc: MpcConfig
    solver: SolverSettings
    operator_factory: Callable[[np.random.Generator], OperatorModel]
    constraints: tuple = ()
    environment: Environment = Environment()
    rates: Rates = Rates()
    duration: float = 10.0
    tracking_kp: float = 5.0
    device_mass: float = 0.1
    device_damping: float = 3.0
    device_workspace: float = 1.5
    coupling_scale: float = 1.0
    v_max: float = 1.0
    feedback_gain: float = 1.0
    feedback_cap: float = 20.0
    transport_delay: float = 0.0
    config_hash: str = "unhashed"
    label: str = "experiment"


# ------------------------------------------------------------------ log

@dataclass
class ExperimentLog:
    """Uniform 400 Hz record of one run, wide columnar layout."""

    columns: list
    data: Array                      # (n_samples, n_columns)
    meta: dict

    def column(self, name: str) -> Array:
        return self.data[:, self.columns.index(name)]

    def block(self, prefix: str) -> Array:
        idx = [i for i, c in enumerate(self.columns) if c.startswith(prefix)]
        return self.data[:, idx]

    @property
    def t(self) -> Array:
        return self.column("t")

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(f"# config_hash={self.meta.get('config_hash', 'unhashed')}\n")
            fh.write(",".join(self.columns) + "\n")
            for row in self.data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    def write_meta(self, path):
        with open(path, "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_csv(path, meta_path=None) -> "ExperimentLog":
        with open(path) as fh:
            first = fh.readline().strip()
            if not first.startswith("# config_hash="):
                raise ContractViolationError(f"{path}: missing config hash header")
            config_hash = first.split("=", 1)[1]
            columns = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        meta = {"config_hash": config_hash}
        if meta_path is not None:
            with open(meta_path) as fh:
                meta = json.load(fh)
        return ExperimentLog(columns=columns, data=data, meta=meta)


@dataclass(frozen=True)
class Metrics:
    median_tracking_error: float
    force_stability_std: float       # nan when no contact occurred
    max_constraint_penetration: float
    unstable: bool

    def to_dict(self) -> dict:
        return {
            "median_tracking_error_m": self.median_tracking_error,
            "force_stability_std_n": self.force_stability_std,
            "max_constraint_penetration_m": self.max_constraint_penetration,
            "unstable": self.unstable,
        }


def metric_tracking_error(log: ExperimentLog) -> float:
    """Median Euclidean EE-vs-command error over clutched samples."""
    clutched = log.column("clutch") > 0.5
    if not clutched.any():
        raise ContractViolationError("no clutched samples in log")
    err = np.linalg.norm(log.block("ee_") - log.block("xd_"), axis=1)
    return float(np.median(err[clutched]))


BUMP_THRESHOLD_N = 2.0
CONTACT_SETTLE_S = 0.1
FORCE_WINDOW_S = 1.5


def find_bump(log: ExperimentLog, threshold: float = BUMP_THRESHOLD_N):
    """Time of the first contact bump, or None."""
    f = np.linalg.norm(log.block("f_"), axis=1)
    hits = np.nonzero(f > threshold)[0]
    if hits.size == 0:
        return None
    return float(log.t[hits[0]])


def metric_force_stability(log: ExperimentLog, threshold: float = BUMP_THRESHOLD_N) -> float:
    """Std of |contact force| over 1.5 s starting 0.1 s after the first bump.

    Returns nan when the run never makes contact.
    """
    t_bump = find_bump(log, threshold)
    if t_bump is None:
        return float("nan")
    t = log.t
    window = (t >= t_bump + CONTACT_SETTLE_S) & (t <= t_bump + CONTACT_SETTLE_S + FORCE_WINDOW_S)
    f = np.linalg.norm(log.block("f_"), axis=1)
    return float(np.std(f[window]))


def metric_constraint(log: ExperimentLog, obstacle: Obstacle) -> float:
    """Worst penetration beyond the hard radius (0 when the path stays clear)."""
    dist = np.linalg.norm(log.block("ee_") - obstacle.center, axis=1)
    return float(max(0.0, np.max(obstacle.radius - dist)))


INSTABILITY_STD_N = 6.0
INSTABILITY_BOUNCES = 4
CONTACT_LOSS_N = 0.5
BOUNCE_REFRACTORY_S = 0.05


def detect_instability(log: ExperimentLog, threshold: float = BUMP_THRESHOLD_N) -> bool:
    """Sustained-oscillation flag: repeated contact loss/regain or a large
    force spread, both over the settled post-contact window.

    Bounce events within the refractory interval merge into one, so the
    brief chatter of a single flinch does not register as oscillation.
    """
    t_bump = find_bump(log, threshold)
    if t_bump is None:
        return False
    t = log.t
    settled = (t >= t_bump + CONTACT_SETTLE_S) & (t <= t_bump + CONTACT_SETTLE_S + FORCE_WINDOW_S)
    f = np.linalg.norm(log.block("f_"), axis=1)[settled]
    ts = t[settled]
    if f.size < 4:
        return False
    bounces = 0
    in_loss = False
    last_bounce = -np.inf
    for i in range(f.size):
        if f[i] < CONTACT_LOSS_N:
            in_loss = True
        elif f[i] > threshold and in_loss:
            if ts[i] - last_bounce >= BOUNCE_REFRACTORY_S:
                bounces += 1
                last_bounce = ts[i]
            in_loss = False
    spread = float(np.std(f))
    return bounces >= INSTABILITY_BOUNCES or spread > INSTABILITY_STD_N


def compute_metrics(log: ExperimentLog, environment: Environment) -> Metrics:
    worst = 0.0
    for obs in environment.obstacles:
        worst = max(worst, metric_constraint(log, obs))
    return Metrics(
        median_tracking_error=metric_tracking_error(log),
        force_stability_std=metric_force_stability(log),
        max_constraint_penetration=worst,
        unstable=detect_instability(log),
    )


# ------------------------------------------------------------------ simulation

class _DelayLine:
    """Transport-delay hook; with zero delay it is a passthrough.

    Before any sample is old enough, the construction-time value applies.
    """

    def __init__(self, delay: float, initial):
        self.delay = delay
        self._buffer = [(-float("inf"), initial)]

    def push(self, t: float, value):
        if self.delay == 0.0:
            self._buffer = [(t, value)]
            return
        self._buffer.append((t, value))

    def get(self, t: float):
        if self.delay == 0.0:
            return self._buffer[-1][1]
        cutoff = t - self.delay
        keep_from = 0
        for i, (stamp, _) in enumerate(self._buffer):
            if stamp <= cutoff:
                keep_from = i
            else:
                break
        self._buffer = self._buffer[keep_from:]
        return self._buffer[0][1]


class Simulation:
    """One deterministic run; owns all mutable state, driven by the scheduler."""

    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

        plant = scenario.plant
        self.aug = augment_model(plant)
        self.template = OcpProblem(
            model=self.aug, weights=scenario.weights, horizon=scenario.mpc.horizon,
            constraints=scenario.constraints,
        )
        self.x_plant = np.asarray(scenario.q0, float).copy()
        self.u_applied = np.zeros(plant.n_u)
        self.ee_pos = plant.ee(self.x_plant)
        self.ee_vel = np.zeros(plant.ee_dim)
        self.sensor_force = np.zeros(plant.ee_dim)

        self.device = HapticDevice.make(
            plant.ee_dim, mass=scenario.device_mass, damping=scenario.device_damping,
            workspace=scenario.device_workspace,
        )
        self.coupling = Coupling(
            x_h0=self.device.x_h.copy(), x_d0=self.ee_pos.copy(), clutched=True,
            scale=scenario.coupling_scale, v_max=scenario.v_max,
        )
        self.target = AugmentedTarget.make(self.ee_pos, np.zeros(plant.ee_dim),
                                           v_max=scenario.v_max)
        self.operator = scenario.operator_factory(self.rng)
        self.f_hf = np.zeros(plant.ee_dim)

        self.snapshot: PolicySnapshot | None = None
        self.last_solved: PolicySnapshot | None = None
        self.in_flight = False
        self.snapshot_seq = 0
        self.counters = {
            "replan_attempts": 0, "solves": 0, "skipped_inflight": 0,
            "solver_failures": 0, "stale_evaluations": 0, "plant_steps": 0,
        }
        self.solve_records = []

        rates = scenario.rates
        replan_hz = 1.0 / scenario.mpc.replan_period
        if abs(replan_hz - round(replan_hz)) > 1e-6:
            raise ContractViolationError("replan period must be an integer rate (Hz)")
        self.tick_hz = math.lcm(rates.plant, rates.tracker, rates.device, int(round(replan_hz)))
        self.scheduler = Scheduler(self.tick_hz)

        self._target_line = _DelayLine(scenario.transport_delay, self.target)
        self._force_line = _DelayLine(scenario.transport_delay, self.sensor_force)

        self._rows = []
        self._stale_count = 0

    # -------------------------------------------------- event handlers

    def _plant_event(self):
        t = self.scheduler.now
        dt = 1.0 / self.scenario.rates.plant
        plant = self.scenario.plant
        self.counters["plant_steps"] += 1
        self.x_plant = rk4_step(plant, self.x_plant, self.u_applied, t, dt)
        self.ee_pos = plant.ee(self.x_plant)
        J = ee_jacobian(plant, self.x_plant)
        self.ee_vel = J @ plant.flow(self.x_plant, self.u_applied, t)
        self.sensor_force = contact_force(self.scenario.environment, self.ee_pos, self.ee_vel)
        self._force_line.push(t, self.sensor_force)

    def _tracker_event(self):
        t = self.scheduler.now
        snap = self.snapshot
        if snap is None:
            self.u_applied = np.zeros(self.scenario.plant.n_u)
            return
        live_target = self._target_line.get(t)
        command, stale = evaluate_command(
            snap.variant, snap, t, live_target, self.x_plant
        )
        if stale:
            self._stale_count += 1
            self.counters["stale_evaluations"] += 1
        ev = interpolate(snap.policy, t)
        q_nom = ev.x_nom[self.aug.slice_plant]
        self.u_applied = tracking_loop_step(
            self.x_plant, command, q_nom, self.scenario.tracking_kp
        )

    def _solver_start_event(self):
        self.counters["replan_attempts"] += 1
        if self.in_flight:
            self.counters["skipped_inflight"] += 1
            return
        t = self.scheduler.now
        delay = self.scenario.mpc.delay.sample(self.rng)
        delay_ticks = max(0, int(round(delay * self.tick_hz)))
        available = self.scheduler.to_time(self.scheduler.now_ticks + delay_ticks)
        target = self._target_line.get(t)
        snap = mpc_step(
            self.scenario.mpc, self.template, self.scenario.solver,
            self.x_plant, target, self.last_solved, now=t, rng=self.rng,
            index=self.snapshot_seq, delay_override=available - t,
        )
        self.snapshot_seq += 1
        self.counters["solves"] += 1
        self.in_flight = True
        if snap.report is not None:
            self.solve_records.append({
                "index": snap.index, "solved_at": snap.solved_at,
                "available_at": snap.available_at, "iterations": snap.report.iterations,
                "converged": snap.report.converged, "final_cost": snap.report.final_cost,
                "solve_time_s": snap.report.solve_time,
            })
        self.scheduler.schedule(self.scheduler.now_ticks + delay_ticks, PRIO_SOLVER_DONE,
                                lambda: self._solver_done_event(snap))

    def _solver_done_event(self, snap: PolicySnapshot):
        self.in_flight = False
        if snap.failed:
            self.counters["solver_failures"] += 1
            return
        self.last_solved = snap
        self.snapshot = snap

    def _operator_event(self):
        t = self.scheduler.now
        dt = 1.0 / self.scenario.rates.device
        delayed_force = self._force_line.get(t)
        # the sensor reports the force the robot applies to the environment,
        # the reaction to the wall force acting on the EE
        self.f_hf = force_feedback(
            -delayed_force, self.scenario.feedback_gain, self.scenario.feedback_cap
        )
        wants = self.operator.clutch_engaged(t)
        if wants != self.coupling.clutched:
            self.coupling = clutch(self.coupling, self.device, self.target, engage=wants)
        f_hu = self.operator.force(t, self.device, self.f_hf)
        self.device = device_step(self.device, self.f_hf, f_hu, dt)
        self.target = couple(self.coupling, self.device)
        self._target_line.push(t, self.target)

    def _logger_event(self):
        t = self.scheduler.now
        snap = self.snapshot
        age = float("nan") if snap is None else t - snap.solved_at
        sid = -1 if snap is None else snap.index
        row = np.concatenate([
            [t], self.target.x_d, self.target.v_d, self.ee_pos, self.ee_vel,
            self.sensor_force, [float(np.linalg.norm(self.f_hf))],
            [age], [float(sid)], [1.0 if self.coupling.clutched else 0.0],
            [float(self._stale_count)], self.u_applied, self.x_plant,
        ])
        self._rows.append(row)

    # -------------------------------------------------- run

    def _columns(self):
        d = self.scenario.plant.ee_dim
        n_u = self.scenario.plant.n_u
        n_q = self.scenario.plant.n_x
        cols = ["t"]
        cols += [f"xd_{i}" for i in range(d)]
        cols += [f"vd_{i}" for i in range(d)]
        cols += [f"ee_{i}" for i in range(d)]
        cols += [f"eev_{i}" for i in range(d)]
        cols += [f"f_{i}" for i in range(d)]
        cols += ["fhf_mag", "policy_age", "snapshot_id", "clutch", "stale_count"]
        cols += [f"u_{i}" for i in range(n_u)]
        cols += [f"q_{i}" for i in range(n_q)]
        return cols

    def register_events(self, end_ticks: int | None, with_logger: bool = True):
        sched = self.scheduler
        rates = self.scenario.rates
        replan_ticks = int(round(self.scenario.mpc.replan_period * self.tick_hz))
        sched.schedule_periodic(self.tick_hz // rates.plant, PRIO_PLANT,
                                self._plant_event, end_ticks=end_ticks)
        sched.schedule_periodic(self.tick_hz // rates.tracker, PRIO_TRACKER,
                                self._tracker_event, end_ticks=end_ticks)
        sched.schedule_periodic(replan_ticks, PRIO_SOLVER_START,
                                self._solver_start_event, end_ticks=end_ticks)
        sched.schedule_periodic(self.tick_hz // rates.device, PRIO_OPERATOR,
                                self._operator_event, end_ticks=end_ticks)
        if with_logger:
            sched.schedule_periodic(self.tick_hz // rates.tracker, PRIO_LOGGER,
                                    self._logger_event, end_ticks=end_ticks)

    def run(self) -> ExperimentLog:
        rates = self.scenario.rates
        end_ticks = int(round(self.scenario.duration * self.tick_hz))
        self.register_events(end_ticks)
        self.scheduler.run_until(end_ticks)
        env = self.scenario.environment
        env_meta = {
            "wall": None if env.wall is None else {
                "point": env.wall.point.tolist(), "normal": env.wall.normal.tolist(),
                "stiffness": env.wall.stiffness, "damping": env.wall.damping,
            },
            "obstacles": [
                {"center": o.center.tolist(), "radius": o.radius, "buffer": o.buffer}
                for o in env.obstacles
            ],
        }
        meta = {
            "config_hash": self.scenario.config_hash,
            "label": self.scenario.label,
            "variant": self.scenario.mpc.variant.value,
            "seed": self.seed,
            "code_version": __version__,
            "tick_hz": self.tick_hz,
            "duration_s": self.scenario.duration,
            "rates": {"plant": rates.plant, "tracker": rates.tracker,
                      "device": rates.device,
                      "replan": int(round(1.0 / self.scenario.mpc.replan_period))},
            "environment": env_meta,
            "counters": self.counters,
            "solves": self.solve_records,
        }
        return ExperimentLog(columns=self._columns(), data=np.array(self._rows), meta=meta)


def run_experiment(scenario: Scenario, seed: int):
    """Run one scenario deterministically; returns (log, metrics)."""
    sim = Simulation(scenario, seed)
    log = sim.run()
    return log, compute_metrics(log, scenario.environment)
