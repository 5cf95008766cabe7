"""Experiment configuration: schema validation and scenario construction.

Configs are single YAML documents. Validation is strict: unknown keys are
rejected with their full path, and a few knobs that sound plausible but are
deliberately out of scope get a dedicated explanation instead of a generic
error.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ConfigError
from .mpc import ControllerVariant, DelayModel, MpcConfig
from .model import DoubleIntegrator, PlanarArm
from .ocp import CostWeights, JointLimitConstraint, obstacle_constraint
from .sim import Environment, Obstacle, Rates, Scenario, Wall
from .slq import SolverSettings
from .teleop import (
    ContactPresser,
    MultiSine,
    StationaryOperator,
    StepReflex,
    WaypointFollower,
    ForceKick,
)

# knobs from larger mobile-manipulation stacks that sound plausible here;
# rejected with an explanation rather than a bare unknown-key error
OUT_OF_SCOPE_KEYS = {
    "orientation_weight": "end-effector orientation tracking is out of scope "
                          "(position-only teleoperation with fixed orientation)",
    "q_ee_orientation": "end-effector orientation tracking is out of scope",
    "q_ee_o": "end-effector orientation tracking is out of scope",
    "frequency_shaping": "full-state feedback shaping is out of scope; only the "
                         "target-state gain columns are applied",
    "gait": "gait schedules and contact sequencing are out of scope (fixed-base models only)",
    "friction_cone": "contact-force constraints are out of scope (fixed-base arm)",
    "centroidal": "centroidal dynamics are out of scope (fixed-base models only)",
}

_SCHEMA = {
    "label": None,
    "model": {"type": None, "link_lengths": None, "base": None, "dim": None, "q0": None,
              "joint_limits": {"lower": None, "upper": None}},
    "weights": {"q_ee": None, "r": None, "q_terminal": None},
    "solver": {"dt_knot": None, "max_iterations": None, "convergence_tol": None,
               "line_search_factor": None, "line_search_floor": None, "substeps": None},
    "mpc": {"variant": None, "replan_hz": None, "horizon": None,
            "delay": {"kind": None, "value": None, "lo": None, "hi": None}},
    "teleop": {
        "device": {"mass": None, "damping": None, "workspace": None},
        "coupling": {"scale": None, "v_max": None},
        "force_feedback": {"gain": None, "cap": None},
        "transport_delay": None,
        "operator": None,          # validated per operator type
    },
    "environment": {
        "wall": {"point": None, "normal": None, "stiffness": None, "damping": None},
        "obstacles": None,
    },
    "constrain_obstacles": None,
    "sim": {"duration": None, "rates": {"plant": None, "tracker": None, "device": None},
            "tracking_kp": None},
    "seed": None,
    "output": None,
    "compare": {"variants": None, "repeats": None, "assertions": None},
    "sweep": {"path": None, "values": None},
}

_OPERATOR_KEYS = {
    "multisine": {"type", "center", "amplitudes", "frequencies", "phases", "kp", "kd"},
    "waypoints": {"type", "times", "points", "kp", "kd", "interp"},
    "step_reflex": {"type", "center", "offset", "period", "kp", "kd"},
    "contact_press": {"type", "start", "press_direction", "approach_speed", "target_force",
                      "force_adapt_gain", "contact_threshold", "spike_rate", "spike_factor",
                      "reflex_retreat", "reflex_hold", "surge_factor", "max_lead",
                      "kp", "kd", "jitter"},
    "stationary": {"type"},
}


def _walk_unknown(data, schema, path, problems):
    if not isinstance(data, dict):
        return
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key in OUT_OF_SCOPE_KEYS:
            problems.append(f"{here}: rejected, {OUT_OF_SCOPE_KEYS[key]}")
            continue
        if key not in schema:
            problems.append(f"{here}: unknown key")
            continue
        sub = schema[key]
        if isinstance(sub, dict) and key not in ("operator",):
            if key == "obstacles":
                continue
            _walk_unknown(value, sub, here, problems)


def _check_operator(op: dict, problems):
    if not isinstance(op, dict) or "type" not in op:
        problems.append("teleop.operator: must be a mapping with a 'type' key")
        return
    kind = op["type"]
    if kind == "kick":
        allowed = {"type", "inner", "t_start", "duration", "force"}
        for key in op:
            if key in OUT_OF_SCOPE_KEYS:
                problems.append(f"teleop.operator.{key}: rejected, {OUT_OF_SCOPE_KEYS[key]}")
            elif key not in allowed:
                problems.append(f"teleop.operator.{key}: unknown key")
        if "inner" in op:
            _check_operator(op["inner"], problems)
        return
    if kind not in _OPERATOR_KEYS:
        problems.append(f"teleop.operator.type: unknown operator '{kind}'")
        return
    for key in op:
        if key in OUT_OF_SCOPE_KEYS:
            problems.append(f"teleop.operator.{key}: rejected, {OUT_OF_SCOPE_KEYS[key]}")
        elif key not in _OPERATOR_KEYS[kind]:
            problems.append(f"teleop.operator.{key}: unknown key for '{kind}'")


def _positive(data, path, problems, allow_zero=False):
    try:
        value = float(data)
    except (TypeError, ValueError):
        problems.append(f"{path}: must be a number")
        return None
    if value < 0 or (value == 0 and not allow_zero):
        problems.append(f"{path}: must be {'non-negative' if allow_zero else 'positive'}")
        return None
    return value


_DEFAULTS = {
    "label": "experiment",
    "model": {"type": "planar_arm", "link_lengths": [0.5, 0.5, 0.3], "base": [0.0, 0.0],
              "q0": None},
    "weights": {"q_ee": 40.0, "r": 0.2, "q_terminal": 8.0},
    "solver": {"dt_knot": 0.02, "max_iterations": 25, "convergence_tol": 1e-4,
               "line_search_factor": 0.5, "line_search_floor": 1e-3, "substeps": 1},
    "mpc": {"variant": "feedback", "replan_hz": 70, "horizon": 1.0,
            "delay": {"kind": "uniform", "lo": 0.012, "hi": 0.015}},
    "teleop": {"device": {"mass": 0.15, "damping": 8.0, "workspace": 1.5},
               "coupling": {"scale": 1.0, "v_max": 1.0},
               "force_feedback": {"gain": 1.0, "cap": 20.0},
               "transport_delay": 0.0,
               "operator": {"type": "stationary"}},
    "environment": {"wall": None, "obstacles": []},
    "constrain_obstacles": True,
    "sim": {"duration": 10.0, "rates": {"plant": 2500, "tracker": 400, "device": 400},
            "tracking_kp": 5.0},
    "seed": 0,
    "output": "runs/experiment",
}


def _merge(base, override):
    if not isinstance(base, dict) or not isinstance(override, dict):
        return override
    merged = dict(base)
    for key, value in override.items():
        merged[key] = _merge(base.get(key), value) if key in base else value
    return merged


def load_raw(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError([f"config file not found: {path}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: YAML parse error: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return data


def config_hash(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _build_operator_factory(op: dict, f_hu_max: float = 40.0):
    kind = op["type"]
    if kind == "kick":
        inner = _build_operator_factory(op["inner"])

        def factory(rng):
            model = ForceKick(inner(rng), float(op["t_start"]), float(op["duration"]),
                              np.asarray(op["force"], float))
            return model
        return factory
    if kind == "stationary":
        return lambda rng: StationaryOperator()
    if kind == "multisine":
        def factory(rng):
            return MultiSine(
                center=op.get("center", [0.0, 0.0]),
                amplitudes=op["amplitudes"], frequencies=op["frequencies"],
                phases=op.get("phases"), kp=float(op.get("kp", 60.0)),
                kd=float(op.get("kd", 4.0)),
            )
        return factory
    if kind == "waypoints":
        def factory(rng):
            return WaypointFollower(
                op["times"], op["points"], kp=float(op.get("kp", 60.0)),
                kd=float(op.get("kd", 4.0)), interp=op.get("interp", "linear"),
            )
        return factory
    if kind == "step_reflex":
        def factory(rng):
            return StepReflex(op["center"], op["offset"], float(op["period"]),
                              kp=float(op.get("kp", 60.0)), kd=float(op.get("kd", 4.0)))
        return factory
    if kind == "contact_press":
        def factory(rng):
            kwargs = {k: v for k, v in op.items() if k != "type"}
            return ContactPresser(rng=rng, **kwargs)
        return factory
    raise ConfigError([f"teleop.operator.type: unknown operator '{kind}'"])


def validate(raw: dict) -> dict:
    """Validate a raw config mapping; returns the fully resolved dict."""
    problems = []
    _walk_unknown(raw, _SCHEMA, "", problems)

    resolved = _merge(_DEFAULTS, raw)

    model = resolved["model"]
    if model["type"] not in ("planar_arm", "double_integrator"):
        problems.append(f"model.type: unknown model '{model['type']}'")
    if model["type"] == "planar_arm":
        lengths = model.get("link_lengths") or []
        if not lengths or any(not isinstance(x, (int, float)) or x <= 0 for x in lengths):
            problems.append("model.link_lengths: need a list of positive lengths")
    if model["type"] == "double_integrator":
        dim = model.get("dim", 3)
        if dim not in (2, 3):
            problems.append("model.dim: must be 2 or 3")

    for path, allow_zero in (
        ("weights.q_ee", True), ("weights.r", False), ("weights.q_terminal", True),
        ("solver.dt_knot", False), ("solver.convergence_tol", False),
        ("mpc.horizon", False), ("mpc.replan_hz", False),
        ("teleop.device.mass", False), ("teleop.device.damping", True),
        ("teleop.coupling.scale", False), ("teleop.coupling.v_max", False),
        ("teleop.force_feedback.gain", False), ("teleop.force_feedback.cap", False),
        ("teleop.transport_delay", True),
        ("sim.duration", False), ("sim.tracking_kp", True),
    ):
        node = resolved
        parts = path.split(".")
        for part in parts[:-1]:
            node = node[part]
        value = node[parts[-1]]
        checked = _positive(value, path, problems, allow_zero=allow_zero)
        if checked is not None:
            node[parts[-1]] = checked

    variant = resolved["mpc"]["variant"]
    if variant not in [v.value for v in ControllerVariant]:
        problems.append(f"mpc.variant: unknown variant '{variant}'")

    delay = resolved["mpc"]["delay"]
    if delay.get("kind") not in ("fixed", "uniform", "measured"):
        problems.append(f"mpc.delay.kind: must be fixed, uniform or measured")

    wall = resolved["environment"].get("wall")
    if wall is not None:
        for key in ("stiffness", "damping"):
            if key in wall and _positive(wall[key], f"environment.wall.{key}",
                                         problems, allow_zero=True) is None:
                pass
        for key in ("point", "normal"):
            if key not in wall:
                problems.append(f"environment.wall.{key}: required")

    for i, obs in enumerate(resolved["environment"].get("obstacles") or []):
        allowed = {"center", "radius", "buffer", "mu"}
        for key in obs:
            if key not in allowed:
                problems.append(f"environment.obstacles[{i}].{key}: unknown key")
        if "center" not in obs or "radius" not in obs:
            problems.append(f"environment.obstacles[{i}]: needs center and radius")
        elif obs["radius"] <= 0:
            problems.append(f"environment.obstacles[{i}].radius: must be positive")

    _check_operator(resolved["teleop"]["operator"], problems)

    if problems:
        raise ConfigError(sorted(problems))
    return resolved


def build_scenario(resolved: dict, seed_override=None, variant_override=None,
                   duration_override=None) -> Scenario:
    """Construct the runtime Scenario from a validated config dict."""
    model_cfg = resolved["model"]
    if model_cfg["type"] == "planar_arm":
        plant = PlanarArm(model_cfg["link_lengths"], base=model_cfg.get("base", (0.0, 0.0)))
        q0 = model_cfg.get("q0")
        q0 = np.zeros(plant.n_x) if q0 is None else np.asarray(q0, float)
    else:
        plant = DoubleIntegrator(dim=int(model_cfg.get("dim", 3)))
        q0 = model_cfg.get("q0")
        q0 = np.zeros(plant.n_x) if q0 is None else np.asarray(q0, float)

    w = resolved["weights"]
    weights = CostWeights.make(w["q_ee"], w["r"], w["q_terminal"],
                               ee_dim=plant.ee_dim, n_u=plant.n_u)

    s = resolved["solver"]
    solver = SolverSettings(
        max_iterations=int(s["max_iterations"]), convergence_tol=s["convergence_tol"],
        line_search_factor=s["line_search_factor"], line_search_floor=s["line_search_floor"],
        substeps=int(s["substeps"]), dt_knot=s["dt_knot"],
    )

    m = resolved["mpc"]
    variant = ControllerVariant(variant_override or m["variant"])
    delay_cfg = dict(m["delay"])
    delay = DelayModel(
        kind=delay_cfg.get("kind", "uniform"), value=delay_cfg.get("value", 0.014),
        lo=delay_cfg.get("lo", 0.012), hi=delay_cfg.get("hi", 0.015),
    )
    mpc_cfg = MpcConfig(variant=variant, replan_period=1.0 / float(m["replan_hz"]),
                        horizon=m["horizon"], delay=delay)

    env_cfg = resolved["environment"]
    wall = None
    if env_cfg.get("wall") is not None:
        wc = env_cfg["wall"]
        wall = Wall(point=np.asarray(wc["point"], float),
                    normal=np.asarray(wc["normal"], float),
                    stiffness=float(wc.get("stiffness", 2000.0)),
                    damping=float(wc.get("damping", 50.0)))
    obstacles = tuple(
        Obstacle(center=np.asarray(o["center"], float), radius=float(o["radius"]),
                 buffer=float(o.get("buffer", 0.05)))
        for o in (env_cfg.get("obstacles") or [])
    )
    environment = Environment(wall=wall, obstacles=obstacles)

    constraints = []
    if resolved["constrain_obstacles"]:
        for o in (env_cfg.get("obstacles") or []):
            constraints.append(obstacle_constraint(
                np.asarray(o["center"], float), float(o["radius"]),
                float(o.get("buffer", 0.05)), mu=float(o.get("mu", 0.5)),
            ))
    limits = model_cfg.get("joint_limits")
    if limits:
        constraints.append(JointLimitConstraint(limits["lower"], limits["upper"]))

    t = resolved["teleop"]
    sim_cfg = resolved["sim"]
    rates = Rates(plant=int(sim_cfg["rates"]["plant"]), tracker=int(sim_cfg["rates"]["tracker"]),
                  device=int(sim_cfg["rates"]["device"]))

    # the hash identifies the experiment definition; run-time overrides
    # (seed, variant, duration) are recorded separately in the log metadata
    return Scenario(
        plant=plant, q0=q0, weights=weights, mpc=mpc_cfg, solver=solver,
        operator_factory=_build_operator_factory(t["operator"]),
        constraints=tuple(constraints), environment=environment, rates=rates,
        duration=float(duration_override or sim_cfg["duration"]),
        tracking_kp=sim_cfg["tracking_kp"],
        device_mass=t["device"]["mass"], device_damping=t["device"]["damping"],
        device_workspace=t["device"]["workspace"],
        coupling_scale=t["coupling"]["scale"], v_max=t["coupling"]["v_max"],
        feedback_gain=t["force_feedback"]["gain"], feedback_cap=t["force_feedback"]["cap"],
        transport_delay=t["transport_delay"],
        config_hash=config_hash(resolved), label=resolved["label"],
    )


def load_config(path, seed=None, variant=None, duration=None):
    """Load, validate and build; returns (scenario, resolved dict, seed)."""
    resolved = validate(load_raw(path))
    run_seed = int(seed if seed is not None else resolved["seed"])
    scenario = build_scenario(resolved, seed_override=seed, variant_override=variant,
                              duration_override=duration)
    return scenario, resolved, run_seed


def scenario_dir() -> Path:
    return Path(__file__).parent / "scenarios"
