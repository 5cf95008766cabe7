"""Experiment runner front door.

Verbs: ``run`` one scenario, ``compare`` controller variants on the identical
scenario and seed, ``sweep`` a config value, ``report`` plot-ready files and
figures from logs, ``serve`` the real-time bridge.

Exit codes: 0 ok, 2 config error, 3 runtime error, 4 ordering-assertion
failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import build_scenario, config_hash, load_raw, validate
from .exceptions import ConfigError
from .mpc import ControllerVariant
from .sim import Metrics, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ASSERTION = 4


def _write_metrics(path: Path, metrics: Metrics, extra: dict | None = None):
    with open(path, "w") as fh:
        for key, value in metrics.to_dict().items():
            fh.write(f"{key}={value}\n")
        for key, value in (extra or {}).items():
            fh.write(f"{key}={value}\n")


def _run_one(resolved, seed, variant, duration, out_dir: Path, label_suffix=""):
    scenario = build_scenario(resolved, seed_override=seed, variant_override=variant,
                              duration_override=duration)
    log, metrics = run_experiment(scenario, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.to_csv(out_dir / "log.csv")
    log.write_meta(out_dir / "log.meta.json")
    _write_metrics(out_dir / "metrics.txt", metrics,
                   {"seed": seed, "variant": log.meta["variant"],
                    "config_hash": log.meta["config_hash"]})
    return log, metrics


def cmd_run(args) -> int:
    resolved = validate(load_raw(args.config))
    seed = int(args.seed if args.seed is not None else resolved["seed"])
    out = Path(args.out or resolved["output"])
    log, metrics = _run_one(resolved, seed, args.variant, args.duration, out)
    print(f"wrote {out}/log.csv ({log.data.shape[0]} rows)")
    for key, value in metrics.to_dict().items():
        print(f"  {key} = {value}")
    return EXIT_OK


def _aggregate(per_seed_metrics):
    """Mean metrics over repeats plus the count of tripped instability flags."""
    agg = {}
    keys = ["median_tracking_error_m", "force_stability_std_n", "max_constraint_penetration_m"]
    for key in keys:
        values = [m.to_dict()[key] for m in per_seed_metrics]
        agg[key] = float(np.nanmean(values)) if not all(np.isnan(v) for v in values) else float("nan")
    agg["unstable_count"] = sum(1 for m in per_seed_metrics if m.unstable)
    agg["repeats"] = len(per_seed_metrics)
    return agg


def _final_error(log) -> float:
    ee = log.block("ee_")
    xd = log.block("xd_")
    return float(np.linalg.norm(ee[-1] - xd[-1]))


def _evaluate_assertion(spec: dict, agg: dict, first_logs: dict):
    kind = spec.get("type")
    if kind in ("order_le", "order_lt"):
        metric = spec["metric"]
        order = spec["order"]
        strict = kind == "order_lt"
        values = [agg[v][metric] for v in order]
        ok = all((a < b) if strict else (a <= b) for a, b in zip(values, values[1:]))
        desc = (" < " if strict else " <= ").join(
            f"{v}({agg[v][metric]:.6g})" for v in order
        )
        return ok, f"{metric}: {desc}"
    if kind == "ratio_ge":
        metric = spec["metric"]
        num = agg[spec["numerator"]][metric]
        den = agg[spec["denominator"]][metric]
        ratio = num / den if den else float("inf")
        return ratio >= spec["min"], (
            f"{metric}: {spec['numerator']}/{spec['denominator']} = {ratio:.3g} >= {spec['min']}"
        )
    if kind == "flag_count_ge":
        count = agg[spec["variant"]]["unstable_count"]
        return count >= spec["count"], (
            f"unstable[{spec['variant']}] = {count}/{agg[spec['variant']]['repeats']} >= {spec['count']}"
        )
    if kind == "flag_count_le":
        count = agg[spec["variant"]]["unstable_count"]
        return count <= spec["count"], (
            f"unstable[{spec['variant']}] = {count}/{agg[spec['variant']]['repeats']} <= {spec['count']}"
        )
    if kind == "max_le":
        value = agg[spec["variant"]][spec["metric"]]
        return value <= spec["value"], (
            f"{spec['metric']}[{spec['variant']}] = {value:.6g} <= {spec['value']}"
        )
    if kind == "final_error_le":
        err = _final_error(first_logs[spec["variant"]])
        return err <= spec["value"], (
            f"final_error[{spec['variant']}] = {err:.6g} <= {spec['value']}"
        )
    raise ConfigError([f"compare.assertions: unknown type '{kind}'"])


def cmd_compare(args) -> int:
    resolved = validate(load_raw(args.config))
    compare = resolved.get("compare") or {}
    variants = compare.get("variants") or []
    if len(variants) < 2:
        raise ConfigError(["compare.variants: need at least two variants"])
    repeats = int(compare.get("repeats", 1))
    seed0 = int(args.seed if args.seed is not None else resolved["seed"])
    out = Path(args.out or resolved["output"]) / "compare"

    agg = {}
    first_logs = {}
    failed_variants = []
    for variant in variants:
        per_seed = []
        for rep in range(repeats):
            seed = seed0 + rep
            sub = out / variant / f"seed{seed}"
            try:
                log, metrics = _run_one(resolved, seed, variant, args.duration, sub)
            except Exception as exc:  # fail-operational: mark and continue
                print(f"variant {variant} seed {seed} failed: {exc}", file=sys.stderr)
                failed_variants.append(variant)
                break
            per_seed.append(metrics)
            if rep == 0:
                first_logs[variant] = log
        if per_seed:
            agg[variant] = _aggregate(per_seed)

    header = ["variant", "median_tracking_error_m", "force_stability_std_n",
              "max_constraint_penetration_m", "unstable_count", "repeats"]
    with open(out / "comparison.csv", "w") as fh:
        fh.write(f"# config_hash={config_hash(resolved)}\n")
        fh.write(",".join(header) + "\n")
        for variant in variants:
            if variant in agg:
                row = agg[variant]
                fh.write(",".join([variant] + [str(row[k]) for k in header[1:]]) + "\n")
            else:
                fh.write(f"{variant},failed,failed,failed,failed,failed\n")

    all_ok = not failed_variants
    lines = []
    for spec in compare.get("assertions") or []:
        ok, desc = _evaluate_assertion(spec, agg, first_logs)
        lines.append(f"{'PASS' if ok else 'FAIL'}  {desc}")
        all_ok = all_ok and ok
    with open(out / "comparison.txt", "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    for line in lines:
        print(line)
    print(f"wrote {out}/comparison.csv")
    return EXIT_OK if all_ok else EXIT_ASSERTION


def _resolve_path(resolved: dict, dotted: str):
    node = resolved
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node:
            raise ConfigError([f"sweep.path: '{dotted}' not found"])
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError([f"sweep.path: '{dotted}' not found"])
    return node, parts[-1]


def cmd_sweep(args) -> int:
    resolved = validate(load_raw(args.config))
    sweep = resolved.get("sweep") or {}
    if not sweep.get("path") or not sweep.get("values"):
        raise ConfigError(["sweep: needs 'path' and 'values'"])
    seed = int(args.seed if args.seed is not None else resolved["seed"])
    out = Path(args.out or resolved["output"]) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in sweep["values"]:
        point = json.loads(json.dumps(resolved))  # deep copy
        node, leaf = _resolve_path(point, sweep["path"])
        node[leaf] = value
        point.pop("sweep", None)
        sub = out / f"{sweep['path'].replace('.', '_')}_{value}"
        log, metrics = _run_one(point, seed, args.variant, args.duration, sub)
        rows.append((value, metrics))
        print(f"{sweep['path']}={value}: median_err={metrics.median_tracking_error:.6g}")
    with open(out / "sweep.csv", "w") as fh:
        fh.write(f"# config_hash={config_hash(resolved)}\n")
        fh.write("value,median_tracking_error_m,force_stability_std_n,"
                 "max_constraint_penetration_m,unstable\n")
        for value, metrics in rows:
            d = metrics.to_dict()
            fh.write(f"{value},{d['median_tracking_error_m']},{d['force_stability_std_n']},"
                     f"{d['max_constraint_penetration_m']},{int(d['unstable'])}\n")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import emit_report
    outputs = emit_report(args.logs, args.out, force=args.force)
    for path in outputs:
        print(f"wrote report under {path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .bridge import ServeSession, serve
    resolved = validate(load_raw(args.config))
    scenario = build_scenario(resolved, seed_override=args.seed, variant_override=args.variant)
    session = ServeSession(
        scenario=scenario,
        seed=int(args.seed if args.seed is not None else resolved["seed"]),
        port=args.port, pace=args.pace, telemetry_hz=args.telemetry_hz,
    )
    serve(session)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="teleop-mpc",
        description="Target-augmented feedback MPC teleoperation experiments",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment YAML")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", choices=[v.value for v in ControllerVariant], default=None)
        p.add_argument("--duration", type=float, default=None)
        p.add_argument("--out", default=None)

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_cmp = sub.add_parser("compare", help="run all configured variants on the same scenario")
    common(p_cmp)
    p_cmp.set_defaults(fn=cmd_compare)

    p_sweep = sub.add_parser("sweep", help="sweep one config value")
    common(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_rep = sub.add_parser("report", help="emit plot data and figures from logs")
    p_rep.add_argument("logs", nargs="+", help="log.csv paths")
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("--force", action="store_true",
                       help="allow logs with mismatched config hashes")
    p_rep.set_defaults(fn=cmd_report)

    p_srv = sub.add_parser("serve", help="real-time serve mode with the wire protocol")
    p_srv.add_argument("--config", required=True)
    p_srv.add_argument("--seed", type=int, default=None)
    p_srv.add_argument("--variant", choices=[v.value for v in ControllerVariant], default=None)
    p_srv.add_argument("--port", type=int, default=8765)
    p_srv.add_argument("--pace", type=float, default=1.0)
    p_srv.add_argument("--telemetry-hz", type=float, default=30.0)
    p_srv.set_defaults(fn=cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
