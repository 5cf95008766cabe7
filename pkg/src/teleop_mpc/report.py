"""Report emission: plot-ready columnar files plus rendered figures.

Every input log carries a config hash; mixing logs from different
experiment definitions is refused unless forced. Each emitted CSV repeats
the hash in its first line and each figure embeds it in the image metadata.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .exceptions import ContractViolationError
from .sim import ExperimentLog, Obstacle, find_bump, metric_constraint

DOWNSAMPLE_ROWS = 2000


def _load(log_path: Path):
    meta_path = log_path.with_suffix(".meta.json")
    return ExperimentLog.from_csv(log_path, meta_path if meta_path.exists() else None)


def _write_csv(path: Path, config_hash: str, header: list, rows: np.ndarray):
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _save_fig(fig, path: Path, config_hash: str):
    fig.savefig(path, dpi=130, metadata={"Description": f"config_hash={config_hash}"})
    plt.close(fig)


def _downsample(n_rows: int):
    stride = max(1, n_rows // DOWNSAMPLE_ROWS)
    return slice(None, None, stride)


def emit_overlay(log: ExperimentLog, out: Path, config_hash: str):
    t = log.t
    xd = log.block("xd_")
    ee = log.block("ee_")
    d = xd.shape[1]
    sel = _downsample(t.size)
    header = ["t"] + [f"xd_{i}" for i in range(d)] + [f"ee_{i}" for i in range(d)]
    _write_csv(out / "overlay.csv", config_hash, header,
               np.column_stack([t, xd, ee])[sel])

    fig, axes = plt.subplots(d + 1, 1, figsize=(7, 2.2 * (d + 1)))
    labels = "xyz"
    for i in range(d):
        axes[i].plot(t[sel], xd[sel, i], "k-", lw=1.0, label="commanded")
        axes[i].plot(t[sel], ee[sel, i], "-", lw=1.0, label="executed")
        axes[i].set_ylabel(f"{labels[i]} [m]")
        if i == 0:
            axes[i].legend(loc="upper right", fontsize=8)
    axes[d - 1].set_xlabel("t [s]")
    ax = axes[d]
    ax.plot(xd[sel, 0], xd[sel, 1], "k-", lw=1.0)
    ax.plot(ee[sel, 0], ee[sel, 1], "-", lw=1.0)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    fig.tight_layout()
    _save_fig(fig, out / "overlay.png", config_hash)


def emit_force(log: ExperimentLog, out: Path, config_hash: str):
    t = log.t
    f = np.linalg.norm(log.block("f_"), axis=1)
    fhf = log.column("fhf_mag")
    t_bump = find_bump(log)
    sel = _downsample(t.size)
    t_ds, f_ds, fhf_ds = t[sel], f[sel], fhf[sel]
    bump_marker = np.zeros_like(t_ds)
    if t_bump is not None:
        # annotate the retained row nearest the bump instant
        bump_marker[np.argmin(np.abs(t_ds - t_bump))] = 1.0
    _write_csv(out / "force.csv", config_hash, ["t", "f_contact_mag", "f_hf_mag", "bump"],
               np.column_stack([t_ds, f_ds, fhf_ds, bump_marker]))

    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t[sel], f[sel], lw=0.9, label="contact |f| [N]")
    ax.plot(t[sel], fhf[sel], lw=0.9, label="feedback |f_hf| [N]")
    if t_bump is not None:
        ax.axvline(t_bump, color="k", ls="--", lw=0.8, label="bump")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("force [N]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_fig(fig, out / "force.png", config_hash)


def emit_error_distribution(log: ExperimentLog, out: Path, config_hash: str):
    clutched = log.column("clutch") > 0.5
    err = np.linalg.norm(log.block("ee_") - log.block("xd_"), axis=1)[clutched]
    if err.size == 0:
        raise ContractViolationError("no clutched samples to summarize")
    quartiles = np.percentile(err, [0, 25, 50, 75, 100])
    _write_csv(out / "error_dist.csv", config_hash,
               ["min", "q25", "median", "q75", "max"], quartiles[None, :])

    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.boxplot(err, whis=(0, 100))
    ax.set_ylabel("|ee - x_d| [m]")
    ax.set_xticklabels([log.meta.get("variant", "run")])
    fig.tight_layout()
    _save_fig(fig, out / "error_dist.png", config_hash)


def emit_clearance(log: ExperimentLog, out: Path, config_hash: str):
    env = log.meta.get("environment", {})
    obstacles = env.get("obstacles", [])
    if not obstacles:
        return False
    t = log.t
    ee = log.block("ee_")
    columns = ["t"]
    stacks = [t]
    for i, obs in enumerate(obstacles):
        dist = np.linalg.norm(ee - np.asarray(obs["center"]), axis=1)
        columns += [f"dist_{i}", f"clearance_{i}"]
        stacks += [dist, dist - obs["radius"]]
    sel = _downsample(t.size)
    _write_csv(out / "clearance.csv", config_hash, columns, np.column_stack(stacks)[sel])

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for i, obs in enumerate(obstacles):
        dist = np.linalg.norm(ee - np.asarray(obs["center"]), axis=1)
        axes[0].plot(t[sel], dist[sel], lw=0.9, label=f"obstacle {i}")
        axes[0].axhline(obs["radius"], color="k", lw=0.8)
        axes[0].axhline(obs["radius"] + obs["buffer"], color="grey", ls="--", lw=0.8)
    axes[0].set_xlabel("t [s]")
    axes[0].set_ylabel("distance [m]")
    axes[0].legend(fontsize=8)
    xd = log.block("xd_")
    axes[1].plot(xd[sel, 0], xd[sel, 1], "k:", lw=1.0, label="commanded")
    axes[1].plot(ee[sel, 0], ee[sel, 1], "-", lw=1.0, label="executed")
    for obs in obstacles:
        center = np.asarray(obs["center"])
        axes[1].add_patch(plt.Circle(center, obs["radius"], color="k", alpha=0.6))
        axes[1].add_patch(plt.Circle(center, obs["radius"] + obs["buffer"],
                                     color="grey", alpha=0.25))
    axes[1].set_aspect("equal")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    _save_fig(fig, out / "clearance.png", config_hash)
    return True


def emit_report(log_paths, out_dir, force=False):
    """Emit plot-ready data files and figures for one or more logs.

    Returns the list of per-log output directories.
    """
    out_dir = Path(out_dir)
    logs = [(Path(p), _load(Path(p))) for p in log_paths]
    hashes = {log.meta.get("config_hash", "unhashed") for _, log in logs}
    if len(hashes) > 1 and not force:
        raise ContractViolationError(
            f"refusing to mix logs from different configs {sorted(hashes)}; pass force"
        )
    outputs = []
    for path, log in logs:
        config_hash = log.meta.get("config_hash", "unhashed")
        sub = out_dir / path.stem if len(logs) > 1 else out_dir
        sub.mkdir(parents=True, exist_ok=True)
        emit_overlay(log, sub, config_hash)
        emit_force(log, sub, config_hash)
        emit_error_distribution(log, sub, config_hash)
        has_obstacles = emit_clearance(log, sub, config_hash)
        if has_obstacles:
            # cross-check: the emitted minimum clearance must agree with the metric
            env = log.meta.get("environment", {})
            for i, obs in enumerate(env.get("obstacles", [])):
                obstacle = Obstacle(center=np.asarray(obs["center"]),
                                    radius=obs["radius"], buffer=obs["buffer"])
                metric_constraint(log, obstacle)
        outputs.append(sub)
    return outputs
