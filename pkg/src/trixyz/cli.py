"""Batch driver: config parsing, sweeps, worker scheduling, serialization.

One invocation runs one mode against the library and writes a CSV (or
JSON) results file plus a JSON sidecar with the fully resolved
configuration, code version, and wall time. Outputs are deterministic for
a fixed master seed regardless of worker count: every task derives its
randomness from (master_seed, task_index, trajectory_index) and the
single writer emits rows in task order. Timestamps appear only in the
sidecar so result files can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, analysis, cmf, meanfield
from .lattice import (
    SUBLATTICE_LETTERS,
    SUPPORTED_SIZES,
    brillouin_grid,
    build_cluster,
    lattice_structure_sum,
)
from .operators import Couplings, product_state, single_qubit_state

MODES = (
    "mf-phase-diagram",
    "mf-cut",
    "cmf-evolve",
    "cmf-sweep",
    "trajectories",
    "gap",
    "gap-extrapolate",
    "dispersion",
    "structure-factor",
)

AXIS_NAMES = ("x", "y", "z")

DENSE_CMF_MAX_SITES = 10
DENSE_GAP_COMFORT_SITES = 6


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs; file keys and flag names match the field
    names (flags use dashes)."""

    mode: str
    jx: float = 0.0
    jy: float = 0.0
    jz: float = 1.0
    gamma: float = 1.0
    # sweep grid: primary axis, plus a secondary axis for phase diagrams
    axis: str = "x"
    start: float | None = None
    stop: float | None = None
    step: float | None = None
    axis2: str = "y"
    start2: float | None = None
    stop2: float | None = None
    step2: float | None = None
    cluster_size: int = 3
    initial: str = "120"  # "120", "down", or "tilt:<angle in rad>"
    # numerical controls; None means the library default
    dt: float | None = None
    t_max: float | None = None
    steady_tol: float | None = None
    n_traj: int = 500
    t_total: float | None = None
    burn_in: float | None = None
    sample_every: float | None = None
    field_every: float | None = None
    fields: str = "self"
    k_grid: int = 40
    sizes: tuple[int, ...] = (1, 3, 6)
    n_eigs: int = 8
    master_seed: int = 2024
    out: str | None = None
    format: str = "csv"
    workers: int = 1

    @property
    def couplings(self) -> Couplings:
        return Couplings(jx=self.jx, jy=self.jy, jz=self.jz, gamma=self.gamma)

    @property
    def out_path(self) -> Path:
        if self.out is not None:
            return Path(self.out)
        ext = "csv" if self.format == "csv" else "json"
        return Path(f"trixyz_{self.mode}.{ext}")


@dataclass
class ValidationReport:
    fatal: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return not self.fatal

    def lines(self) -> list[str]:
        out = []
        for msg in self.fatal:
            out.append(f"FATAL: {msg}")
        for msg in self.warnings:
            out.append(f"WARNING: {msg}")
        for key in sorted(self.info):
            out.append(f"{key}: {self.info[key]}")
        out.append(f"feasible: {'yes' if self.feasible else 'no'}")
        return out


def _axis_grid(start, stop, step, name: str, report: ValidationReport):
    for label, v in (("start", start), ("stop", stop), ("step", step)):
        if v is None:
            report.fatal.append(f"{name}{label} is required for this mode")
            return None
    if step <= 0:
        report.fatal.append(f"{name}step must be > 0")
        return None
    if stop < start:
        report.fatal.append(f"{name}stop must be >= {name}start (empty sweep grid)")
        return None
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def validate(config: RunConfig) -> ValidationReport:
    """Dry-run feasibility report: grid shape, memory, runtime warnings.

    Report-only; run() refuses configs whose report carries fatal entries.
    """
    rep = ValidationReport()
    if config.mode not in MODES:
        rep.fatal.append(f"mode must be one of {', '.join(MODES)}")
        return rep
    if config.gamma <= 0:
        rep.fatal.append("gamma must be > 0")
    for name in ("dt", "t_max", "steady_tol", "t_total", "sample_every",
                 "field_every"):
        v = getattr(config, name)
        if v is not None and v <= 0:
            rep.fatal.append(f"{name} must be > 0")
    if config.burn_in is not None and config.burn_in < 0:
        rep.fatal.append("burn_in must be >= 0")
    if config.n_traj < 1:
        rep.fatal.append("n_traj must be >= 1")
    if config.workers < 1:
        rep.fatal.append("workers must be >= 1")
    if config.k_grid < 1:
        rep.fatal.append("k_grid must be >= 1")
    if config.n_eigs < 2:
        rep.fatal.append("n_eigs must be >= 2")
    if config.format not in ("csv", "json"):
        rep.fatal.append("format must be 'csv' or 'json'")
    if config.fields not in ("self", "off"):
        rep.fatal.append("fields must be 'self' or 'off'")
    if config.axis not in AXIS_NAMES or config.axis2 not in AXIS_NAMES:
        rep.fatal.append("axis and axis2 must be one of x, y, z")
    try:
        _parse_initial(config.initial)
    except ValueError as err:
        rep.fatal.append(f"initial: {err}")

    mode = config.mode
    n_tasks = 1

    if mode in ("mf-cut", "cmf-sweep", "mf-phase-diagram"):
        grid = _axis_grid(config.start, config.stop, config.step, "", rep)
        if grid is not None:
            n_tasks = len(grid)
        if mode == "mf-phase-diagram":
            grid2 = _axis_grid(config.start2, config.stop2, config.step2,
                               "secondary ", rep)
            if grid is not None and grid2 is not None:
                n_tasks = len(grid) * len(grid2)
        if mode == "mf-phase-diagram" and config.axis == config.axis2:
            rep.fatal.append("axis2 must differ from axis for a phase diagram")

    cluster_modes = ("cmf-evolve", "cmf-sweep", "trajectories", "gap",
                     "structure-factor")
    if mode in cluster_modes:
        if config.cluster_size not in SUPPORTED_SIZES:
            rep.fatal.append(
                f"cluster_size must be one of {sorted(SUPPORTED_SIZES)}"
            )
        else:
            L = config.cluster_size
            state_bytes = 16 * (2**L)
            rep.info["state_vector_bytes"] = state_bytes
            rep.info["density_matrix_bytes"] = 16 * (4**L)
            if mode == "gap":
                rep.info["superoperator_bytes_dense"] = 16 * (4**L) ** 2
                if L > DENSE_GAP_COMFORT_SITES and L <= DENSE_CMF_MAX_SITES:
                    rep.warnings.append(
                        f"gap at L={L} exceeds the dense-spectrum budget; "
                        "sparse Arnoldi will run but expect a long wait"
                    )
                elif L > DENSE_CMF_MAX_SITES:
                    rep.warnings.append(
                        f"gap at L={L}: exact spectrum infeasible "
                        f"(superoperator dimension 4^{L}); suggest a "
                        "trajectory-estimate fallback (fit the relaxation "
                        "rate of run_trajectories observables)"
                    )
            if mode in ("cmf-evolve", "cmf-sweep") and L > DENSE_CMF_MAX_SITES:
                rep.fatal.append(
                    f"cluster_size {L} exceeds the dense backend limit "
                    f"({DENSE_CMF_MAX_SITES}); use mode=trajectories"
                )
            if mode in ("trajectories", "structure-factor"):
                rep.info["trajectory_batch_bytes"] = state_bytes * min(
                    64, config.n_traj
                )
                n_tasks = max(n_tasks, 1)

    if mode == "gap-extrapolate":
        uniq = sorted(set(config.sizes))
        if len(uniq) < 2:
            rep.fatal.append("sizes must contain at least two distinct sizes")
        bad = [s for s in uniq if s not in SUPPORTED_SIZES]
        if bad:
            rep.fatal.append(
                f"sizes contains unsupported cluster sizes {bad}"
            )
        if any(s > DENSE_CMF_MAX_SITES for s in uniq):
            rep.warnings.append(
                "sizes above 10 are infeasible for spectra; drop 15"
            )
        n_tasks = len(uniq)

    if mode == "dispersion":
        n_tasks = config.k_grid**2  # upper bound before zone clipping

    rep.info["task_count_estimate"] = n_tasks
    return rep


# ---------------------------------------------------------------------------
# initial-state selectors


def _parse_initial(selector: str):
    if selector in ("120", "down"):
        return selector, None
    if selector.startswith("tilt:"):
        try:
            return "tilt", float(selector.split(":", 1)[1])
        except ValueError as err:
            raise ValueError(f"bad tilt angle in {selector!r}") from err
    raise ValueError(
        f"unknown initial-state selector {selector!r} "
        "(use '120', 'down', or 'tilt:<angle>')"
    )


def _initial_state(geometry, selector: str) -> np.ndarray:
    kind, angle = _parse_initial(selector)
    if kind == "120":
        return cmf.product_state_120(geometry)
    if kind == "down":
        return cmf.all_down_state(geometry)
    return product_state([single_qubit_state(angle)] * geometry.size)


def _initial_bloch_config(selector: str) -> np.ndarray:
    kind, angle = _parse_initial(selector)
    if kind == "120":
        return meanfield.state_120()
    if kind == "down":
        return np.tile([0.0, 0.0, -1.0], (3, 1))
    return np.tile([np.cos(angle), np.sin(angle), 0.0], (3, 1))


def _with_axis(c: Couplings, axis: str, value: float) -> Couplings:
    return replace(c, **{f"j{axis}": float(value)})


# ---------------------------------------------------------------------------
# per-task evaluators (module level so worker processes can unpickle them)


def _task_mf_label(args) -> dict:
    jx, jy, jz, gamma = args
    c = Couplings(jx=jx, jy=jy, jz=jz, gamma=gamma)
    return {"jx": jx, "jy": jy, "jz": jz, "label": meanfield.classify_phase(c)}


def _task_mf_cut(args) -> dict:
    # label the attractor actually reached from the configured initial state;
    # one integration per point keeps long cuts affordable
    jx, jy, jz, gamma, selector = args
    c = Couplings(jx=jx, jy=jy, jz=jz, gamma=gamma)
    traj = meanfield.integrate_bloch(_initial_bloch_config(selector), c)
    if traj.converged:
        fp = meanfield.newton_polish(traj.final, c)
        config = fp.config if fp is not None else traj.final
        label = meanfield.classify_config(config)
    else:
        tail = traj.m[len(traj.m) // 2 :]
        swing = float(np.max(tail.max(axis=0) - tail.min(axis=0)))
        label = meanfield.OSC if swing > 1e-3 else meanfield.UNDETERMINED
        config = tail.mean(axis=0)
    row = {"jx": jx, "jy": jy, "jz": jz, "label": label}
    for s, letter in enumerate(SUBLATTICE_LETTERS.lower()):
        for a, comp in enumerate(AXIS_NAMES):
            row[f"m_{letter}_{comp}"] = float(config[s, a])
    ops = cmf.order_parameters(config)
    row["o_af"] = ops.o_af
    row["o_ntaf"] = ops.o_ntaf
    return row


def _evolve_controls(config: RunConfig) -> cmf.EvolveControls:
    kw = {}
    for name in ("dt", "t_max", "steady_tol", "sample_every", "field_every"):
        v = getattr(config, name)
        if v is not None:
            kw[name] = v
    kw["fields"] = config.fields
    return cmf.EvolveControls(**kw)


def _trajectory_controls(config: RunConfig, task_id: int = 0,
                         collect_correlations: bool = False) -> cmf.TrajectoryControls:
    kw = {}
    for name in ("dt", "t_total", "burn_in", "sample_every", "field_every"):
        v = getattr(config, name)
        if v is not None:
            kw[name] = v
    return cmf.TrajectoryControls(
        n_traj=config.n_traj,
        master_seed=config.master_seed,
        fields=config.fields,
        task_id=task_id,
        collect_correlations=collect_correlations,
        **kw,
    )


def _task_cmf_sweep(args) -> dict:
    config, axis, value = args
    c = _with_axis(config.couplings, axis, value)
    geometry = build_cluster(config.cluster_size)
    result = cmf.evolve_cmf(
        geometry, c, _initial_state(geometry, config.initial),
        _evolve_controls(config),
    )
    ops = cmf.order_parameters(result)
    row = {
        "jx": c.jx, "jy": c.jy, "jz": c.jz,
        "label": cmf.classify_cmf_result(result),
        "converged": result.converged,
        "o_af": ops.o_af, "o_ntaf": ops.o_ntaf,
        "o_af_y": ops.o_af_y, "o_ntaf_y": ops.o_ntaf_y,
    }
    sub_config = cmf._sublattice_config_static(result)
    for s, letter in enumerate(SUBLATTICE_LETTERS.lower()):
        for a, comp in enumerate(AXIS_NAMES):
            row[f"m_{letter}_{comp}"] = float(sub_config[s, a])
    return row


def _task_gap(args) -> dict:
    size, config = args
    geometry = build_cluster(size)
    res = analysis.liouvillian_gap(
        geometry, config.couplings, n_eigs=config.n_eigs
    )
    return {
        "cluster_size": res.cluster_size,
        "lambda_g": res.lambda_g,
        "method": res.method,
        "residual": res.residual,
        "n_zero_modes": res.n_zero_modes,
        "max_real_part": res.max_real_part,
    }, res


# ---------------------------------------------------------------------------
# mode drivers; each returns (columns, rows, extras)


def _map_ordered(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def _run_mf_phase_diagram(config: RunConfig):
    grid1 = _grid_values(config.start, config.stop, config.step)
    grid2 = _grid_values(config.start2, config.stop2, config.step2)
    c = config.couplings
    tasks = []
    for v1 in grid1:
        for v2 in grid2:
            point = _with_axis(_with_axis(c, config.axis, v1), config.axis2, v2)
            tasks.append((point.jx, point.jy, point.jz, point.gamma))
    rows = _map_ordered(_task_mf_label, tasks, config.workers)
    return ["jx", "jy", "jz", "label"], rows, {"grid_shape": [len(grid1), len(grid2)]}


def _run_mf_cut(config: RunConfig):
    grid = _grid_values(config.start, config.stop, config.step)
    c = config.couplings
    tasks = []
    for v in grid:
        point = _with_axis(c, config.axis, v)
        tasks.append((point.jx, point.jy, point.jz, point.gamma, config.initial))
    rows = _map_ordered(_task_mf_cut, tasks, config.workers)
    cols = ["jx", "jy", "jz", "label"]
    cols += [f"m_{s}_{a}" for s in "abc" for a in AXIS_NAMES]
    cols += ["o_af", "o_ntaf"]
    return cols, rows, {"axis": config.axis, "n_points": len(grid)}


def _run_cmf_evolve(config: RunConfig):
    geometry = build_cluster(config.cluster_size)
    result = cmf.evolve_cmf(
        geometry, config.couplings,
        _initial_state(geometry, config.initial),
        _evolve_controls(config),
    )
    ops = cmf.order_parameters(result)
    rows = []
    for j in range(geometry.size):
        bl = result.site_bloch[j]
        rows.append({
            "site": j,
            "sublattice": SUBLATTICE_LETTERS[geometry.sublattices[j]],
            "m_x": float(bl[0]), "m_y": float(bl[1]), "m_z": float(bl[2]),
        })
    extras = {
        "converged": result.converged,
        "t_final": result.final.time,
        "o_af": ops.o_af,
        "o_ntaf": ops.o_ntaf,
        "label": cmf.classify_cmf_result(result),
        "boundary_fields": {
            k: [float(x) for x in v]
            for k, v in result.final.boundary_fields.items()
        },
    }
    return ["site", "sublattice", "m_x", "m_y", "m_z"], rows, extras


def _run_cmf_sweep(config: RunConfig):
    grid = _grid_values(config.start, config.stop, config.step)
    tasks = [(config, config.axis, v) for v in grid]
    rows = _map_ordered(_task_cmf_sweep, tasks, config.workers)
    cols = ["jx", "jy", "jz", "label", "converged",
            "o_af", "o_ntaf", "o_af_y", "o_ntaf_y"]
    cols += [f"m_{s}_{a}" for s in "abc" for a in AXIS_NAMES]
    return cols, rows, {"axis": config.axis, "n_points": len(grid)}


def _run_trajectories(config: RunConfig):
    geometry = build_cluster(config.cluster_size)
    ens = cmf.run_trajectories(
        geometry, config.couplings,
        _initial_state(geometry, config.initial),
        _trajectory_controls(config),
    )
    t_from = config.burn_in if config.burn_in is not None else 30.0
    try:
        blocked_mean, blocked_se = cmf.blocked_steady_stats(ens, t_from)
    except ValueError:
        blocked_mean = ens.site_bloch_mean
        blocked_se = ens.site_bloch_stderr
    rows = []
    for j in range(geometry.size):
        rows.append({
            "site": j,
            "sublattice": SUBLATTICE_LETTERS[geometry.sublattices[j]],
            "m_x": float(ens.site_bloch_mean[j, 0]),
            "m_y": float(ens.site_bloch_mean[j, 1]),
            "m_z": float(ens.site_bloch_mean[j, 2]),
            "se_x": float(ens.site_bloch_stderr[j, 0]),
            "se_y": float(ens.site_bloch_stderr[j, 1]),
            "se_z": float(ens.site_bloch_stderr[j, 2]),
            "bm_x": float(blocked_mean[j, 0]),
            "bm_y": float(blocked_mean[j, 1]),
            "bm_z": float(blocked_mean[j, 2]),
            "bse_x": float(blocked_se[j, 0]),
            "bse_y": float(blocked_se[j, 1]),
            "bse_z": float(blocked_se[j, 2]),
        })
    extras = {
        "n_traj": ens.n_traj,
        "master_seed": ens.master_seed,
        "mean_jumps": float(ens.n_jumps.mean()),
    }
    cols = ["site", "sublattice", "m_x", "m_y", "m_z", "se_x", "se_y", "se_z",
            "bm_x", "bm_y", "bm_z", "bse_x", "bse_y", "bse_z"]
    return cols, rows, extras


def _run_gap(config: RunConfig):
    row, _ = _task_gap((config.cluster_size, config))
    cols = ["cluster_size", "lambda_g", "method", "residual",
            "n_zero_modes", "max_real_part"]
    return cols, [row], {}


def _run_gap_extrapolate(config: RunConfig):
    sizes = sorted(set(config.sizes))
    results = []
    rows = []
    for size in sizes:
        row, res = _task_gap((size, config))
        results.append(res)
        rows.append(row)
    fit = analysis.extrapolate_gap(results)
    for row in rows:
        row["inv_size"] = 1.0 / row["cluster_size"]
        row["intercept"] = fit.intercept
        row["slope"] = fit.slope
        row["clamped"] = fit.clamped
    cols = ["cluster_size", "inv_size", "lambda_g", "method", "residual",
            "n_zero_modes", "max_real_part", "intercept", "slope", "clamped"]
    extras = {
        "intercept": fit.intercept,
        "slope": fit.slope,
        "max_fit_error": fit.max_fit_error,
        "clamped": fit.clamped,
    }
    return cols, rows, extras


def _run_dispersion(config: RunConfig):
    kgrid = brillouin_grid(config.k_grid)
    c = config.couplings
    rows = []
    for k in kgrid:
        res = analysis.pm_dispersion(k, c)
        rows.append({
            "kx_over_pi": float(k[0] / np.pi),
            "ky_over_pi": float(k[1] / np.pi),
            "structure_sum": float(lattice_structure_sum(k)),
            "growth_rate": float(res.growth_rate),
            "unstable": bool(res.unstable),
        })
    f_star = analysis.most_unstable_f(c)
    extras = {"most_unstable_f": f_star}
    if -2.0 < f_star < 6.0:
        kx = analysis.kx_for_structure_sum(f_star)
        extras["most_unstable_kx_over_pi"] = float(kx / np.pi)
    cols = ["kx_over_pi", "ky_over_pi", "structure_sum", "growth_rate",
            "unstable"]
    return cols, rows, extras


def _run_structure_factor(config: RunConfig):
    geometry = build_cluster(config.cluster_size)
    ens = cmf.run_trajectories(
        geometry, config.couplings,
        _initial_state(geometry, config.initial),
        _trajectory_controls(config, collect_correlations=True),
    )
    kgrid = brillouin_grid(config.k_grid)
    sf = analysis.structure_factor(ens.correlations_mean, geometry, kgrid)
    rows = []
    for k, v in zip(sf.kgrid, sf.values):
        rows.append({
            "kx_over_pi": float(k[0] / np.pi),
            "ky_over_pi": float(k[1] / np.pi),
            "s_k": float(v),
        })
    extras = {
        "n_traj": ens.n_traj,
        "master_seed": ens.master_seed,
        "mean_jumps": float(ens.n_jumps.mean()),
        "s_max": float(np.max(sf.values)),
        "flat_value": 1.0 / geometry.size,
    }
    return ["kx_over_pi", "ky_over_pi", "s_k"], rows, extras


_DRIVERS = {
    "mf-phase-diagram": _run_mf_phase_diagram,
    "mf-cut": _run_mf_cut,
    "cmf-evolve": _run_cmf_evolve,
    "cmf-sweep": _run_cmf_sweep,
    "trajectories": _run_trajectories,
    "gap": _run_gap,
    "gap-extrapolate": _run_gap_extrapolate,
    "dispersion": _run_dispersion,
    "structure-factor": _run_structure_factor,
}


def _grid_values(start, stop, step) -> np.ndarray:
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


# ---------------------------------------------------------------------------
# serialization


def _format_cell(value) -> str:
    if isinstance(value, bool) or isinstance(value, np.bool_):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.12g}"
    return str(value)


def _write_results(path: Path, fmt: str, columns: list[str],
                   rows: list[dict], failed: str | None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format_cell(row.get(c, "")) for c in columns])
            if failed is not None:
                writer.writerow([f"# FAILED: {failed}"])
    else:
        payload = {
            "columns": columns,
            "records": [
                {c: _json_cell(row.get(c)) for c in columns} for row in rows
            ],
        }
        if failed is not None:
            payload["failed"] = failed
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _json_cell(value):
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def _write_sidecar(path: Path, config: RunConfig, status: str,
                   wall_time: float, extras: dict, error: str | None) -> None:
    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(config).items()},
        "version": __version__,
        "status": status,
        "wall_time_s": wall_time,
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
        "extras": {k: _json_cell(v) if not isinstance(v, (dict, list)) else v
                   for k, v in extras.items()},
    }
    if error is not None:
        meta["error"] = error
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def run(config: RunConfig) -> int:
    """Execute one mode and write the results file plus its sidecar.

    Returns a process exit status: 0 on success, 2 on an invalid
    configuration (diagnostics name the offending fields), 1 when the run
    itself failed (partial rows are flushed with a failure marker).
    """
    report = validate(config)
    if not report.feasible:
        for msg in report.fatal:
            print(f"error: {msg}", file=sys.stderr)
        return 2
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)

    out = config.out_path
    sidecar = out.with_name(out.name + ".meta.json")
    t0 = time.monotonic()
    try:
        columns, rows, extras = _DRIVERS[config.mode](config)
    except Exception as err:  # noqa: BLE001 - mid-run failures become artifacts
        wall = time.monotonic() - t0
        _write_results(out, config.format, ["error"], [], f"{err}")
        _write_sidecar(sidecar, config, "failed", wall, {}, str(err))
        print(f"error: {config.mode} failed: {err}", file=sys.stderr)
        return 1
    wall = time.monotonic() - t0
    _write_results(out, config.format, columns, rows, None)
    _write_sidecar(sidecar, config, "ok", wall, extras, None)
    print(f"{config.mode}: wrote {len(rows)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trixyz",
        description=(
            "Steady-state simulations of the dissipative XYZ model on the "
            "triangular lattice. The first positional argument is a run "
            "mode, or 'validate' followed by a mode for a dry-run report."
        ),
    )
    p.add_argument("mode", choices=MODES + ("validate",))
    p.add_argument("submode", nargs="?", choices=MODES,
                   help="mode to validate (only with 'validate')")
    p.add_argument("--config", type=str,
                   help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--jx", type=float)
    p.add_argument("--jy", type=float)
    p.add_argument("--jz", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--axis", choices=AXIS_NAMES)
    p.add_argument("--start", type=float)
    p.add_argument("--stop", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--axis2", choices=AXIS_NAMES)
    p.add_argument("--start2", type=float)
    p.add_argument("--stop2", type=float)
    p.add_argument("--step2", type=float)
    p.add_argument("--L", dest="cluster_size", type=int)
    p.add_argument("--initial", type=str)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--steady-tol", dest="steady_tol", type=float)
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.add_argument("--t-total", dest="t_total", type=float)
    p.add_argument("--burn-in", dest="burn_in", type=float)
    p.add_argument("--sample-every", dest="sample_every", type=float)
    p.add_argument("--field-every", dest="field_every", type=float)
    p.add_argument("--fields", choices=("self", "off"))
    p.add_argument("--k-grid", dest="k_grid", type=int)
    p.add_argument("--sizes", type=str,
                   help="comma-separated cluster sizes for gap-extrapolate")
    p.add_argument("--n-eigs", dest="n_eigs", type=int)
    p.add_argument("--seed", dest="master_seed", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--workers", type=int)
    return p


_CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def _load_config(path: str) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = sorted(set(data) - _CONFIG_FIELDS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    mode = args.mode if args.mode != "validate" else args.submode
    if mode is None:
        raise ValueError("'validate' needs a mode to validate")
    values: dict = {}
    if args.config:
        values.update(_load_config(args.config))
    for name in _CONFIG_FIELDS - {"mode"}:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if "sizes" in values and isinstance(values["sizes"], str):
        values["sizes"] = tuple(
            int(tok) for tok in values["sizes"].split(",") if tok.strip()
        )
    if "sizes" in values:
        values["sizes"] = tuple(int(s) for s in values["sizes"])
    values["mode"] = mode
    return RunConfig(**values)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = build_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if args.mode == "validate":
        report = validate(config)
        for line in report.lines():
            print(line)
        return 0
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
