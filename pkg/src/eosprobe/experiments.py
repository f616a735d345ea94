"""Experiment families: grids of independently reproducible training cells, and their reductions.

Each cell is a fully resolved flat config (see :mod:`eosprobe.config`). A cell
run writes, into its own directory, the config it ran, the telemetry stream,
and a summary; rerunning the stored config reproduces the telemetry file
byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from .autodiff import HessianOperator, eval_loss
from .data import LabeledDataset
from .models import ModelLoss, ModelSpec
from .spectral import top_k_eigenpairs
from .storage import TelemetryRecord, TelemetryWriter, read_snapshot, read_telemetry
from .trainer import RunRecord, run_training

log = logging.getLogger(__name__)

FAMILIES = ("eos_sweep", "class_sweep", "fine_grained_entry", "flow_scaling", "cusp_probe",
            "attribution_table")
EDGE_GATE = 0.7
MIN_TABLE_POINTS = 3


class IntegrityError(AssertionError):
    pass


@dataclass
class Cell:
    name: str
    config: dict
    labels: dict = field(default_factory=dict)


@dataclass
class ExperimentPlan:
    family: str
    cells: list[Cell]
    out_dir: Path | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown experiment family {self.family!r}")
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise ValueError("cell names must be unique")


# -- plan construction ---------------------------------------------------------


def _cell(base: dict, name: str, labels: dict, **overrides) -> Cell:
    return Cell(name, cfgmod.resolve(base, overrides), labels)


def eos_sweep_plan(base: dict, etas: Sequence[float], activations: Sequence[str] = ("relu", "tanh"),
                   archs: Sequence[str] = ("mlp",), out_dir=None) -> ExperimentPlan:
    cells = []
    for arch in archs:
        for act in activations:
            for eta in etas:
                cells.append(_cell(base, f"{arch}-{act}-eta{eta:g}",
                                   {"arch": f"{arch}-{act}", "eta": eta},
                                   **{"model.arch": arch, "model.activation": act,
                                      "train.eta": eta}))
    return ExperimentPlan("eos_sweep", cells, out_dir)


def class_sweep_plan(base: dict, n_cs: Sequence[int] = (2, 3, 5), include_full: bool = True,
                     out_dir=None) -> ExperimentPlan:
    """One cell per class count, keeping classes ``0..n_c-1`` of the base dataset."""
    full = int(cfgmod.resolve(base)["data.n_c"])
    k = int(cfgmod.resolve(base)["train.k"])
    counts = [n for n in n_cs if n < full] + ([full] if include_full else [])
    cells = []
    for n in counts:
        classes = None if n == full else list(range(n))
        cells.append(_cell(base, f"nc{n}", {"n_c": n},
                           **{"data.classes": classes, "train.k": max(k, n)}))
    return ExperimentPlan("class_sweep", cells, out_dir)


def fine_grained_plan(base: dict, every: int = 10, iters: int = 2000, out_dir=None) -> ExperimentPlan:
    cell = _cell(base, "entry", {"every": every},
                 **{"train.telemetry_every": every, "train.max_iters": iters})
    return ExperimentPlan("fine_grained_entry", [cell], out_dir)


def flow_scaling_plan(base: dict, n_Ds: Sequence[int], out_dir=None) -> ExperimentPlan:
    """Gradient-flow cells on stratified subsets of one base dataset.

    The base dataset is built at the largest requested size (never below its
    configured ``data.n_D``) and each cell draws ``n_D`` examples from it.
    """
    resolved = cfgmod.resolve(base)
    overrides = {"train.mode": "gradient_flow"}
    if resolved["data.source"] == "synthetic":
        overrides["data.n_D"] = max(int(resolved["data.n_D"]), *[int(n) for n in n_Ds])
    cells = [_cell(base, f"nD{n}", {"n_D": int(n)}, **overrides, **{"data.subset_n_D": int(n)})
             for n in n_Ds]
    return ExperimentPlan("flow_scaling", cells, out_dir)


# -- running cells -------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_cell(cell: Cell, cell_dir=None) -> RunRecord:
    """Build and train one cell; with ``cell_dir`` write config, telemetry and summary there."""
    spec, data, tcfg = cfgmod.build(cell.config)
    if cell_dir is None:
        return run_training(tcfg, spec, data)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    _write_text(cell_dir / "config.cfg", cfgmod.dumps(cell.config))
    snap_dir = cell_dir / "snapshots" if cell.config["output.snapshots_to_disk"] else None
    partial = cell_dir / "telemetry.jsonl.partial"
    with TelemetryWriter(partial) as sink:
        run = run_training(tcfg, spec, data, [sink], snap_dir,
                           {"config_hash": cfgmod.config_hash(cell.config)})
    os.replace(partial, cell_dir / "telemetry.jsonl")
    summary = {
        "cell": cell.name,
        "labels": cell.labels,
        "termination": run.termination,
        "final_iteration": run.final_iteration,
        "final_loss": run.final_loss,
        "final_t": run.final_t,
        "n_params": spec.n_params,
        "n_D": data.n_D,
        "n_c": data.n_c,
        "config_hash": cfgmod.config_hash(cell.config),
        "version": __version__,
    }
    _write_text(cell_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run


def _job(args):
    cell, out_dir = args
    return run_cell(cell, None if out_dir is None else Path(out_dir) / cell.name)


def run_plan(plan: ExperimentPlan, threads: int = 1) -> dict[str, RunRecord]:
    """Run every cell, in parallel processes when ``threads > 1``; results keep plan order."""
    out = Path(plan.out_dir) / "cells" if plan.out_dir is not None else None
    jobs = [(c, out) for c in plan.cells]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(_job, jobs))
    else:
        runs = [_job(j) for j in jobs]
    for cell, run in zip(plan.cells, runs):
        log.info("cell %s: %s after %d iterations", cell.name, run.termination, run.final_iteration)
    return {c.name: r for c, r in zip(plan.cells, runs)}


def load_cell_dir(path) -> tuple[Cell, list[TelemetryRecord], dict]:
    path = Path(path)
    cfg = cfgmod.resolve(cfgmod.load(path / "config.cfg"))
    summary = json.loads((path / "summary.json").read_text())
    cell = Cell(summary.get("cell", path.name), cfg, summary.get("labels", {}))
    return cell, read_telemetry(path / "telemetry.jsonl"), summary


def load_run_dir(path) -> tuple[Cell, RunRecord]:
    """Rebuild a :class:`RunRecord` (with on-disk snapshots, if any) from a cell directory."""
    cell, records, summary = load_cell_dir(path)
    run = RunRecord(cfgmod.build_train(cell.config), records=records,
                    termination=summary["termination"], final_iteration=summary["final_iteration"],
                    final_loss=summary["final_loss"], final_t=summary["final_t"])
    snap_dir = Path(path) / "snapshots"
    if snap_dir.is_dir():
        for snap in sorted(snap_dir.glob("snap_*.bin")):
            theta, meta = read_snapshot(snap)
            run.snapshots[int(meta["iteration"])] = theta
    return cell, run


# -- reductions ----------------------------------------------------------------


def _rho(rec: TelemetryRecord, i: int) -> float | None:
    return rec.rho_at(i)


def check_rho_order(records: Sequence[TelemetryRecord]) -> None:
    """Stability ratios must be nonincreasing in index at every point.

    An undefined ratio (curvature at or below zero) ranks below every defined one.
    """
    for rec in records:
        vals = [-math.inf if r is None else r for r in rec.rho]
        for i in range(len(vals) - 1):
            if vals[i] < vals[i + 1]:
                raise IntegrityError(
                    f"iteration {rec.iteration}: rho_{i + 1}={vals[i]} < rho_{i + 2}={vals[i + 1]}")


def long_table(runs: Mapping[str, RunRecord | Sequence[TelemetryRecord]],
               series: Mapping[str, callable]) -> list[dict]:
    """Figure-ready rows ``(cell, series, iteration, t, value)``, one per point per series."""
    rows = []
    for name, run in runs.items():
        records = run.records if isinstance(run, RunRecord) else run
        for label, fn in series.items():
            for rec in records:
                value = fn(rec)
                if value is None:
                    continue
                rows.append({"cell": name, "series": label, "iteration": rec.iteration,
                             "t": rec.t, "value": value})
    return rows


def top_bulk_series(k_top_offset: int = 0) -> dict:
    return {
        "rho_top": lambda r: _rho(r, r.k_top + k_top_offset),
        "rho_bulk": lambda r: _rho(r, r.k_top + k_top_offset + 1),
        "top_norm": lambda r: r.top_norm,
        "bulk_norm": lambda r: r.bulk_norm,
    }


@dataclass
class SweepResult:
    plan: ExperimentPlan
    runs: dict[str, RunRecord]
    table: list[dict]


def run_eos_sweep(plan: ExperimentPlan, threads: int = 1) -> SweepResult:
    """Per cell: the last-top and first-bulk stability ratios plus the gradient split norms."""
    if plan.family != "eos_sweep":
        raise ValueError("plan is not an eos_sweep")
    runs = run_plan(plan, threads)
    for run in runs.values():
        check_rho_order(run.records)
    return SweepResult(plan, runs, long_table(runs, top_bulk_series()))


def run_class_sweep(plan: ExperimentPlan, threads: int = 1) -> SweepResult:
    """Per class count n_c: ratios at index n_c - 1 and n_c (top subspace fixed at n_c - 1)."""
    if plan.family != "class_sweep":
        raise ValueError("plan is not a class_sweep")
    runs = run_plan(plan, threads)
    for run in runs.values():
        check_rho_order(run.records)
    series = {
        "rho_nc_minus_1": lambda r: _rho(r, r.k_top),
        "rho_nc": lambda r: _rho(r, r.k_top + 1),
    }
    return SweepResult(plan, runs, long_table(runs, series))


def run_fine_grained_entry(plan: ExperimentPlan, threads: int = 1) -> SweepResult:
    """Dense telemetry around the entry into the edge: rho_1..rho_k_top and |d_i|."""
    if plan.family != "fine_grained_entry":
        raise ValueError("plan is not a fine_grained_entry")
    runs = run_plan(plan, threads)
    k_top = max((r.k_top for run in runs.values() for r in run.records), default=0)
    series = {}
    for i in range(1, k_top + 1):
        series[f"rho_{i}"] = lambda r, i=i: _rho(r, i)
        series[f"abs_d_{i}"] = lambda r, i=i: abs(r.coords[i - 1]) if len(r.coords) >= i else None
    return SweepResult(plan, runs, long_table(runs, series))


@dataclass
class FlowScalingResult:
    plan: ExperimentPlan
    runs: dict[str, RunRecord]
    peaks: list[dict]          # n_D, peak_lambda1, t_peak, iteration_peak
    slope: float
    intercept: float
    r_squared: float
    table: list[dict]


def peak_curvature(records: Sequence[TelemetryRecord]) -> tuple[int, float, float]:
    """(iteration, lambda_1, t) at the first global maximum of lambda_1."""
    lams = [r.eigenvalues[0] if r.eigenvalues else -math.inf for r in records]
    if not lams:
        raise ValueError("no telemetry")
    i = int(np.argmax(lams))
    return records[i].iteration, lams[i], records[i].t


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return math.nan, math.nan, math.nan
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else math.nan
    return float(slope), float(intercept), r2


def run_flow_scaling(plan: ExperimentPlan, threads: int = 1) -> FlowScalingResult:
    if plan.family != "flow_scaling":
        raise ValueError("plan is not a flow_scaling")
    runs = run_plan(plan, threads)
    peaks = []
    for cell in plan.cells:
        it, lam, t = peak_curvature(runs[cell.name].records)
        peaks.append({"n_D": cell.labels["n_D"], "peak_lambda1": lam, "t_peak": t,
                      "iteration_peak": it})
    slope, intercept, r2 = linear_fit([p["n_D"] for p in peaks], [p["peak_lambda1"] for p in peaks])
    table = long_table(runs, {"lambda1": lambda r: r.eigenvalues[0] if r.eigenvalues else None})
    return FlowScalingResult(plan, runs, peaks, slope, intercept, r2, table)


@dataclass
class CuspProfile:
    deltas: np.ndarray
    values: np.ndarray
    peak_iteration: int
    snapshot_iteration: int
    lambda1: float
    direction: np.ndarray
    theta_star: np.ndarray
    base_loss: float


def cusp_grid(n_delta: int = 121, half_width: float = 0.003) -> np.ndarray:
    """Uniform grid on [-half_width, half_width]; endpoints exact and, for odd sizes, 0 exact."""
    if n_delta < 2:
        raise ValueError("need at least two grid points")
    steps = np.arange(n_delta) * 2.0 - (n_delta - 1)
    return half_width * (steps / (n_delta - 1))


def run_cusp_probe(run: RunRecord, spec: ModelSpec, data: LabeledDataset, n_delta: int = 121,
                   half_width: float = 0.003, tol: float = 1e-8, max_iters: int = 2000,
                   seed: int = 0) -> CuspProfile:
    """Loss change along the top Hessian eigenvector at the snapshot nearest peak curvature."""
    if not run.snapshots:
        raise ValueError("run has no snapshots")
    peak_it, _, _ = peak_curvature(run.records)
    snap_it = min(run.snapshots, key=lambda n: (abs(n - peak_it), n))
    theta_star = run.restore(snap_it)
    graph = ModelLoss(spec)
    op = HessianOperator(graph, theta_star, data)
    eig = top_k_eigenpairs(op.matvec, op.n_params, min(2, op.n_params), tol=tol,
                           max_iters=max_iters, seed=seed)
    h1 = eig.eigenvectors[:, 0]
    base = eval_loss(graph, theta_star, data)
    deltas = cusp_grid(n_delta, half_width)
    values = np.array([eval_loss(graph, theta_star + d * h1, data) - base for d in deltas])
    return CuspProfile(deltas, values, peak_it, snap_it, float(eig.eigenvalues[0]), h1,
                       theta_star, base)


def attribution_table(telemetry: Mapping[str, Sequence[TelemetryRecord]],
                      labels: Mapping[str, dict] | None = None, gate: float = EDGE_GATE,
                      min_points: int = MIN_TABLE_POINTS) -> list[dict]:
    """Mean and std of measured top- and bulk-step loss changes on the edge of stability.

    Only points whose last top-subspace ratio exceeds ``gate`` count; cells
    with fewer than ``min_points`` such points are left out. Std is the
    population standard deviation.
    """
    labels = labels or {}
    rows = []
    for name, records in telemetry.items():
        top, bulk = [], []
        for rec in records:
            if rec.delta_top is None or rec.delta_bulk is None or rec.k_top < 1:
                continue
            r = rec.rho_at(rec.k_top)
            if r is not None and r > gate:
                top.append(rec.delta_top)
                bulk.append(rec.delta_bulk)
        if len(top) < min_points:
            continue
        lab = labels.get(name, {})
        eta = lab.get("eta", records[0].eta if records else math.nan)
        rows.append({
            "cell": name, "eta": eta, "arch": lab.get("arch", name), "n": len(top),
            "mean_top": float(np.mean(top)), "std_top": float(np.std(top)),
            "mean_bulk": float(np.mean(bulk)), "std_bulk": float(np.std(bulk)),
            "frac_bulk_negative": float(np.mean(np.asarray(bulk) < 0)),
        })
    return rows


def format_attribution_table(rows: Sequence[dict]) -> str:
    head = "eta\tarch\tmean dL top (std)\tmean dL bulk (std)\tpoints"
    lines = [head]
    for r in rows:
        lines.append(f"{r['eta']:g}\t{r['arch']}\t{r['mean_top']:.4f} ({r['std_top']:.4f})\t"
                     f"{r['mean_bulk']:.4f} ({r['std_bulk']:.4f})\t{r['n']}")
    return "\n".join(lines) + "\n"
