"""Full-batch gradient descent with periodic Hessian telemetry.

Two modes:

* ``fixed_lr``: plain GD, ``theta <- theta - eta * g``.
* ``gradient_flow``: before every step the top eigenvalue is re-estimated and
  the step is set to ``min(eta_max, flow_safety / lambda_1)``, keeping the
  discrete trajectory close to the continuous flow ``d theta / dt = -g``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .autodiff import HessianOperator, NonFiniteError, value_and_gradient
from .data import LabeledDataset
from .models import ModelLoss, ModelSpec, init_kaiming
from .spectral import SpectralResult, eta_star, stability_ratios, top_k_eigenpairs
from .storage import TelemetryRecord, write_snapshot
from .subspace import decompose, step_attribution

log = logging.getLogger(__name__)

MODES = ("fixed_lr", "gradient_flow")
TERMINATIONS = ("loss_threshold", "iteration_cap", "time_cap", "divergence")


class MissingSnapshotError(KeyError):
    pass


@dataclass
class TrainConfig:
    eta: float = 0.001
    max_iters: int | None = None        # default: 40 / eta
    stop_loss: float = 0.1
    telemetry_every: int | None = None  # default: round(1 / eta), at most 500
    snapshot_every: int = 100
    k: int = 20
    k_top: int | None = None            # default: n_c - 1
    seed: int = 0
    mode: str = "fixed_lr"
    eta_max: float = 0.001
    flow_safety: float = 0.5
    max_time: float | None = None       # gradient_flow only: stop once t reaches it
    eig_tol: float = 1e-6
    eig_max_iters: int = 1000
    flow_eig_tol: float = 1e-4
    flow_eig_max_iters: int = 200
    attribution: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.stop_loss > 0:
            raise ValueError("stop_loss must be positive")
        if self.max_iters is None:
            self.max_iters = int(round(40.0 / self.eta))
        if self.telemetry_every is None:
            self.telemetry_every = min(max(1, int(round(1.0 / self.eta))), 500)
        if self.telemetry_every < 1 or self.snapshot_every < 1:
            raise ValueError("telemetry_every and snapshot_every must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def resolved_k_top(self, n_c: int) -> int:
        k_top = n_c - 1 if self.k_top is None else self.k_top
        if not 0 <= k_top <= self.k:
            raise ValueError(f"k_top={k_top} must lie in [0, k={self.k}]")
        return k_top

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    config: TrainConfig
    records: list[TelemetryRecord] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    termination: str = ""
    final_iteration: int = 0
    final_loss: float = math.nan
    final_t: float = 0.0
    theta: np.ndarray | None = None

    def snapshot(self, theta, n: int) -> None:
        self.snapshots[n] = np.array(theta, dtype=np.float64, copy=True)

    def restore(self, n: int) -> np.ndarray:
        if n not in self.snapshots:
            raise MissingSnapshotError(f"no snapshot at iteration {n}")
        return self.snapshots[n].copy()

    def series(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def restore(run: RunRecord, n: int) -> np.ndarray:
    return run.restore(n)


def gd_step(theta, g, eta: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if theta.shape != g.shape:
        raise ValueError(f"theta {theta.shape} and gradient {g.shape} differ in shape")
    return theta - eta * g


def flow_step_size(lam1: float, eta_max: float, safety: float) -> float:
    if lam1 is None or not lam1 > 0:
        return eta_max
    return min(eta_max, safety / lam1)


Sink = Callable[[TelemetryRecord], None]


class _Runner:
    def __init__(self, config: TrainConfig, spec: ModelSpec, data: LabeledDataset,
                 sinks: Iterable[Sink], snapshot_dir, snapshot_meta: dict | None = None):
        if config.k > spec.n_params:
            raise ValueError(f"k={config.k} exceeds parameter count {spec.n_params}")
        self.cfg = config
        self.spec = spec
        self.data = data
        self.graph = ModelLoss(spec)
        self.k_top = config.resolved_k_top(data.n_c)
        self.sinks = list(sinks)
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir is not None else None
        self.snapshot_meta = dict(snapshot_meta or {})
        self.run = RunRecord(config)
        self.warm: np.ndarray | None = None

    def emit(self, rec: TelemetryRecord) -> None:
        self.run.records.append(rec)
        for sink in self.sinks:
            sink(rec)

    def maybe_snapshot(self, theta, n: int) -> None:
        if n % self.cfg.snapshot_every:
            return
        self.run.snapshot(theta, n)
        if self.snapshot_dir is not None:
            self.snapshot_dir.mkdir(parents=True, exist_ok=True)
            write_snapshot(theta, dict(self.snapshot_meta, iteration=n), self.snapshot_dir / f"snap_{n:08d}.bin")

    def solve(self, op: HessianOperator) -> SpectralResult:
        eig = top_k_eigenpairs(op.matvec, op.n_params, self.cfg.k, tol=self.cfg.eig_tol,
                               max_iters=self.cfg.eig_max_iters, warm_start=self.warm,
                               seed=self.cfg.seed)
        self.warm = eig.basis
        return eig

    def analysis(self, n: int, t: float, eta: float, theta, op: HessianOperator,
                 eig: SpectralResult, stale: bool = False) -> TelemetryRecord:
        g = op.gradient
        dec = decompose(g, eig, self.k_top)
        delta_top = delta_bulk = None
        if self.cfg.attribution:
            delta_top = step_attribution(self.graph, theta, dec.top, eta, self.data, op.loss)
            delta_bulk = step_attribution(self.graph, theta, dec.bulk, eta, self.data, op.loss)
        lams = [float(x) for x in eig.eigenvalues]
        return TelemetryRecord(
            iteration=n, t=t, eta=eta, loss=op.loss,
            eigenvalues=lams,
            eta_star=[eta_star(x) for x in lams],
            rho=stability_ratios(eta, lams),
            coords=[float(x) for x in dec.coords],
            grad_norm=float(np.linalg.norm(g)),
            top_norm=dec.top_norm, bulk_norm=dec.bulk_norm,
            delta_top=delta_top, delta_bulk=delta_bulk,
            k_top=self.k_top, cadence=self.cfg.telemetry_every,
            converged=eig.all_converged, stale=stale,
        )

    def finish(self, reason: str, n: int, loss: float, t: float, theta) -> RunRecord:
        run = self.run
        run.termination, run.final_iteration, run.final_loss = reason, n, loss
        run.final_t, run.theta = t, np.array(theta, copy=True)
        log.info("run finished: %s at iteration %d (loss %.6g)", reason, n, loss)
        return run


def train(config: TrainConfig, spec: ModelSpec, data: LabeledDataset,
          sinks: Iterable[Sink] = (), snapshot_dir=None, theta0=None,
          snapshot_meta: dict | None = None) -> RunRecord:
    """Fixed-step full-batch GD until the loss drops below ``stop_loss`` or the cap is hit.

    Telemetry (spectral solve, gradient split, measured step attribution) is
    taken every ``telemetry_every`` iterations before the step; snapshots
    every ``snapshot_every``. Iteration ``n`` means ``n`` steps were taken.
    """
    if config.mode != "fixed_lr":
        raise ValueError("train() runs fixed_lr mode; use train_gradient_flow()")
    r = _Runner(config, spec, data, sinks, snapshot_dir, snapshot_meta)
    cfg = config
    theta = init_kaiming(spec) if theta0 is None else np.array(theta0, dtype=np.float64)
    loss = math.nan
    for n in range(cfg.max_iters + 1):
        t = n * cfg.eta
        analyze = n % cfg.telemetry_every == 0
        try:
            if analyze:
                op = HessianOperator(r.graph, theta, data)
                loss, g = op.loss, op.gradient
            else:
                loss, g = value_and_gradient(r.graph, theta, data)
            r.maybe_snapshot(theta, n)
            if analyze:
                r.emit(r.analysis(n, t, cfg.eta, theta, op, r.solve(op)))
        except NonFiniteError:
            return r.finish("divergence", n, math.inf, t, theta)
        if loss < cfg.stop_loss:
            return r.finish("loss_threshold", n, loss, t, theta)
        if n == cfg.max_iters:
            return r.finish("iteration_cap", n, loss, t, theta)
        theta = gd_step(theta, g, cfg.eta)
    raise AssertionError("unreachable")


def train_gradient_flow(config: TrainConfig, spec: ModelSpec, data: LabeledDataset,
                        sinks: Iterable[Sink] = (), snapshot_dir=None,
                        theta0=None, snapshot_meta: dict | None = None) -> RunRecord:
    """Adaptive-step GD tracking the gradient flow.

    One record per iteration carries the lambda_1 estimate and the step it
    produced; every ``telemetry_every`` iterations the record additionally
    carries the full top-k analysis. If the per-step eigen-solve fails to
    converge the last converged lambda_1 is reused and the record is marked
    ``stale``.
    """
    if config.mode != "gradient_flow":
        raise ValueError("train_gradient_flow() needs mode='gradient_flow'")
    r = _Runner(config, spec, data, sinks, snapshot_dir, snapshot_meta)
    cfg = config
    theta = init_kaiming(spec) if theta0 is None else np.array(theta0, dtype=np.float64)
    warm1: np.ndarray | None = None
    last_lam1: float | None = None
    t = 0.0
    for n in range(cfg.max_iters + 1):
        try:
            op = HessianOperator(r.graph, theta, data)
            r.maybe_snapshot(theta, n)
            full = n % cfg.telemetry_every == 0
            if full:
                eig = r.solve(op)
                top = int(np.argmax(eig.eigenvalues))
                lam1, ok = float(eig.eigenvalues[top]), bool(eig.converged[top])
                warm1 = eig.eigenvectors[:, top:top + 1]
            else:
                eig1 = top_k_eigenpairs(op.matvec, op.n_params, 1, tol=cfg.flow_eig_tol,
                                        max_iters=cfg.flow_eig_max_iters, warm_start=warm1,
                                        oversample=1, seed=cfg.seed)
                lam1, ok = float(eig1.eigenvalues[0]), bool(eig1.converged[0])
                warm1 = eig1.basis
        except NonFiniteError:
            return r.finish("divergence", n, math.inf, t, theta)
        stale = not ok and last_lam1 is not None
        if stale:
            lam1 = last_lam1
        else:
            last_lam1 = lam1
        eta_n = flow_step_size(lam1, cfg.eta_max, cfg.flow_safety)
        if full:
            rec = r.analysis(n, t, eta_n, theta, op, eig, stale=stale)
        else:
            rec = TelemetryRecord(
                iteration=n, t=t, eta=eta_n, loss=op.loss, eigenvalues=[lam1],
                eta_star=[eta_star(lam1)], rho=stability_ratios(eta_n, [lam1]),
                grad_norm=float(np.linalg.norm(op.gradient)), k_top=r.k_top,
                cadence=1, converged=ok, stale=stale)
        r.emit(rec)
        if op.loss < cfg.stop_loss:
            return r.finish("loss_threshold", n, op.loss, t, theta)
        if n == cfg.max_iters:
            return r.finish("iteration_cap", n, op.loss, t, theta)
        if cfg.max_time is not None and t >= cfg.max_time:
            return r.finish("time_cap", n, op.loss, t, theta)
        theta = gd_step(theta, op.gradient, eta_n)
        t += eta_n
    raise AssertionError("unreachable")


def run_training(config: TrainConfig, spec: ModelSpec, data: LabeledDataset,
                 sinks: Iterable[Sink] = (), snapshot_dir=None,
                 snapshot_meta: dict | None = None) -> RunRecord:
    fn = train if config.mode == "fixed_lr" else train_gradient_flow
    return fn(config, spec, data, sinks, snapshot_dir, snapshot_meta=snapshot_meta)
