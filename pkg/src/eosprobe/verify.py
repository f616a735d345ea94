"""Built-in oracle suite: checks the derivative and spectral machinery against independent routes.

Each check builds its own tiny fixtures from fixed seeds and returns a
:class:`CheckResult`; nothing here depends on a training run.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import HessianOperator, fd_gradient, fd_hvp, gradient
from .data import LabeledDataset, synth_dataset
from .models import ModelLoss, init_kaiming, tiny_conv, tiny_mlp
from .spectral import top_k_eigenpairs
from .storage import (SnapshotChecksumError, decode_snapshot, encode_snapshot, read_snapshot,
                      write_snapshot)
from .subspace import decompose


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _fixture(i: int, hidden=(8, 8), dim: int = 4, n_c: int = 3, n_D: int = 12,
             activation: str = "tanh"):
    spec = tiny_mlp(dim, n_c, hidden, activation, seed=i)
    data = synth_dataset(n_D, n_c, dim, 2.0, seed=100 + i)
    theta = init_kaiming(spec)
    return ModelLoss(spec), theta, data


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_gradient(n: int = 5, tol: float = 1e-5) -> CheckResult:
    worst = 0.0
    for i in range(n):
        graph, theta, data = _fixture(i)
        g = gradient(graph, theta, data)
        fd = fd_gradient(graph, theta, data)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6))))
    spec = tiny_conv((1, 10, 10), 2, channels=(2, 3), kernel=3, hidden=5, activation="tanh")
    x = np.random.default_rng(7).standard_normal((4, 100))
    data = LabeledDataset(x, np.array([0, 1, 0, 1]), 2)
    graph, theta = ModelLoss(spec), init_kaiming(spec)
    g, fd = gradient(graph, theta, data), fd_gradient(graph, theta, data)
    worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6))))
    return CheckResult("gradient_vs_finite_differences", worst <= tol, f"max rel err {worst:.2e}")


def check_hvp(n: int = 5, tol: float = 1e-4) -> CheckResult:
    worst = worst_sym = 0.0
    rng = np.random.default_rng(1)
    for i in range(n):
        graph, theta, data = _fixture(i)
        op = HessianOperator(graph, theta, data)
        v = rng.standard_normal(op.n_params)
        worst = max(worst, _rel(op.matvec(v), fd_hvp(graph, theta, v, data)))
        u = rng.standard_normal(op.n_params)
        a, b = u @ op.matvec(v), v @ op.matvec(u)
        worst_sym = max(worst_sym, abs(a - b) / max(abs(a), abs(b), 1e-300))
    ok = worst <= tol and worst_sym <= 1e-8
    return CheckResult("hvp_vs_finite_differences", ok,
                       f"max rel err {worst:.2e}, symmetry {worst_sym:.2e}")


def dense_hessian(graph, theta, data) -> np.ndarray:
    op = HessianOperator(graph, theta, data)
    H = np.column_stack([op.matvec(e) for e in np.eye(op.n_params)])
    return 0.5 * (H + H.T)


def check_eigensolver(n: int = 3, k: int = 5) -> CheckResult:
    worst_val, worst_align = 0.0, 1.0
    for i in range(n):
        graph, theta, data = _fixture(i, hidden=(6,), dim=3, n_c=3, n_D=9)
        H = dense_hessian(graph, theta, data)
        w, V = np.linalg.eigh(H)
        idx = np.argsort(-np.abs(w), kind="stable")[:k]
        ref_w, ref_V = w[idx], V[:, idx]
        op = HessianOperator(graph, theta, data)
        res = top_k_eigenpairs(op.matvec, op.n_params, k, tol=1e-10, max_iters=5000, seed=i)
        order = np.argsort(-np.abs(res.eigenvalues), kind="stable")
        got_w, got_V = res.eigenvalues[order], res.eigenvectors[:, order]
        worst_val = max(worst_val, float(np.max(np.abs(got_w - ref_w) / np.abs(ref_w))))
        worst_align = min(worst_align, float(np.min(np.abs(np.sum(got_V * ref_V, axis=0)))))
    ok = worst_val <= 1e-4 and worst_align >= 0.999
    return CheckResult("eigensolver_vs_dense", ok,
                       f"max eigenvalue rel err {worst_val:.2e}, min alignment {worst_align:.6f}")


def check_decomposition(n: int = 200) -> CheckResult:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(n):
        p = int(rng.integers(2, 40))
        k = int(rng.integers(1, p + 1))
        Q, _ = np.linalg.qr(rng.standard_normal((p, k)))
        g = rng.standard_normal(p)
        dec = decompose(g, Q, int(rng.integers(0, k + 1)))
        gg = g @ g
        worst = max(worst, abs(dec.top_norm ** 2 + dec.bulk_norm ** 2 - gg) / gg,
                    _rel(dec.top + dec.bulk, g))
    return CheckResult("decomposition_identities", worst <= 1e-8, f"max rel err {worst:.2e}")


def check_snapshot() -> CheckResult:
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(257)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "s.bin"
        write_snapshot(theta, {"iteration": 5}, path)
        back, meta = read_snapshot(path)
    exact = back.tobytes() == theta.tobytes() and meta["iteration"] == 5
    blob = bytearray(encode_snapshot(theta))
    blob[40] ^= 0x01
    try:
        decode_snapshot(bytes(blob))
        caught = False
    except SnapshotChecksumError:
        caught = True
    return CheckResult("snapshot_round_trip", exact and caught,
                       f"bit-identical={exact}, corruption detected={caught}")


CHECKS = (check_gradient, check_hvp, check_eigensolver, check_decomposition, check_snapshot)


def run_all(checks=CHECKS) -> list[CheckResult]:
    out = []
    for check in checks:
        t0 = time.perf_counter()
        res = check()
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
