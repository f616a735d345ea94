"""Top-k Hessian eigenpairs by block power iteration, and step-size stability ratios."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError

# curvature below this is treated as flat: 2 / lambda has no useful meaning
LAMBDA_MIN = 1e-12


@dataclass
class SpectralResult:
    eigenvalues: np.ndarray      # (k,), descending by signed value
    eigenvectors: np.ndarray     # (n_params, k), columns unit-norm
    residuals: np.ndarray        # ||H h - lambda h||
    iterations: int
    converged: np.ndarray        # (k,) bool
    basis: np.ndarray            # full iterated block, reusable as a warm start

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())


def orthonormalize(block: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Modified Gram-Schmidt on the columns, applied twice.

    Columns that collapse numerically are replaced by random directions so the
    result always has full column rank.
    """
    Q = np.array(block, dtype=np.float64, copy=True)
    n, m = Q.shape
    rng = rng or np.random.default_rng(0)
    for j in range(m):
        original = np.linalg.norm(Q[:, j])
        for _ in range(2):
            for i in range(j):
                Q[:, j] -= (Q[:, i] @ Q[:, j]) * Q[:, i]
        norm = np.linalg.norm(Q[:, j])
        while norm <= 1e-10 * max(original, 1e-300):
            Q[:, j] = rng.standard_normal(n)
            original = np.linalg.norm(Q[:, j])
            for _ in range(2):
                for i in range(j):
                    Q[:, j] -= (Q[:, i] @ Q[:, j]) * Q[:, i]
            norm = np.linalg.norm(Q[:, j])
        Q[:, j] /= norm
    return Q


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.abs(V).argmax(axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def top_k_eigenpairs(
    hvp_fn: Callable[[np.ndarray], np.ndarray],
    n_params: int,
    k: int,
    tol: float = 1e-6,
    max_iters: int = 1000,
    warm_start: np.ndarray | None = None,
    oversample: int | None = None,
    seed: int = 0,
) -> SpectralResult:
    """Largest-magnitude eigenpairs of a symmetric operator given only products.

    Simultaneous iteration on a block of ``k + oversample`` vectors, with a
    Rayleigh-Ritz projection every sweep. The ``k`` Ritz pairs largest in
    ``|lambda|`` are kept and returned sorted by signed value, descending.

    A pair counts as converged once its eigenvalue moved by less than
    ``tol * |lambda|`` over the last sweep and its residual is at most
    ``tol * max(1, |lambda|)``. Iteration stops when every pair converged or
    after ``max_iters`` sweeps; unconverged pairs are flagged, not raised.

    ``warm_start`` holds prior vectors as columns (e.g. a previous
    :attr:`SpectralResult.basis`); missing columns are filled randomly.
    """
    if not 1 <= k <= n_params:
        raise ValueError(f"need 1 <= k <= n_params, got k={k}, n_params={n_params}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if oversample is None:
        oversample = max(2, k // 2)
    b = min(n_params, k + oversample)
    rng = np.random.default_rng(seed)
    block = rng.standard_normal((n_params, b))
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=np.float64).reshape(n_params, -1)[:, :b]
        block[:, :warm.shape[1]] = warm
    Q = orthonormalize(block, rng)

    prev = None
    for it in range(1, max_iters + 1):
        Z = np.empty_like(Q)
        for j in range(b):
            Z[:, j] = hvp_fn(Q[:, j])
        if not np.all(np.isfinite(Z)):
            raise NonFiniteError("operator returned non-finite values")
        T = Q.T @ Z
        T = 0.5 * (T + T.T)
        w, S = np.linalg.eigh(T)
        order = np.argsort(-np.abs(w), kind="stable")
        w, S = w[order], S[:, order]
        V = Q @ S
        HV = Z @ S
        res = np.linalg.norm(HV - V * w, axis=0)
        lam = w[:k]
        scale = np.abs(lam)
        ok = res[:k] <= tol * np.maximum(1.0, scale)
        if prev is not None:
            ok &= np.abs(lam - prev) <= tol * np.maximum(scale, np.finfo(float).tiny)
        else:
            ok[:] = False
        if ok.all() or it == max_iters:
            break
        prev = lam.copy()
        Q = orthonormalize(HV, rng)

    keep = np.argsort(-lam, kind="stable")
    vecs = _fix_signs(V[:, :k][:, keep])
    return SpectralResult(
        eigenvalues=lam[keep].copy(),
        eigenvectors=vecs,
        residuals=res[:k][keep].copy(),
        iterations=it,
        converged=ok[keep].copy(),
        basis=V.copy(),
    )


def eta_star(lam: float) -> float | None:
    """Largest stable step ``2 / lambda``; None when curvature is below :data:`LAMBDA_MIN`."""
    if not lam > LAMBDA_MIN:
        return None
    return 2.0 / lam


def rho(eta: float, eta_star_value: float | None) -> float | None:
    if eta_star_value is None:
        return None
    return eta / eta_star_value


def stability_ratios(eta: float, eigenvalues) -> list[float | None]:
    return [rho(eta, eta_star(float(lam))) for lam in eigenvalues]
