"""Split a gradient into its top-eigenspace and bulk parts, and measure what each step buys."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import LossGraph, NonFiniteError, eval_loss
from .spectral import SpectralResult

ORTHONORMAL_TOL = 1e-8


@dataclass
class GradientDecomposition:
    coords: np.ndarray   # d_i = h_i . g for every computed eigenvector
    top: np.ndarray
    bulk: np.ndarray
    k_top: int

    @property
    def top_norm(self) -> float:
        return float(np.linalg.norm(self.top))

    @property
    def bulk_norm(self) -> float:
        return float(np.linalg.norm(self.bulk))


def decompose(g, eig: SpectralResult | np.ndarray, k_top: int) -> GradientDecomposition:
    """Project ``g`` onto the span of the first ``k_top`` eigenvectors.

    ``eig`` is a :class:`SpectralResult` or a matrix whose columns are the
    eigenvectors, ordered as in the result (descending eigenvalue). The bulk
    part is the remainder ``g - top``.
    """
    H = eig.eigenvectors if isinstance(eig, SpectralResult) else np.asarray(eig, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != g.size:
        raise ValueError(f"eigenvectors of shape {H.shape} do not match gradient of size {g.size}")
    if not 0 <= k_top <= H.shape[1]:
        raise ValueError(f"k_top={k_top} outside [0, {H.shape[1]}]")
    gram = H.T @ H
    if np.abs(gram - np.eye(H.shape[1])).max() > ORTHONORMAL_TOL:
        raise ValueError("eigenvectors are not orthonormal")
    coords = H.T @ g
    top = H[:, :k_top] @ coords[:k_top]
    bulk = g - top
    if k_top:
        # second projection pass: keeps top . bulk at roundoff relative to |bulk|, not |g|
        bulk -= H[:, :k_top] @ (H[:, :k_top].T @ bulk)
    return GradientDecomposition(coords, top, bulk, k_top)


def taylor_delta(eta: float, d, lam) -> float:
    """Second-order predicted loss change of a GD step, summed per eigen-direction."""
    d = np.asarray(d, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if d.shape != lam.shape:
        raise ValueError("coordinates and eigenvalues must have equal length")
    return float(eta * np.sum(d * d * (0.5 * eta * lam - 1.0)))


def step_attribution(
    graph: LossGraph, theta, component, eta: float, data=None, base_loss: float | None = None
) -> float:
    """Measured ``L(theta - eta * component) - L(theta)``.

    ``theta`` is never modified. A step landing on a non-finite loss returns
    ``inf``, which callers treat as a divergent step.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if base_loss is None:
        base_loss = eval_loss(graph, theta, data)
    moved = theta - eta * np.asarray(component, dtype=np.float64)
    try:
        after = eval_loss(graph, moved, data)
    except NonFiniteError:
        return math.inf
    return after - base_loss
