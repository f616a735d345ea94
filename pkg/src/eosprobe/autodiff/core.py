"""Loss evaluation, gradients, and Hessian-vector products over flat parameters."""

from __future__ import annotations

from typing import Any, Protocol

import numpy as np

from .tensor import Tensor, grad, mul, no_record, sum_


class NonFiniteError(ArithmeticError):
    """A loss, gradient, or curvature product came out NaN or infinite."""


class LossGraph(Protocol):
    """Anything mapping ``(theta, data)`` to a scalar loss tensor."""

    n_params: int

    def loss(self, theta: Tensor, data: Any) -> Tensor: ...


def _check_theta(graph: LossGraph, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != graph.n_params:
        raise ValueError(
            f"parameter vector has shape {theta.shape}, graph expects ({graph.n_params},)"
        )
    return theta


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")
    return x


def eval_loss(graph: LossGraph, theta, data=None) -> float:
    theta = _check_theta(graph, theta)
    with no_record():
        value = graph.loss(Tensor(theta), data).data
    return float(_finite(value, "loss"))


def value_and_gradient(graph: LossGraph, theta, data=None) -> tuple[float, np.ndarray]:
    theta = _check_theta(graph, theta)
    t = Tensor(theta, requires_grad=True)
    loss = graph.loss(t, data)
    _finite(loss.data, "loss")
    (g,) = grad(loss, [t])
    return float(loss.data), _finite(g.data, "gradient")


def gradient(graph: LossGraph, theta, data=None) -> np.ndarray:
    return value_and_gradient(graph, theta, data)[1]


class HessianOperator:
    """Hessian of the loss at a fixed point, applied by second-order reverse mode.

    The gradient graph is built once; each :meth:`matvec` differentiates
    ``g . v`` through it, which gives ``H v`` exactly up to roundoff.
    """

    def __init__(self, graph: LossGraph, theta, data=None):
        theta = _check_theta(graph, theta)
        self.n_params = theta.size
        self._theta = Tensor(theta, requires_grad=True)
        loss = graph.loss(self._theta, data)
        self.loss = float(_finite(loss.data, "loss"))
        (self._grad,) = grad(loss, [self._theta], create_graph=True)
        self.gradient = _finite(self._grad.data.copy(), "gradient")
        self.n_products = 0

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ValueError(f"direction has shape {v.shape}, expected ({self.n_params},)")
        self.n_products += 1
        if not self._grad.requires_grad:
            return np.zeros(self.n_params)
        directional = sum_(mul(self._grad, Tensor(v)))
        (hv,) = grad(directional, [self._theta])
        return _finite(hv.data, "Hessian-vector product")

    __call__ = matvec


def hvp(graph: LossGraph, theta, v, data=None) -> np.ndarray:
    return HessianOperator(graph, theta, data).matvec(v)


def fd_gradient(graph: LossGraph, theta, data=None, eps: float = 1e-5) -> np.ndarray:
    """Central differences, one pair of loss evaluations per coordinate.

    ``eps`` is scaled per coordinate by ``1 + |theta_i|``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = _check_theta(graph, theta)
    out = np.empty_like(theta)
    for i in range(theta.size):
        h = eps * (1.0 + abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        out[i] = (eval_loss(graph, up, data) - eval_loss(graph, down, data)) / (up[i] - down[i])
    return out


def fd_hvp(graph: LossGraph, theta, v, data=None, eps: float | None = None) -> np.ndarray:
    """Central difference of gradients along ``v``.

    The default step is ``1e-4 / ||v||``.
    """
    theta = _check_theta(graph, theta)
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(theta)
    if eps is None:
        eps = 1e-4 / norm
    if eps <= 0:
        raise ValueError("eps must be positive")
    g_up = gradient(graph, theta + eps * v, data)
    g_down = gradient(graph, theta - eps * v, data)
    return (g_up - g_down) / (2 * eps)


class QuadraticGraph:
    """``L(theta) = 0.5 * sum(c_i * theta_i**2)``; data is ignored."""

    def __init__(self, coefficients):
        self.coefficients = np.asarray(coefficients, dtype=np.float64)
        self.n_params = self.coefficients.size

    def loss(self, theta: Tensor, data=None) -> Tensor:
        return sum_(mul(Tensor(0.5 * self.coefficients), mul(theta, theta)))


class ZeroGraph:
    """The constant zero function."""

    def __init__(self, n_params: int):
        self.n_params = n_params

    def loss(self, theta: Tensor, data=None) -> Tensor:
        return sum_(mul(theta, Tensor(np.zeros(self.n_params))))
