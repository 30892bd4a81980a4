"""Convex duality between kinetic terms h_i(x,p) and l_i(x,v)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
MAX_NEWTON = 100

Func = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DualSolveError(RuntimeError):
    def __init__(self, x, v):
        super().__init__(f"dual solve failed at x={np.asarray(x).tolist()}, v={np.asarray(v).tolist()}")
        self.x = x
        self.v = v


class QuadraticKinetic:
    """h(x,p) = c(x)|p|^2 with a closed-form dual l(x,v) = |v|^2 / (4 c(x))."""

    def __init__(self, coefficient: Callable[[np.ndarray], np.ndarray], coefficient_grad=None):
        self.coefficient = coefficient
        self.coefficient_grad = coefficient_grad

    def c(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.coefficient(x), dtype=float), x.shape[:-1])

    def __call__(self, x, p):
        p = np.asarray(p, dtype=float)
        return self.c(x) * np.sum(p * p, axis=-1)


def _fd_grad(f: Func, x: np.ndarray, p: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    shape = np.broadcast_shapes(x.shape, p.shape)
    grad = np.empty(shape)
    for j in range(shape[-1]):
        e = np.zeros(shape[-1])
        e[j] = step
        grad[..., j] = (f(x, p + e) - f(x, p - e)) / (2 * step)
    return grad


@dataclass
class DualPair:
    forward: Func
    backward: Func
    mode: Literal["closed_form", "numeric"]
    forward_grad: Func | None = None
    backward_grad: Func | None = None

    def grad_p(self, x, p) -> np.ndarray:
        if self.forward_grad is not None:
            return self.forward_grad(x, p)
        return _fd_grad(self.forward, x, p)

    def grad_v(self, x, v) -> np.ndarray:
        if self.backward_grad is not None:
            return self.backward_grad(x, v)
        return _fd_grad(self.backward, x, v)


def _check_convex(h: Func, dim: int, seed: int = 0, samples: int = 256) -> None:
    rng = np.random.default_rng(seed)
    x = rng.random((samples, dim))
    p = rng.normal(scale=3.0, size=(samples, dim))
    e = rng.normal(size=(samples, dim))
    e *= 1e-2 / np.linalg.norm(e, axis=-1, keepdims=True)
    second = h(x, p + e) + h(x, p - e) - 2 * h(x, p)
    if not np.all(second > 0):
        raise ValueError("kinetic term is not strictly convex in p on sampled points")


def _newton_dual(h: Func, grad: Func, a: float, x: np.ndarray, v: np.ndarray):
    """argmax_p <p,v> - h(x,p) by damped Newton; returns (p*, l)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    shape = np.broadcast_shapes(x.shape, v.shape)
    x = np.broadcast_to(x, shape)
    v = np.broadcast_to(v, shape)
    dim = shape[-1]
    # <dh(p),p> >= h(p) >= a|p|^2 confines |p*| <= |v|/a
    radius = np.linalg.norm(v, axis=-1) / a
    p = v / (2 * a)

    def objective(q):
        return np.sum(q * v, axis=-1) - h(x, q)

    f = objective(p)
    hstep = 1e-4
    for _ in range(MAX_NEWTON):
        g = v - grad(x, p)
        tol = 1e-9 * (1.0 + np.linalg.norm(v, axis=-1) + np.sum(p * p, axis=-1))
        done = np.linalg.norm(g, axis=-1) <= tol
        if np.all(done):
            return p, f
        hess = np.empty(shape + (dim,))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = hstep
            hess[..., :, j] = (grad(x, p + e) - grad(x, p - e)) / (2 * hstep)
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        step = np.linalg.solve(hess, g[..., None])[..., 0]
        step = np.where(done[..., None], 0.0, step)
        lam = np.ones(shape[:-1])
        for _ in range(30):
            trial = p + lam[..., None] * step
            norm = np.linalg.norm(trial, axis=-1)
            over = norm > radius
            trial = np.where(over[..., None], trial * (radius / np.maximum(norm, 1e-300))[..., None], trial)
            ft = objective(trial)
            ok = (ft >= f - 1e-14 * (1 + np.abs(f))) | done
            if np.all(ok):
                break
            lam = np.where(ok, lam, lam * 0.5)
        p = np.where(done[..., None], p, trial)
        f = np.where(done, f, ft)
    g = v - grad(x, p)
    tol = 1e-9 * (1.0 + np.linalg.norm(v, axis=-1) + np.sum(p * p, axis=-1))
    bad = np.linalg.norm(g, axis=-1) > tol
    if np.any(bad):
        where = np.argwhere(bad)[0]
        raise DualSolveError(x[tuple(where)], v[tuple(where)])
    return p, f


def dualize(
    h: Func,
    bounds: tuple[float, float],
    grad_p: Func | None = None,
    dim: int = 1,
    check_convexity: bool = True,
) -> DualPair:
    """Build the (h, l) pair; closed form for :class:`QuadraticKinetic`, Newton otherwise."""
    a, A = bounds
    if not 0 < a < A:
        raise ValueError(f"bounds must satisfy 0 < a < A, got {bounds}")
    if isinstance(h, QuadraticKinetic):
        quad = h

        def backward(x, v):
            v = np.asarray(v, dtype=float)
            return np.sum(v * v, axis=-1) / (4.0 * quad.c(x))

        return DualPair(
            forward=quad,
            backward=backward,
            mode="closed_form",
            forward_grad=lambda x, p: 2.0 * quad.c(x)[..., None] * np.asarray(p, dtype=float),
            backward_grad=lambda x, v: np.asarray(v, dtype=float) / (2.0 * quad.c(x)[..., None]),
        )

    if check_convexity:
        _check_convex(h, dim)
    grad = grad_p if grad_p is not None else (lambda x, p: _fd_grad(h, x, p))

    def backward(x, v):
        return _newton_dual(h, grad, a, x, v)[1]

    def backward_grad(x, v):
        # envelope theorem: dl/dv = p*(v)
        return _newton_dual(h, grad, a, x, v)[0]

    return DualPair(forward=h, backward=backward, mode="numeric", forward_grad=grad_p, backward_grad=backward_grad)


def lagrangian(sys, i: int, x, v, u) -> np.ndarray:
    """L_i(x,v,u) = l_i(x,v) - P_i(x,u)."""
    out = np.asarray(sys.l(i, x, v) - sys.P(i, x, u), dtype=float)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite Lagrangian value")
    return out


def hamiltonian(sys, i: int, x, p, u) -> np.ndarray:
    """H_i(x,p,u) = h_i(x,p) + P_i(x,u)."""
    return np.asarray(sys.h(i, x, p) + sys.P(i, x, u), dtype=float)


def hamiltonian_grad_p(sys, i: int, x, p, u=None) -> np.ndarray:
    """dH_i/dp; the coupling does not depend on p."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite momentum")
    return sys.duals[i].grad_p(np.asarray(x, dtype=float), p)
