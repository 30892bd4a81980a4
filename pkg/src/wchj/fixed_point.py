"""Fixed-point iteration of the operator, the solution semigroup, contraction probes."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lax_oleinik import OperatorConfig, SweepPlan, apply_operator
from .model import CoupledSystem, InitialData, TorusGrid, VectorField, sup_norm

logger = logging.getLogger(__name__)

__all__ = [
    "SolveReport",
    "SolveNotConverged",
    "solve",
    "semigroup_step",
    "contraction_probe",
    "ContractionRow",
    "factorial_bound",
]


def factorial_bound(T: float, theta: float, j: int) -> float:
    """(T theta)^j / j!"""
    return math.exp(j * math.log(T * theta) - math.lgamma(j + 1)) if T * theta > 0 else float(j == 0)


@dataclass
class SolveReport:
    T: float
    theta: float
    tol: float
    residuals: list[float] = field(default_factory=list)
    iteration_times: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def wall_time(self) -> float:
        return float(sum(self.iteration_times))

    @property
    def predicted_bounds(self) -> list[float]:
        if not self.residuals:
            return []
        r0 = self.residuals[0]
        return [factorial_bound(self.T, self.theta, j) * r0 for j in range(len(self.residuals))]

    def envelope_excess(self, slack: float = 1e-10) -> list[float]:
        """residuals[j] - ((T theta)^(j-1)/(j-1)! residuals[1] + slack) for j >= 1; all <= 0 when the envelope holds."""
        r = self.residuals
        if len(r) < 2:
            return []
        return [r[j] - (factorial_bound(self.T, self.theta, j - 1) * r[1] + slack) for j in range(1, len(r))]

    def error_bound(self) -> float:
        """A-posteriori bound on the distance of the last iterate to the fixed point."""
        if not self.residuals:
            return math.inf
        last = self.residuals[-1]
        # tail of the factorial envelope started at the last residual
        return last * sum(factorial_bound(self.T, self.theta, j) for j in range(1, 60))

    def write_csv(self, path: str | Path, include_timing: bool = True) -> None:
        """``include_timing=False`` leaves wall_time_s empty so reruns are byte-identical."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "residual", "predicted_bound", "wall_time_s"])
            for j, (r, b, s) in enumerate(zip(self.residuals, self.predicted_bounds, self.iteration_times)):
                w.writerow([j, format(r, ".17g"), format(b, ".17g"), format(s, ".6f") if include_timing else ""])


class SolveNotConverged(RuntimeError):
    def __init__(self, report: SolveReport):
        super().__init__(
            f"fixed-point iteration did not reach tol={report.tol:g} in {report.iterations} iterations "
            f"(last residual {report.residuals[-1]:.3e})"
        )
        self.report = report


def solve(
    sys: CoupledSystem,
    grid: TorusGrid,
    phi: InitialData,
    cfg: OperatorConfig,
    tol: float = 1e-9,
    max_iter: int = 100,
    plan: SweepPlan | None = None,
) -> tuple[VectorField, SolveReport]:
    """Iterate u <- A[u] from u = phi (constant in time) until successive iterates agree to ``tol``.

    The stopping threshold is tightened to tol/(T theta) when T theta > 1 so
    that the returned field also has fixed-point residual at most ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if plan is None:
        plan = SweepPlan(sys, grid, phi, cfg)
    report = SolveReport(T=grid.t_final, theta=sys.theta, tol=tol)
    stop = tol * min(1.0, 1.0 / (grid.t_final * sys.theta))
    u = VectorField.constant_in_time(grid, phi)
    for j in range(max_iter):
        start = time.perf_counter()
        nxt = apply_operator(sys, grid, phi, u, cfg, plan)
        r = sup_norm(nxt - u)
        report.residuals.append(r)
        report.iteration_times.append(time.perf_counter() - start)
        logger.debug("iteration %d residual %.3e", j, r)
        u = nxt
        if r <= stop:
            report.converged = True
            return u, report
    raise SolveNotConverged(report)


def semigroup_step(
    sys: CoupledSystem,
    grid: TorusGrid,
    u_state: InitialData | np.ndarray,
    t: float,
    cfg: OperatorConfig,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> InitialData:
    """T_t applied to ``u_state``, time step taken from ``grid``."""
    state = u_state if isinstance(u_state, InitialData) else InitialData(np.asarray(u_state, dtype=float))
    steps = t / grid.dt
    n = int(round(steps))
    if t < 0 or abs(steps - n) > 1e-9 * max(1.0, steps):
        raise ValueError(f"non-grid time: t={t!r} is not a multiple of dt={grid.dt!r}")
    if n == 0:
        return InitialData(state.values.copy(), state.analytic)
    sub = TorusGrid(grid.dim, grid.points_per_axis, n * grid.dt, n)
    u, _ = solve(sys, sub, state, cfg, tol=tol, max_iter=max_iter)
    return InitialData(u.values[:, -1].copy())


@dataclass
class ContractionRow:
    k: int
    t: float
    measured: float
    bound: float

    @property
    def violated(self) -> bool:
        return self.measured > self.bound + 1e-9


def contraction_probe(
    sys: CoupledSystem,
    grid: TorusGrid,
    phi: InitialData,
    u: VectorField,
    v: VectorField,
    cfg: OperatorConfig,
    plan: SweepPlan | None = None,
) -> list[ContractionRow]:
    """Per slice: sup |A[u] - A[v]| against k dt theta |u - v| over slices <= k."""
    if plan is None:
        plan = SweepPlan(sys, grid, phi, cfg)
    Au = apply_operator(sys, grid, phi, u, cfg, plan).values
    Av = apply_operator(sys, grid, phi, v, cfg, plan).values
    diff_in = np.abs(u.values - v.values).reshape(u.m, grid.n_t + 1, -1).max(axis=(0, 2))
    running = np.maximum.accumulate(diff_in)
    out = np.abs(Au - Av).reshape(u.m, grid.n_t + 1, -1).max(axis=(0, 2))
    return [
        ContractionRow(k, k * grid.dt, float(out[k]), k * grid.dt * sys.theta * float(running[k]))
        for k in range(grid.n_t + 1)
    ]
