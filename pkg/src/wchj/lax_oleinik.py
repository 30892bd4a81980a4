"""Discrete implicit Lax-Oleinik operator and minimizing-curve backtracking.

The operator maps a frozen field ``u_in`` to

    v_i(x, t_{k+1}) = min_y  v_i(y, t_k) + dt * L_i(q, (x - y)/dt, u_in(q, t_k)),
    v_i(x, 0)       = phi_i(x),

where y ranges over nodes within one step of the speed cap.  The recursion
runs on a subgrid that refines each axis of the output grid by an integer
factor: with y restricted to output nodes the admissible velocities are
multiples of dx/dt, and that quantization never vanishes when dx and dt are
refined together.  Output values are the subgrid values at the output nodes;
the full subgrid tables are kept on the result for backtracking.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .model import (
    CoupledSystem,
    InitialData,
    TorusGrid,
    VectorField,
    _corner_weights,
    interpolate_points,
    sup_norm,
    torus_displacement,
)

__all__ = [
    "OperatorConfig",
    "SweepPlan",
    "SweepTables",
    "MinimizingCurve",
    "StaleValueError",
    "apply_operator",
    "Backtracker",
    "backtrack",
    "curve_action",
    "default_v_max",
    "estimate_bytes",
    "write_curve_csv",
]

# below this many candidates per slice one gathered matrix beats the loop over displacements
GATHER_ENTRIES = 1 << 20


class StaleValueError(RuntimeError):
    pass


def _threads(requested: int | None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("WCHJ_THREADS")
    return max(1, int(env)) if env else 1


@dataclass(frozen=True)
class OperatorConfig:
    """Discretization of the curve class.

    ``subgrid`` refines each axis of the output grid; ``None`` picks the
    smallest factor whose velocity step (dx/dt)/subgrid is at most
    ``velocity_scale * sqrt(dx)``.
    """

    v_max: float
    quadrature: Literal["left_endpoint", "midpoint"] = "left_endpoint"
    subgrid: int | None = None
    velocity_scale: float = 2.0
    threads: int | None = None
    tie_break: str = field(default="lowest-flat-index", init=False)

    def __post_init__(self):
        if self.quadrature not in ("left_endpoint", "midpoint"):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if self.subgrid is not None and self.subgrid < 1:
            raise ValueError("subgrid must be >= 1")

    def subgrid_factor(self, grid: TorusGrid) -> int:
        if self.subgrid is not None:
            return int(self.subgrid)
        target = self.velocity_scale * math.sqrt(grid.dx)
        return max(1, math.ceil((grid.dx / grid.dt) / target - 1e-9))

    def fine_dx(self, grid: TorusGrid) -> float:
        return grid.dx / self.subgrid_factor(grid)

    def velocity_step(self, grid: TorusGrid) -> float:
        return self.fine_dx(grid) / grid.dt

    def stencil_radius(self, grid: TorusGrid) -> int:
        """Largest subgrid displacement (in cells) per step along one axis."""
        return int(math.floor(self.v_max * grid.dt / self.fine_dx(grid) + 1e-9))

    def check(self, grid: TorusGrid) -> None:
        if self.v_max * grid.dt > 0.5 + 1e-12:
            raise ValueError(f"v_max*dt = {self.v_max * grid.dt:g} exceeds half the torus")
        if self.stencil_radius(grid) < 1:
            raise ValueError(
                f"v_max*dt = {self.v_max * grid.dt:g} is below one subgrid cell ({self.fine_dx(grid):g})"
            )


def default_v_max(sys: CoupledSystem, grid: TorusGrid, phi: InitialData) -> float:
    """4 (1 + |phi|_inf / (a T)), capped so one step stays within half the torus."""
    v = 4.0 * (1.0 + float(np.max(np.abs(phi.values))) / (sys.a * grid.dt * grid.n_t))
    return min(v, 0.5 / grid.dt)


def estimate_bytes(grid: TorusGrid, cfg: OperatorConfig, m: int) -> int:
    """Rough peak memory of one solve: plan arrays plus a few subgrid tables."""
    sub = cfg.subgrid_factor(grid)
    nf = (grid.points_per_axis * sub) ** grid.dim
    radius = cfg.v_max * grid.dt * grid.points_per_axis * sub
    nd = math.pi * radius**2 if grid.dim == 2 else 2 * radius + 1
    plan = nd * nf * 8 * (2 + grid.dim + m)
    tables = 3 * m * (grid.n_t + 1) * nf * 8
    return int(plan + tables)


class SweepPlan:
    """Everything about one (system, grid, phi, config) that does not depend on u_in."""

    def __init__(self, sys: CoupledSystem, grid: TorusGrid, phi: InitialData, cfg: OperatorConfig):
        cfg.check(grid)
        if sys.dim != grid.dim:
            raise ValueError(f"system dim {sys.dim} != grid dim {grid.dim}")
        if phi.values.shape != (sys.m,) + grid.shape:
            raise ValueError(f"initial data shape {phi.values.shape} != {(sys.m,) + grid.shape}")
        self.sys, self.grid, self.phi, self.cfg = sys, grid, phi, cfg
        self.sub = cfg.subgrid_factor(grid)
        n = grid.points_per_axis
        self.nfa = n * self.sub
        N = grid.dim
        self.fine_shape = (self.nfa,) * N
        self.nf = self.nfa**N
        self.dxf = 1.0 / self.nfa
        axis = np.arange(self.nfa) / self.nfa
        mesh = np.meshgrid(*([axis] * N), indexing="ij")
        self.coords = np.stack([m.ravel() for m in mesh], axis=-1)
        coarse_axis = np.arange(n) * self.sub
        cmesh = np.meshgrid(*([coarse_axis] * N), indexing="ij")
        self.coarse_index = np.ravel_multi_index(tuple(c.ravel() for c in cmesh), self.fine_shape)

        radius = cfg.v_max * grid.dt / self.dxf
        R = cfg.stencil_radius(grid)
        rng = np.arange(-R, R + 1)
        dmesh = np.meshgrid(*([rng] * N), indexing="ij")
        disp = np.stack([d.ravel() for d in dmesh], axis=-1)
        keep = np.sqrt(np.sum(disp.astype(float) ** 2, axis=-1)) <= radius * (1 + 1e-12)
        self.disp = disp[keep]
        self.nd = len(self.disp)
        self.velocities = self.disp * self.dxf / grid.dt

        # SRC[d, x] = flat subgrid index of x - d
        multi = np.stack(np.unravel_index(np.arange(self.nf), self.fine_shape), axis=-1)
        src = (multi[None, :, :] - self.disp[:, None, :]) % self.nfa
        self.src = np.ravel_multi_index(tuple(src[..., j] for j in range(N)), self.fine_shape)

        # kinetic cost tables: indexed (displacement, source) for left_endpoint
        # quadrature, (displacement, target) for midpoint
        if cfg.quadrature == "left_endpoint":
            q = np.broadcast_to(self.coords[None, :, :], (self.nd, self.nf, N))
        else:
            q = np.mod(self.coords[None, :, :] - 0.5 * self.disp[:, None, :] * self.dxf, 1.0)
        self.quad_points = q
        vel = np.broadcast_to(self.velocities[:, None, :], q.shape)
        self.kinetic = []
        for i in range(sys.m):
            K = grid.dt * np.asarray(sys.l(i, q, vel), dtype=float)
            if not np.all(np.isfinite(K)):
                d, y = np.argwhere(~np.isfinite(K))[0]
                raise ValueError(f"NaN in kinetic cost for component {i + 1} at point {self._point(y)}, "
                                 f"velocity {self.velocities[d].tolist()}")
            self.kinetic.append(K)

        if cfg.quadrature == "left_endpoint":
            self.u_idx, self.u_w = _corner_weights(self.coords, n)
        else:
            self.u_idx, self.u_w = _corner_weights(q, n)
        self.phi_fine = phi.at(self.coords)  # (m, nf)
        self.threads = _threads(cfg.threads)
        self._by_target: dict[int, np.ndarray] = {}

    def _point(self, flat: int) -> list[float]:
        return self.coords[flat].tolist()

    def coupling_cost(self, i: int, u_in: VectorField, k: int) -> np.ndarray:
        """dt * P_i at the quadrature points of step k -> k+1.

        Shape (nf,) indexed by source node for left_endpoint quadrature,
        (nd, nf) indexed by (displacement, target) for midpoint.
        """
        uk = u_in.flat()[:, k]  # (m, size)
        U = np.stack([np.sum(uk[j][self.u_idx] * self.u_w, axis=-1) for j in range(u_in.m)], axis=-1)
        pts = self.coords if self.cfg.quadrature == "left_endpoint" else self.quad_points
        G = self.grid.dt * self.sys.P(i, pts, U)
        if not np.all(np.isfinite(G)):
            bad = np.argwhere(~np.isfinite(G))[0]
            if G.ndim == 1:
                x = y = int(bad[0])
            else:
                d, x = int(bad[0]), int(bad[1])
                y = int(self.src[d, x])
            raise ValueError(
                f"NaN in Lagrangian for component {i + 1} at slice {k}, x={self._point(x)}, y={self._point(y)}"
            )
        return G

    def kinetic_at(self, i: int, rows, cols) -> np.ndarray:
        """dt * l_i for displacement ``rows`` arriving at targets ``cols`` (broadcast)."""
        if self.cfg.quadrature == "left_endpoint":
            return self.kinetic[i][rows, self.src[rows, cols]]
        return self.kinetic[i][rows, cols]

    def _target_kinetic(self, i: int) -> np.ndarray:
        """Kinetic table indexed (displacement, target); cached, only used on small problems."""
        if i not in self._by_target:
            if self.cfg.quadrature == "left_endpoint":
                self._by_target[i] = np.take_along_axis(self.kinetic[i], self.src, axis=1)
            else:
                self._by_target[i] = self.kinetic[i]
        return self._by_target[i]

    def step_costs(self, i: int, G: np.ndarray, cols) -> np.ndarray:
        """(nd, len(cols)) step costs dt*L for targets ``cols``."""
        rows = np.arange(self.nd)[:, None]
        cols = np.asarray(cols)[None, :]
        K = self.kinetic_at(i, rows, cols)
        if G.ndim == 1:
            return K - G[self.src[rows, cols]]
        return K - G[rows, cols]

    def candidates(self, i: int, V: np.ndarray, G: np.ndarray, cols) -> np.ndarray:
        """(nd, len(cols)) candidate values.

        Same operands and operation order as :meth:`sweep_slice`, so minima
        agree bitwise: (V - G)[y] + K for left_endpoint, V[y] + (K - G) for
        midpoint, with y the source node.
        """
        rows = np.arange(self.nd)[:, None]
        cols = np.asarray(cols)[None, :]
        K = self.kinetic_at(i, rows, cols)
        src = self.src[rows, cols]
        if G.ndim == 1:
            return (V - G)[src] + K
        return V[src] + (K - G[rows, cols])

    def _shift_min(self, out: np.ndarray, c: np.ndarray, d: int) -> None:
        """out[x] = min(out[x], c[x - disp[d]]) with periodic wrap."""
        if self.grid.dim == 1:
            s = int(self.disp[d, 0]) % self.nf
            if s == 0:
                np.minimum(out, c, out=out)
            else:
                np.minimum(out[s:], c[: self.nf - s], out=out[s:])
                np.minimum(out[:s], c[self.nf - s :], out=out[:s])
            return
        shifted = np.roll(c.reshape(self.fine_shape), tuple(int(v) for v in self.disp[d]), axis=tuple(range(self.grid.dim)))
        np.minimum(out, shifted.ravel(), out=out)

    def _shift(self, v: np.ndarray, d: int) -> np.ndarray:
        """v[x - disp[d]] for every x."""
        if self.grid.dim == 1:
            return np.roll(v, int(self.disp[d, 0]))
        return np.roll(v.reshape(self.fine_shape), tuple(int(c) for c in self.disp[d]),
                       axis=tuple(range(self.grid.dim))).ravel()

    def _sweep_rows(self, i: int, V: np.ndarray, G: np.ndarray, rows: range) -> np.ndarray:
        # argmins (with tie-breaking) are re-derived on demand by Backtracker
        out = np.full(self.nf, np.inf)
        K = self.kinetic[i]
        if G.ndim == 1:
            W = V - G
            for d in rows:
                self._shift_min(out, W + K[d], d)
        else:
            for d in rows:
                np.minimum(out, self._shift(V, d) + (K[d] - G[d]), out=out)
        return out

    def sweep_slice(self, i: int, V: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Min over all displacements for every subgrid target; threads split the displacements."""
        if self.nd * self.nf <= GATHER_ENTRIES:
            K = self._target_kinetic(i)
            if G.ndim == 1:
                return ((V - G)[self.src] + K).min(axis=0)
            return (V[self.src] + (K - G)).min(axis=0)
        if self.threads > 1 and self.nd > 1:
            parts = np.array_split(np.arange(self.nd), min(self.threads, self.nd))
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(lambda r: self._sweep_rows(i, V, G, r), parts))
            return np.minimum.reduce(results)
        return self._sweep_rows(i, V, G, range(self.nd))


@dataclass
class SweepTables:
    """Subgrid value tables of one operator application and the inputs that produced them."""

    plan: SweepPlan
    values: np.ndarray  # (m, n_t+1, nf)
    frozen: VectorField


def apply_operator(
    sys: CoupledSystem,
    grid: TorusGrid,
    phi: InitialData,
    u_in: VectorField,
    cfg: OperatorConfig,
    plan: SweepPlan | None = None,
) -> VectorField:
    """One application of the discrete operator; slices are sequential, targets parallel."""
    if plan is None:
        plan = SweepPlan(sys, grid, phi, cfg)
    if u_in.grid != grid or u_in.m != sys.m:
        raise ValueError("u_in is not shaped for this grid/system")
    table = np.empty((sys.m, grid.n_t + 1, plan.nf))
    for i in range(sys.m):
        V = plan.phi_fine[i].copy()
        table[i, 0] = V
        for k in range(grid.n_t):
            G = plan.coupling_cost(i, u_in, k)
            V = plan.sweep_slice(i, V, G)
            table[i, k + 1] = V
    coarse = table[:, :, plan.coarse_index].reshape((sys.m, grid.n_t + 1) + grid.shape)
    coarse[:, 0] = phi.values
    return VectorField(grid, coarse, tables=SweepTables(plan, table, u_in))


@dataclass
class MinimizingCurve:
    component: int
    end_point: tuple[int, ...]
    end_slice: int
    nodes: np.ndarray  # (end_slice+1, N), wrapped into [0,1)
    velocities: np.ndarray  # (end_slice, N)
    step_actions: np.ndarray  # (end_slice,)
    fine_nodes: np.ndarray  # subgrid flat indices
    start_value: float  # phi_i(xi(0))
    dt: float

    @property
    def action(self) -> float:
        return float(np.sum(self.step_actions))

    @property
    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.velocities, axis=-1)


class Backtracker:
    """Re-derives DP argmins from subgrid tables, caching coupling costs per slice."""

    def __init__(self, sys: CoupledSystem, value: VectorField, u_in: VectorField, cfg: OperatorConfig, tol=1e-9):
        if value.tables is None:
            raise StaleValueError("stale value field: no operator tables attached (re-run apply_operator)")
        self.tables = value.tables
        self.plan = value.tables.plan
        if self.plan.cfg != cfg or self.plan.sys is not sys:
            raise StaleValueError("stale value field: produced with a different system or operator config")
        self.sys, self.value, self.u_in, self.tol = sys, value, u_in, tol
        self._cost: dict[tuple[int, int], np.ndarray] = {}

    def coupling(self, i: int, k: int) -> np.ndarray:
        key = (i, k)
        if key not in self._cost:
            self._cost[key] = self.plan.coupling_cost(i, self.u_in, k)
        return self._cost[key]

    def step(self, i: int, x: int, k: int) -> tuple[int, int, float]:
        """Argmin (source, displacement row, step cost) for target x at slice k."""
        plan = self.plan
        V = self.tables.values[i, k - 1]
        S = plan.src[:, x]
        G = self.coupling(i, k - 1)
        cols = np.array([x])
        M = plan.candidates(i, V, G, cols)[:, 0]
        costs = plan.step_costs(i, G, cols)[:, 0]
        best = M.min()
        target = self.tables.values[i, k, x]
        if not abs(best - target) <= self.tol * max(1.0, abs(target)):
            raise StaleValueError(
                f"stale value field at component {i + 1}, slice {k}, x={plan._point(x)}: "
                f"table {target!r} vs recomputed {best!r}"
            )
        ties = np.flatnonzero(M == best)
        row = int(ties[np.argmin(S[ties])])
        return int(S[row]), row, float(costs[row])

    def curve(self, i: int, x: tuple[int, ...] | int, k: int) -> MinimizingCurve:
        plan, grid = self.plan, self.plan.grid
        xi = grid.wrap(x)
        fine = int(plan.coarse_index[grid.flat(xi)])
        return self.curve_from_fine(i, fine, k, end_point=xi)

    def curve_from_fine(self, i: int, fine: int, k: int, end_point=None) -> MinimizingCurve:
        plan, grid = self.plan, self.plan.grid
        if not 0 <= k <= grid.n_t:
            raise ValueError(f"slice {k} outside [0, {grid.n_t}]")
        chain = [fine]
        costs = []
        rows = []
        cur = fine
        for kk in range(k, 0, -1):
            src, row, cost = self.step(i, cur, kk)
            chain.append(src)
            rows.append(row)
            costs.append(cost)
            cur = src
        chain.reverse()
        rows.reverse()
        costs.reverse()
        nodes = plan.coords[np.array(chain)]
        vel = plan.velocities[np.array(rows, dtype=int)] if rows else np.zeros((0, grid.dim))
        if end_point is None:
            end_point = tuple(int(c) for c in np.unravel_index(fine, plan.fine_shape))
        return MinimizingCurve(
            component=i,
            end_point=tuple(end_point),
            end_slice=k,
            nodes=nodes,
            velocities=np.asarray(vel, dtype=float),
            step_actions=np.asarray(costs, dtype=float),
            fine_nodes=np.array(chain),
            start_value=float(self.tables.values[i, 0, chain[0]]),
            dt=grid.dt,
        )


def backtrack(
    sys: CoupledSystem,
    grid: TorusGrid,
    value: VectorField,
    u_in: VectorField,
    i: int,
    x,
    k: int,
    cfg: OperatorConfig,
) -> MinimizingCurve:
    """Argmin chain realizing value_i(x, t_k); ties go to the lowest flat index."""
    if value.grid != grid:
        raise StaleValueError("stale value field: grid mismatch")
    return Backtracker(sys, value, u_in, cfg).curve(i, x, k)


def curve_action(
    sys: CoupledSystem, grid: TorusGrid, curve: MinimizingCurve, u_in: VectorField, cfg: OperatorConfig
) -> float:
    """Discrete action of ``curve`` recomputed from scratch (no DP tables)."""
    total = 0.0
    n = grid.points_per_axis
    for s in range(curve.end_slice):
        y = curve.nodes[s]
        disp = torus_displacement(curve.nodes[s + 1], y)
        v = disp / grid.dt
        if np.linalg.norm(v) > cfg.v_max * (1 + 1e-9):
            raise ValueError(f"step {s} exceeds the speed cap ({np.linalg.norm(v):g} > {cfg.v_max:g})")
        q = y if cfg.quadrature == "left_endpoint" else np.mod(y + 0.5 * disp, 1.0)
        u = np.array([interpolate_points(u_in.values[j, s], q[None, :], n)[0] for j in range(u_in.m)])
        total += grid.dt * float(sys.l(curve.component, q[None, :], v[None, :])[0]) - grid.dt * float(
            sys.P(curve.component, q[None, :], u[None, :])[0]
        )
    return total


def write_curve_csv(curve: MinimizingCurve, path: str | Path) -> None:
    """Row k carries the node at slice k and the step arriving there (zeros on row 0)."""
    N = curve.nodes.shape[1]
    names = ["x", "y"][:N]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "t"] + names + ["v" + c for c in names] + ["step_action"])
        for k in range(curve.end_slice + 1):
            vel = curve.velocities[k - 1] if k > 0 else np.zeros(N)
            act = curve.step_actions[k - 1] if k > 0 else 0.0
            w.writerow(
                [k, format(k * curve.dt, ".17g")]
                + [format(c, ".17g") for c in curve.nodes[k]]
                + [format(c, ".17g") for c in vel]
                + [format(act, ".17g")]
            )
