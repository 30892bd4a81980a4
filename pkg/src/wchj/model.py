"""Problem class, grids and sampled fields on the flat torus."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import qmc

from .legendre import DualPair

__all__ = [
    "TorusGrid",
    "CoupledSystem",
    "VectorField",
    "InitialData",
    "ValidationReport",
    "sup_norm",
    "interpolate",
    "interpolate_points",
    "torus_displacement",
    "validate_system",
    "write_field_csv",
    "read_field_csv",
    "read_initial_csv",
    "read_slice_csv",
    "quadratic_system",
]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on [0,1)^N with a uniform time partition of [0,T]."""

    dim: int
    points_per_axis: int
    t_final: float
    n_t: int
    period: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.points_per_axis < 8:
            raise ValueError(f"points_per_axis must be >= 8, got {self.points_per_axis}")
        if not (self.t_final > 0 and math.isfinite(self.t_final)):
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if self.n_t < 1:
            raise ValueError(f"n_t must be >= 1, got {self.n_t}")

    @property
    def dx(self) -> float:
        return 1.0 / self.points_per_axis

    @property
    def dt(self) -> float:
        return self.t_final / self.n_t

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.dt

    def coords(self) -> np.ndarray:
        """Node coordinates, shape (size, dim), flat index x-major."""
        axis = np.arange(self.points_per_axis) / self.points_per_axis
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def wrap(self, index: Sequence[int] | int) -> tuple[int, ...]:
        idx = (index,) if np.isscalar(index) else tuple(index)
        return tuple(int(i) % self.points_per_axis for i in idx)

    def flat(self, index: Sequence[int] | int) -> int:
        return int(np.ravel_multi_index(self.wrap(index), self.shape))

    def unflat(self, flat_index: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat_index, self.shape))

    def with_horizon(self, t_final: float, n_t: int) -> "TorusGrid":
        return TorusGrid(self.dim, self.points_per_axis, t_final, n_t)


def torus_displacement(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal-image displacement a - b on the unit torus."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.round(d)


@dataclass
class CoupledSystem:
    """H_i(x,p,u) = h_i(x,p) + P_i(x,u), with L_i = l_i(x,v) - P_i(x,u).

    Arrays follow one convention throughout: points ``x`` have shape (..., N),
    momenta/velocities (..., N), unknowns ``u`` (..., m); scalars come back
    with shape (...).
    """

    duals: list[DualPair]
    coupling: list[Callable[[np.ndarray, np.ndarray], np.ndarray]]
    a: float
    A_const: float
    theta: float
    coupling_grad_x: list[Callable[[np.ndarray, np.ndarray], np.ndarray]] | None = None
    dim: int = 1

    def __post_init__(self):
        if len(self.duals) != len(self.coupling):
            raise ValueError("need one kinetic term per coupling term")
        if not 0 < self.a < 1 < self.A_const:
            raise ValueError(f"assumption (A) requires 0<a<1<A, got a={self.a}, A={self.A_const}")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")

    @property
    def m(self) -> int:
        return len(self.duals)

    @property
    def kinetic(self):
        return [d.forward for d in self.duals]

    @property
    def kinetic_dual(self):
        return [d.backward for d in self.duals]

    def P(self, i: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = self.coupling[i](x, u)
        return np.broadcast_to(out, np.broadcast_shapes(x.shape[:-1], u.shape[:-1])).astype(float)

    def dPdx(self, i: int, x: np.ndarray, u: np.ndarray, step: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (x.shape[-1],)
        if self.coupling_grad_x is not None:
            return np.broadcast_to(self.coupling_grad_x[i](x, u), shape).astype(float)
        grad = np.empty(shape)
        for j in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[j] = step
            grad[..., j] = (self.P(i, x + e, u) - self.P(i, x - e, u)) / (2 * step)
        return grad

    def l(self, i: int, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.duals[i].backward(x, v)

    def h(self, i: int, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        return self.duals[i].forward(x, p)


@dataclass
class InitialData:
    """phi sampled on the grid, shape (m, *grid.shape); ``analytic`` maps (..., N) -> (..., m)."""

    values: np.ndarray
    analytic: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise ValueError(f"initial data not finite at index {tuple(int(b) for b in bad)}")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_function(cls, grid: TorusGrid, func: Callable[[np.ndarray], np.ndarray]) -> "InitialData":
        pts = grid.coords()
        vals = np.asarray(func(pts), dtype=float)
        m = vals.shape[-1]
        return cls(vals.T.reshape((m,) + grid.shape), analytic=func)

    def at(self, points: np.ndarray) -> np.ndarray:
        """phi at arbitrary points, shape (m, n_points)."""
        points = np.asarray(points, dtype=float)
        if self.analytic is not None:
            return np.asarray(self.analytic(points), dtype=float).reshape(-1, self.m).T
        n = self.values.shape[1]
        return np.stack([interpolate_points(self.values[i], points, n) for i in range(self.m)])


class VectorField:
    """u sampled on grid x time slices, values shape (m, n_t+1, *grid.shape).

    ``tables`` optionally carries the operator's subgrid value tables (see
    :mod:`wchj.lax_oleinik`) so minimizing curves can be backtracked.
    """

    def __init__(self, grid: TorusGrid, values: np.ndarray, tables=None):
        values = np.asarray(values, dtype=float)
        expected = (values.shape[0], grid.n_t + 1) + grid.shape
        if values.ndim != 2 + grid.dim or values.shape != expected:
            raise ValueError(f"field shape {values.shape} does not match grid {expected}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field has non-finite entries")
        self.grid = grid
        self.values = values
        self.tables = tables

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @classmethod
    def constant_in_time(cls, grid: TorusGrid, phi: InitialData) -> "VectorField":
        vals = np.repeat(phi.values[:, None], grid.n_t + 1, axis=1)
        return cls(grid, vals)

    @classmethod
    def zeros(cls, grid: TorusGrid, m: int) -> "VectorField":
        return cls(grid, np.zeros((m, grid.n_t + 1) + grid.shape))

    def flat(self) -> np.ndarray:
        """View with spatial axes collapsed: (m, n_t+1, size)."""
        return self.values.reshape(self.m, self.grid.n_t + 1, -1)

    def set_slice(self, k: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float).reshape((self.m,) + self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite values written to slice {k}")
        self.values[:, k] = values

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.values.copy())

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.grid, self.values - other.values)


def sup_norm(f: VectorField, slice_range: Iterable[int] | tuple[int, int] | None = None) -> float:
    """max over components, slices and nodes of |f|; ``slice_range`` is (k0, k1) inclusive or an iterable."""
    if slice_range is None:
        ks = list(range(f.grid.n_t + 1))
    elif isinstance(slice_range, tuple) and len(slice_range) == 2:
        ks = list(range(slice_range[0], slice_range[1] + 1))
    else:
        ks = list(slice_range)
    if not ks or f.values.size == 0:
        raise ValueError("empty norm domain")
    if min(ks) < 0 or max(ks) > f.grid.n_t:
        raise ValueError(f"slice range {min(ks)}..{max(ks)} outside [0, {f.grid.n_t}]")
    return float(np.max(np.abs(f.values[:, ks])))


def _corner_weights(points: np.ndarray, n: int):
    """Indices (n_pts, 2^N) into the flat n^N grid and matching multilinear weights."""
    pts = np.asarray(points, dtype=float)
    dim = pts.shape[-1]
    s = np.mod(pts, 1.0) * n
    # snap rounding noise so node queries are exact
    near = np.round(s)
    s = np.where(np.abs(s - near) <= 1e-10, near, s)
    base = np.floor(s)
    frac = s - base
    base = base.astype(np.int64) % n
    idx = []
    wts = []
    for corner in range(2**dim):
        flat = np.zeros(pts.shape[:-1], dtype=np.int64)
        w = np.ones(pts.shape[:-1])
        for j in range(dim):
            bit = (corner >> (dim - 1 - j)) & 1
            flat = flat * n + (base[..., j] + bit) % n
            w = w * (frac[..., j] if bit else 1.0 - frac[..., j])
        idx.append(flat)
        wts.append(w)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def interpolate_points(slice_values: np.ndarray, points: np.ndarray, n: int) -> np.ndarray:
    """Periodic multilinear interpolation of one slice (shape n^N) at points (..., N)."""
    idx, w = _corner_weights(points, n)
    flat = np.asarray(slice_values, dtype=float).ravel()
    return np.sum(flat[idx] * w, axis=-1)


def interpolate(f: VectorField, i: int, x, k: int) -> float:
    """Value of component i at continuous point x on slice k; exact at nodes."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (f.grid.dim,):
        raise ValueError(f"point must have {f.grid.dim} coordinates")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite interpolation point {x}")
    if not 0 <= k <= f.grid.n_t:
        raise ValueError(f"slice {k} outside [0, {f.grid.n_t}]")
    return float(interpolate_points(f.values[i, k], x[None, :], f.grid.points_per_axis)[0])


@dataclass
class ValidationReport:
    checks: dict[str, tuple[bool, float]]

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def failures(self) -> list[str]:
        return [name for name, (ok, _) in self.checks.items() if not ok]

    def lines(self) -> list[str]:
        return [
            f"{name}: {'pass' if ok else 'FAIL'} (worst margin {margin:.3e})"
            for name, (ok, margin) in self.checks.items()
        ]


def validate_system(
    sys: CoupledSystem,
    samples: int = 1000,
    seed: int = 0,
    p_range: float = 10.0,
    u_range: float = 5.0,
    slack: float = 1e-10,
) -> ValidationReport:
    """Spot-check assumption (A) and the Lipschitz bound on P on quasi-random samples."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    N, m = sys.dim, sys.m
    sampler = qmc.Halton(d=N + N + 2 * m, scramble=True, seed=seed)
    z = sampler.random(samples)
    x = z[:, :N]
    p = (2 * z[:, N : 2 * N] - 1) * p_range
    u = (2 * z[:, 2 * N : 2 * N + m] - 1) * u_range
    w = (2 * z[:, 2 * N + m :] - 1) * u_range
    p2 = np.sum(p * p, axis=-1)
    a, A = sys.a, sys.A_const
    a_dual = 1.0 / (4.0 * A)
    worst: dict[str, float] = {}

    def record(name: str, margin: np.ndarray) -> None:
        worst[name] = min(worst.get(name, math.inf), float(np.min(margin)))

    eps = 1e-6
    for i in range(m):
        h = sys.h(i, x, p)
        record("h >= a|p|^2", h - a * p2)
        record("h <= A|p|^2", A * p2 - h)
        grad_x = np.empty_like(x)
        for j in range(N):
            e = np.zeros(N)
            e[j] = eps
            grad_x[:, j] = (sys.h(i, x + e, p) - sys.h(i, x - e, p)) / (2 * eps)
        # FD noise scales with |h|/eps; allow it explicitly
        noise = 1e-8 * (1.0 + p2)
        record("|d_x h| <= A|p|^2", A * p2 - np.linalg.norm(grad_x, axis=-1) + noise)
        lv = sys.l(i, x, p)
        record("l >= |v|^2/(4A)", lv - a_dual * p2)
        record("l <= |v|^2/(4a)", p2 / (4 * a) - lv)
        lip = sys.theta * np.max(np.abs(u - w), axis=-1) - np.abs(sys.P(i, x, u) - sys.P(i, x, w))
        record("|P(u)-P(v)| <= theta|u-v|", lip)
    scale = 1.0 + p_range**2 * A
    return ValidationReport({k: (v >= -slack * scale, v) for k, v in worst.items()})


# --- CSV -------------------------------------------------------------------


def _field_header(dim: int) -> list[str]:
    return ["component", "k", "ix"] + (["iy"] if dim == 2 else []) + ["t", "x"] + (["y"] if dim == 2 else []) + ["value"]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_field_csv(f: VectorField, path: str | Path) -> None:
    """Rows component-major, then time, then x-major; 17 significant digits."""
    g = f.grid
    coords = g.coords()
    idx = np.indices(g.shape).reshape(g.dim, -1).T
    times = g.times
    flat = f.flat()
    with open(path, "w", newline="") as fh:
        fh.write(",".join(_field_header(g.dim)) + "\n")
        for i in range(f.m):
            for k in range(g.n_t + 1):
                tk = _fmt(times[k])
                row = flat[i, k]
                lines = [
                    ",".join(
                        [str(i + 1), str(k)]
                        + [str(int(c)) for c in idx[s]]
                        + [tk]
                        + [_fmt(c) for c in coords[s]]
                        + [_fmt(row[s])]
                    )
                    for s in range(g.size)
                ]
                fh.write("\n".join(lines) + "\n")


def read_field_csv(path: str | Path, grid: TorusGrid) -> VectorField:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    m = max(int(r["component"]) for r in rows)
    vals = np.full((m, grid.n_t + 1) + grid.shape, np.nan)
    for r in rows:
        ix = (int(r["ix"]),) + ((int(r["iy"]),) if grid.dim == 2 else ())
        vals[(int(r["component"]) - 1, int(r["k"])) + ix] = float(r["value"])
    return VectorField(grid, vals)


def read_slice_csv(path: str | Path) -> tuple[np.ndarray, float]:
    """A field CSV holding one time slice -> (values (m, n, [n]), t)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    dim = 2 if "iy" in rows[0] else 1
    ks = {r["k"] for r in rows}
    if len(ks) != 1:
        raise ValueError(f"{path}: expected a single time slice, found k in {sorted(ks)}")
    m = max(int(r["component"]) for r in rows)
    n = max(int(r["ix"]) for r in rows) + 1
    vals = np.full((m,) + (n,) * dim, np.nan)
    for r in rows:
        ix = (int(r["ix"]),) + ((int(r["iy"]),) if dim == 2 else ())
        vals[(int(r["component"]) - 1,) + ix] = float(r["value"])
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"{path}: incomplete or non-finite slice")
    return vals, float(rows[0]["t"])


def read_initial_csv(path: str | Path, grid: TorusGrid, m: int) -> InitialData:
    """Initial data from a CSV with columns component, ix[, iy], value (others ignored).

    Rows carrying a ``k`` column other than 0 are skipped, so a solution.csv
    can seed a new run.
    """
    vals = np.full((m,) + grid.shape, np.nan)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"component", "ix", "value"} | ({"iy"} if grid.dim == 2 else set())
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, r in enumerate(reader, start=2):
            if "k" in r and r["k"] not in (None, "") and int(r["k"]) != 0:
                continue
            try:
                value = float(r["value"])
            except ValueError:
                raise ValueError(f"{path}: row {lineno}: unparseable value {r['value']!r}") from None
            if not math.isfinite(value):
                raise ValueError(f"{path}: row {lineno}: non-finite value {r['value']!r}")
            comp = int(r["component"])
            if not 1 <= comp <= m:
                raise ValueError(f"{path}: row {lineno}: component {comp} outside 1..{m}")
            ix = (int(r["ix"]),) + ((int(r["iy"]),) if grid.dim == 2 else ())
            if any(not 0 <= j < grid.points_per_axis for j in ix):
                raise ValueError(f"{path}: row {lineno}: index {ix} outside grid (no seam duplicates)")
            vals[(comp - 1,) + ix] = value
    if np.isnan(vals).any():
        hole = np.argwhere(np.isnan(vals))[0]
        raise ValueError(f"{path}: no value for component {hole[0] + 1} at index {tuple(int(h) for h in hole[1:])}")
    return InitialData(vals)


def quadratic_system(
    coefficients: Sequence[float | Callable[[np.ndarray], np.ndarray]],
    couplings: Sequence[Callable[[np.ndarray, np.ndarray], np.ndarray] | None],
    a: float,
    A_const: float,
    theta: float,
    dim: int = 1,
    coupling_grad_x=None,
) -> CoupledSystem:
    """System with kinetic terms c_i(x)|p|^2; a ``None`` coupling means P_i = 0."""
    from .legendre import QuadraticKinetic, dualize

    duals = []
    for c in coefficients:
        coef = c if callable(c) else (lambda x, c=float(c): np.full(np.shape(x)[:-1], c))
        duals.append(dualize(QuadraticKinetic(coef), (a, A_const)))
    zero = lambda x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]))
    coupling = [zero if P is None else P for P in couplings]
    return CoupledSystem(duals, coupling, a, A_const, theta, coupling_grad_x=coupling_grad_x, dim=dim)
