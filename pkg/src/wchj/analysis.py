"""Audits of a converged field: constant ledger, Hölder/Lipschitz bounds,
PDE residual, calibration and duality along minimizing curves.

Sampled suprema (B_T, sigma_T) are lower estimates, so every bound built
from them is inflated by ``INFLATION`` before comparison.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.stats import qmc

from .lax_oleinik import Backtracker, MinimizingCurve, OperatorConfig
from .legendre import hamiltonian, hamiltonian_grad_p, lagrangian
from .model import CoupledSystem, TorusGrid, VectorField

__all__ = [
    "INFLATION",
    "ConstantLedger",
    "build_ledger",
    "kappa_one",
    "kappa_step",
    "kappa_inf",
    "kappa_sequence",
    "AuditRow",
    "AuditReport",
    "holder_audit",
    "lipschitz_audit",
    "slice_lipschitz",
    "pde_residual",
    "residual_audit",
    "is_differentiable",
    "curve_regularity_audit",
    "duality_audit",
    "calibration_equality",
    "calibration_inequality",
    "semiconcavity_constant",
    "write_audit_csv",
    "write_audit_txt",
]

INFLATION = 1.05


# --- ledger ----------------------------------------------------------------


def kappa_one(C: float, B1: float, F1: float) -> float:
    return 2.0 * B1 + C * (F1 + math.sqrt(2.0 * (F1 + 1.0)))


def kappa_step(kn: float, C: float, F1: float, sigma1: float) -> float:
    return 0.5 * kn + C * (F1 + math.sqrt(2.0 * (F1 + 1.0))) + 0.5 * sigma1


def kappa_inf(C: float, F1: float, sigma1: float) -> float:
    """Fixed point of :func:`kappa_step`."""
    return 2.0 * (C * (F1 + math.sqrt(2.0 * (F1 + 1.0))) + 0.5 * sigma1)


def kappa_sequence(C: float, B1: float, F1: float, sigma1: float, n: int) -> list[float]:
    """[kappa_1, ..., kappa_n]."""
    out = [kappa_one(C, B1, F1)]
    while len(out) < n:
        out.append(kappa_step(out[-1], C, F1, sigma1))
    return out


@dataclass
class ConstantLedger:
    """Constants of the Hölder/Lipschitz estimates, tabulated on a grid of horizons.

    ``Q``, ``B``, ``F``, ``sigma`` are evaluated at the smallest tabulated
    horizon >= T, which is conservative because they are nondecreasing.
    Horizons beyond the solved interval use a Gronwall bound for Q.
    """

    C: float
    a: float
    theta: float
    t_final: float
    horizons: np.ndarray
    Q_values: np.ndarray
    B_values: np.ndarray
    sigma_values: np.ndarray
    samples: int
    inflation: float = INFLATION

    @property
    def t_theta(self) -> float:
        return min(1.0, 1.0 / (16.0 * self.theta**2))

    def _at(self, table: np.ndarray, T: float) -> float:
        idx = int(np.searchsorted(self.horizons, T - 1e-12 * max(1.0, T), side="left"))
        if idx >= len(self.horizons):
            raise ValueError(f"horizon {T:g} beyond the ledger table (max {self.horizons[-1]:g})")
        return float(table[idx])

    def Q(self, T: float) -> float:
        return self._at(self.Q_values, T)

    def B(self, T: float) -> float:
        return self._at(self.B_values, T)

    def F(self, T: float) -> float:
        return 2.0 * self.Q(T) + T * self.B(T)

    def sigma(self, T: float) -> float:
        return self._at(self.sigma_values, T)

    def kappa(self, n: int) -> float:
        """kappa_n, n >= 1."""
        if n < 1:
            raise ValueError("kappa index starts at 1")
        return kappa_sequence(self.C, self.B(1.0), self.F(1.0), self.sigma(1.0), n)[-1]

    @property
    def kappa_inf(self) -> float:
        return kappa_inf(self.C, self.F(1.0), self.sigma(1.0))

    @staticmethod
    def alpha(n: int) -> float:
        return 1.0 - 2.0**-n

    def kappa_t(self, t: float) -> float:
        """kappa_inf with F and sigma taken at horizon t + 1 - t_theta."""
        s = t + 1.0 - self.t_theta
        return kappa_inf(self.C, self.F(s), self.sigma(s))

    def lipschitz_bound(self, t: float) -> float:
        """Uninflated x-Lipschitz bound at time t > 0."""
        if t <= self.t_theta:
            return self.kappa_inf / math.sqrt(t)
        return self.kappa_t(t) / math.sqrt(self.t_theta)

    def lines(self) -> list[str]:
        return [
            f"C = A/a = {self.C:.6g}",
            f"t_theta = {self.t_theta:.6g}",
            f"Q_1 = {self.Q(1.0):.6g}, B_1 = {self.B(1.0):.6g} (sampled), "
            f"F_1 = {self.F(1.0):.6g}, sigma_1 = {self.sigma(1.0):.6g} (sampled)",
            f"Q_T = {self.Q(self.t_final):.6g} at T = {self.t_final:g}",
            f"kappa_1 = {self.kappa(1):.6g}, kappa_inf = {self.kappa_inf:.6g}",
            f"bounds from sampled suprema ({self.samples} samples) inflated by {self.inflation:g}",
        ]


def _sup_samples(sys: CoupledSystem, samples: int, seed: int):
    N, m = sys.dim, sys.m
    z = qmc.Halton(d=N + m, scramble=True, seed=seed).random(samples)
    x, unit = z[:, :N], 2.0 * z[:, N:] - 1.0
    # box vertices at a few x: exact suprema for couplings monotone in each u_j
    corners = np.array(np.meshgrid(*([[-1.0, 1.0]] * m), indexing="ij")).reshape(m, -1).T
    cx = np.repeat(x[:64], len(corners), axis=0)
    cu = np.tile(corners, (min(64, samples), 1))
    return np.concatenate([x, cx]), np.concatenate([unit, cu])


def build_ledger(
    sys: CoupledSystem,
    u: VectorField,
    samples: int = 10_000,
    seed: int = 0,
    inflation: float = INFLATION,
) -> ConstantLedger:
    """Tabulate Q_T from the field and B_T, sigma_T by sampling P_i, d_x P_i on M x [-Q_T, Q_T]^m."""
    grid = u.grid
    per_slice = np.abs(u.values).reshape(u.m, grid.n_t + 1, -1).max(axis=(0, 2))
    Q_field = np.maximum.accumulate(per_slice)
    x, unit = _sup_samples(sys, samples, seed)

    zero_u = np.zeros((len(x), sys.m))
    P0 = max(float(np.max(np.abs(sys.P(i, x, zero_u)))) for i in range(sys.m))
    phi_norm = float(per_slice[0])

    step = grid.dt
    extra = grid.t_final + step * np.arange(1, int(math.ceil(1.0 / step)) + 1)
    horizons = np.unique(np.concatenate([grid.times[1:], extra, [1.0]]))
    Q = np.empty(len(horizons))
    for j, T in enumerate(horizons):
        if T <= grid.t_final * (1 + 1e-12):
            k = min(grid.n_t, int(math.ceil(T / grid.dt - 1e-9)))
            Q[j] = Q_field[k]
        else:
            gronwall = (phi_norm + T * P0) * math.exp(sys.theta * T)
            Q[j] = max(Q_field[-1], gronwall)
    Q = np.maximum.accumulate(Q)

    B = np.empty(len(horizons))
    S = np.empty(len(horizons))
    cache: dict[float, tuple[float, float]] = {}
    for j, q in enumerate(Q):
        if q not in cache:
            uu = unit * q
            b = max(float(np.max(np.abs(sys.P(i, x, uu)))) for i in range(sys.m))
            s = max(float(np.max(np.linalg.norm(sys.dPdx(i, x, uu), axis=-1))) for i in range(sys.m))
            cache[q] = (b, s)
        B[j], S[j] = cache[q]
    return ConstantLedger(
        C=sys.A_const / sys.a,
        a=sys.a,
        theta=sys.theta,
        t_final=grid.t_final,
        horizons=horizons,
        Q_values=Q,
        B_values=np.maximum.accumulate(B),
        sigma_values=np.maximum.accumulate(S),
        samples=samples,
        inflation=inflation,
    )


# --- reports ---------------------------------------------------------------


@dataclass
class AuditRow:
    audit: str
    slice: int
    t: float
    measured: float
    bound: float
    status: str  # pass | FAIL | skipped | report


@dataclass
class AuditReport:
    name: str
    rows: list[AuditRow] = field(default_factory=list)
    passed: bool | None = None  # None: measurement only
    hard: bool = False
    summary: list[str] = field(default_factory=list)

    def verdict(self) -> str:
        if self.passed is None:
            return "REPORT"
        return "PASS" if self.passed else "FAIL"


def _status(ok: bool) -> str:
    return "pass" if ok else "FAIL"


def write_audit_csv(reports: Iterable[AuditReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["audit", "slice", "t", "measured", "bound", "status"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([r.audit, r.slice, format(r.t, ".17g"), format(r.measured, ".17g"),
                            format(r.bound, ".17g"), r.status])


def write_audit_txt(reports: Iterable[AuditReport], path: str | Path, header: Iterable[str] = ()) -> None:
    lines = list(header)
    for rep in reports:
        kind = "hard" if rep.hard else "soft"
        lines.append(f"[{rep.verdict()}] {rep.name} ({kind})")
        lines.extend("    " + s for s in rep.summary)
    Path(path).write_text("\n".join(lines) + "\n")


# --- x regularity ----------------------------------------------------------


def _offsets(dim: int, radius: int) -> np.ndarray:
    rng = np.arange(-radius, radius + 1)
    mesh = np.stack([m.ravel() for m in np.meshgrid(*([rng] * dim), indexing="ij")], axis=-1)
    # one representative per +-pair, origin dropped
    keep = [tuple(d) > tuple(-d) for d in mesh]
    return mesh[np.array(keep)]


def _slice_diff(values: np.ndarray, d: np.ndarray) -> np.ndarray:
    """max_i |u_i(x + d dx) - u_i(x)| over the slice, values (m, *shape)."""
    shifted = np.roll(values, shift=tuple(-int(c) for c in d), axis=tuple(range(1, values.ndim)))
    return np.max(np.abs(shifted - values))


def slice_lipschitz(u: VectorField, k: int, radius: int | None = None) -> float:
    """Empirical max |u(x)-u(y)| / |x-y| on slice k.

    In 1D adjacent pairs already give the maximum over all pairs; in 2D the
    scan covers offsets with |d|_inf <= radius (default 2).
    """
    grid = u.grid
    if radius is None:
        radius = 1 if grid.dim == 1 else 2
    vals = u.values[:, k]
    best = 0.0
    for d in _offsets(grid.dim, radius):
        dist = float(np.linalg.norm(d)) * grid.dx
        best = max(best, _slice_diff(vals, d) / dist)
    return best


def holder_audit(u: VectorField, ledger: ConstantLedger, n: int = 1) -> AuditReport:
    """|u(x,t) - u(y,t)| <= kappa_n / sqrt(t) |x-y|^alpha_n for 0 < t < t_theta, |x-y| <= t."""
    grid = u.grid
    eligible = [k for k in range(1, grid.n_t + 1) if grid.times[k] < ledger.t_theta]
    if not eligible:
        raise ValueError("t_Θ below first slice; refine dt or reduce Θ")
    kn, an = ledger.kappa(n), ledger.alpha(n)
    rep = AuditReport(f"holder (n={n})")
    worst = 0.0
    skipped = []
    half = grid.points_per_axis // 2
    for k in eligible:
        t = float(grid.times[k])
        if t < grid.dx:
            skipped.append(k)
            rep.rows.append(AuditRow("holder", k, t, 0.0, 0.0, "skipped"))
            continue
        r = min(half, int(math.floor(t / grid.dx + 1e-9)))
        ratio = 0.0
        for d in _offsets(grid.dim, r):
            dist = float(np.linalg.norm(d)) * grid.dx
            if dist > t * (1 + 1e-12):
                continue
            bound = ledger.inflation * kn / math.sqrt(t) * dist**an
            ratio = max(ratio, _slice_diff(u.values[:, k], d) / bound)
        worst = max(worst, ratio)
        rep.rows.append(AuditRow("holder", k, t, ratio, 1.0, _status(ratio <= 1 + 1e-6)))
    rep.passed = worst <= 1 + 1e-6
    rep.summary.append(f"kappa_{n} = {kn:.6g}, alpha_{n} = {an:g}, worst measured/bound = {worst:.4g}")
    rep.summary.append(f"{len(eligible) - len(skipped)} slices audited in (0, t_theta)")
    if skipped:
        rep.summary.append(f"skipped slices with t < dx (no pairs |x-y| <= t): {skipped}")
    return rep


def lipschitz_audit(u: VectorField, ledger: ConstantLedger) -> AuditReport:
    """x-Lipschitz per slice against the ledger, and both t-direction bounds."""
    grid, infl = u.grid, ledger.inflation
    rep = AuditReport("lipschitz")
    ok = True
    worst_x = 0.0
    for k in range(1, grid.n_t + 1):
        t = float(grid.times[k])
        L = slice_lipschitz(u, k)
        bound = infl * ledger.lipschitz_bound(t)
        good = L <= bound
        ok &= good
        worst_x = max(worst_x, L / bound)
        rep.rows.append(AuditRow("lipschitz_x", k, t, L, bound, _status(good)))

    # t-direction: for slice tau, all earlier slices t
    vals = u.values.reshape(u.m, grid.n_t + 1, -1)
    worst_up = worst_lo = 0.0
    for kt in range(1, grid.n_t + 1):
        tau = float(grid.times[kt])
        gaps = (tau - grid.times[:kt])[None, :, None]
        q = (vals[:, kt : kt + 1] - vals[:, :kt]) / gaps
        up, lo = float(q.max()), float(q.min())
        Bt = ledger.B(tau)
        kt_tilde = ledger.lipschitz_bound(tau)
        c = kt_tilde / ledger.a + math.sqrt(2.0 * Bt / ledger.a)
        up_bound = infl * Bt
        lo_bound = -infl * (Bt + kt_tilde * c)
        # the upper bound is exact for the scheme (zero displacement is a candidate); allow rounding
        g_up = up <= up_bound + 1e-9 / grid.dt
        g_lo = lo >= lo_bound
        ok &= g_up and g_lo
        worst_up = max(worst_up, up - up_bound)
        worst_lo = min(worst_lo, lo - lo_bound)
        rep.rows.append(AuditRow("lipschitz_t_upper", kt, tau, up, up_bound, _status(g_up)))
        rep.rows.append(AuditRow("lipschitz_t_lower", kt, tau, lo, lo_bound, _status(g_lo)))
    rep.passed = bool(ok)
    rep.summary.append(f"x: worst empirical/bound = {worst_x:.4g} over {grid.n_t} slices")
    rep.summary.append(f"t upper: worst excess over B_tau = {worst_up:.3e}")
    rep.summary.append(f"t lower: smallest margin = {-worst_lo:.3e}" if worst_lo < 0 else
                       "t lower: all increments above -(B_tau + kappa~ c)")
    return rep


# --- PDE residual ----------------------------------------------------------


def _spatial_grad(slice_values: np.ndarray, dim: int, dx: float) -> np.ndarray:
    """slice_values (*shape) -> (*shape, dim) central differences."""
    out = np.empty(slice_values.shape + (dim,))
    for j in range(dim):
        out[..., j] = (np.roll(slice_values, -1, axis=j) - np.roll(slice_values, 1, axis=j)) / (2 * dx)
    return out


def pde_residual(sys: CoupledSystem, u: VectorField) -> np.ndarray:
    """r_i(x, t_k) = d_t u_i + H_i(x, d_x u_i, u) on interior slices, shape (m, n_t - 1, *shape)."""
    grid = u.grid
    if grid.n_t < 3:
        raise ValueError("PDE residual needs n_t >= 3")
    pts = grid.coords()
    out = np.empty((u.m, grid.n_t - 1) + grid.shape)
    for k in range(1, grid.n_t):
        U = u.values[:, k].reshape(u.m, -1).T  # (size, m)
        for i in range(u.m):
            dt_u = (u.values[i, k + 1] - u.values[i, k - 1]) / (2 * grid.dt)
            p = _spatial_grad(u.values[i, k], grid.dim, grid.dx).reshape(-1, grid.dim)
            H = hamiltonian(sys, i, pts, p, U).reshape(grid.shape)
            out[i, k - 1] = dt_u + H
    return out


def residual_audit(sys: CoupledSystem, u: VectorField) -> AuditReport:
    r = np.abs(pde_residual(sys, u))
    grid = u.grid
    rep = AuditReport("pde residual")
    for k in range(1, grid.n_t):
        sl = r[:, k - 1]
        rep.rows.append(AuditRow("residual_median", k, float(grid.times[k]), float(np.median(sl)), math.nan, "report"))
    med, p90 = float(np.median(r)), float(np.quantile(r, 0.9))
    rep.summary.append(f"median |r| = {med:.4e}, p90 |r| = {p90:.4e} over interior slices")
    rep.rows.append(AuditRow("residual_median", -1, math.nan, med, math.nan, "report"))
    rep.rows.append(AuditRow("residual_p90", -1, math.nan, p90, math.nan, "report"))
    return rep


# --- curves ----------------------------------------------------------------


def _second_differences(slice_values: np.ndarray, dim: int) -> np.ndarray:
    """(dim, *shape) array of u(x+e_j dx) + u(x-e_j dx) - 2u(x)."""
    return np.stack(
        [np.roll(slice_values, -1, axis=j) + np.roll(slice_values, 1, axis=j) - 2 * slice_values for j in range(dim)]
    )


def is_differentiable(u: VectorField, i: int, k: int, lipschitz: float | None = None) -> np.ndarray:
    """Boolean mask over slice k: |second difference| <= 10 L dx^2 at x and its axis neighbours.

    L is the empirical slice Lipschitz constant.  A kink of slope jump s gives
    a second difference of order s dx, far above the threshold, while smooth
    points stay at O(dx^2).
    """
    grid = u.grid
    if lipschitz is None:
        lipschitz = slice_lipschitz(u, k)
    d2 = np.max(np.abs(_second_differences(u.values[i, k], grid.dim)), axis=0)
    near = d2.copy()
    for j in range(grid.dim):
        near = np.maximum(near, np.maximum(np.roll(d2, 1, axis=j), np.roll(d2, -1, axis=j)))
    return near <= 10.0 * lipschitz * grid.dx**2


@dataclass
class CurveCheck:
    component: int
    end_point: tuple[int, ...]
    end_slice: int
    differentiable: bool
    late_speed: float
    V: np.ndarray | None = None
    P: np.ndarray | None = None
    defect_fenchel: float = math.nan
    defect_gradient: float = math.nan
    tol: float = math.nan

    @property
    def status(self) -> str:
        if not self.differentiable:
            return "skipped (kink)"
        return _status(max(self.defect_fenchel, self.defect_gradient) <= self.tol)


def curve_regularity_audit(
    sys: CoupledSystem,
    curve: MinimizingCurve,
    u: VectorField,
    lipschitz: float | None = None,
    mask: np.ndarray | None = None,
) -> CurveCheck:
    """Late-time speed of a backtracked curve and the duality defects at its endpoint."""
    grid = u.grid
    i, k, x0 = curve.component, curve.end_slice, tuple(curve.end_point)
    speeds = curve.speeds
    late = float(np.max(speeds[k // 2 :])) if len(speeds) else 0.0
    if mask is None:
        mask = is_differentiable(u, i, k, lipschitz)
    check = CurveCheck(i, x0, k, bool(mask[x0]), late, tol=10.0 * (grid.dx + grid.dt))
    if not check.differentiable or k == 0:
        return check
    V = curve.velocities[-1]
    P = _spatial_grad(u.values[i, k], grid.dim, grid.dx)[x0]
    xp = np.asarray(x0, dtype=float)[None, :] * grid.dx
    uu = u.values[(slice(None), k) + x0][None, :]
    L = float(lagrangian(sys, i, xp, V[None, :], uu)[0])
    H = float(hamiltonian(sys, i, xp, P[None, :], uu)[0])
    check.V, check.P = V, P
    check.defect_fenchel = abs(float(P @ V) - L - H)
    check.defect_gradient = float(np.linalg.norm(V - hamiltonian_grad_p(sys, i, xp, P[None, :])[0]))
    return check


def duality_audit(
    sys: CoupledSystem,
    u: VectorField,
    cfg: OperatorConfig,
    k: int | None = None,
    endpoints: Iterable[tuple[int, ...]] | None = None,
) -> tuple[AuditReport, list[CurveCheck]]:
    """Backtrack from every endpoint on slice k (default: last) and check the duality relation."""
    grid = u.grid
    k = grid.n_t if k is None else k
    bt = Backtracker(sys, u, u.tables.frozen, cfg)
    pts = list(endpoints) if endpoints is not None else [grid.unflat(f) for f in range(grid.size)]
    L = slice_lipschitz(u, k)
    rep = AuditReport("duality at differentiable endpoints")
    checks: list[CurveCheck] = []
    for i in range(u.m):
        mask = is_differentiable(u, i, k, L)
        for x in pts:
            checks.append(curve_regularity_audit(sys, bt.curve(i, x, k), u, L, mask))
    smooth = [c for c in checks if c.differentiable]
    frac = len(smooth) / max(1, len(checks))
    worst = max((max(c.defect_fenchel, c.defect_gradient) for c in smooth), default=0.0)
    tol = 10.0 * (grid.dx + grid.dt)
    rep.passed = worst <= tol
    t = float(grid.times[k])
    rep.rows.append(AuditRow("duality_defect", k, t, worst, tol, _status(rep.passed)))
    rep.rows.append(AuditRow("differentiable_fraction", k, t, frac, math.nan, "report"))
    rep.rows.append(AuditRow("late_speed_max", k, t, max(c.late_speed for c in checks), cfg.v_max, "report"))
    rep.summary.append(f"{len(smooth)}/{len(checks)} endpoints classified differentiable ({100 * frac:.1f}%)")
    rep.summary.append(f"max duality defect {worst:.4e} vs tolerance 10(dx+dt) = {tol:.4e}")
    rep.summary.append(f"max speed on [t/2, t]: {max(c.late_speed for c in checks):.4g}")
    return rep, checks


def calibration_equality(
    sys: CoupledSystem,
    u: VectorField,
    cfg: OperatorConfig,
    slices: Iterable[int] | None = None,
    endpoints: Iterable[tuple[int, ...]] | None = None,
    tol: float = 1e-9,
) -> AuditReport:
    """Along backtracked curves, value minus accumulated action is constant on every subinterval."""
    grid = u.grid
    bt = Backtracker(sys, u, u.tables.frozen, cfg)
    table = u.tables.values
    pts = list(endpoints) if endpoints is not None else [grid.unflat(f) for f in range(grid.size)]
    ks = list(slices) if slices is not None else [grid.n_t]
    rep = AuditReport("calibration equality", hard=True)
    worst_all = 0.0
    count = 0
    for k in ks:
        worst = 0.0
        for i in range(u.m):
            for x in pts:
                c = bt.curve(i, x, k)
                W = table[i, np.arange(k + 1), c.fine_nodes]
                S = c.start_value + np.concatenate([[0.0], np.cumsum(c.step_actions)])
                D = W - S
                worst = max(worst, float(D.max() - D.min()))
                count += 1
        worst_all = max(worst_all, worst)
        rep.rows.append(AuditRow("calibration_equality", k, float(grid.times[k]), worst, tol, _status(worst <= tol)))
    rep.passed = worst_all <= tol
    rep.summary.append(f"{count} backtracked curves, max spread of value - action {worst_all:.3e} (tol {tol:g})")
    return rep


def calibration_inequality(
    sys: CoupledSystem,
    u: VectorField,
    cfg: OperatorConfig,
    n_curves: int = 1000,
    seed: int = 0,
    tol: float = 1e-9,
) -> AuditReport:
    """value(g(t2)) - value(g(t1)) <= action of g on [t1, t2] for random admissible curves g.

    Half the curves are minimizers with every displacement jittered by one
    subgrid cell, half are random walks; all run from slice 0 to the last
    slice and every subinterval is checked.
    """
    plan, table, frozen = u.tables.plan, u.tables.values, u.tables.frozen
    grid, n_t, N = u.grid, u.grid.n_t, u.grid.dim
    rng = np.random.default_rng(seed)
    disp_index = {tuple(d): r for r, d in enumerate(plan.disp)}
    bt = Backtracker(sys, u, frozen, cfg)

    comps = rng.integers(0, u.m, size=n_curves)
    rows = np.empty((n_curves, n_t), dtype=int)
    start = rng.integers(0, plan.nf, size=n_curves)
    half = n_curves // 2
    slow = np.flatnonzero(np.linalg.norm(plan.disp, axis=-1) <= max(1.0, np.abs(plan.disp).max() / 4))
    for c in range(n_curves):
        if c < half:
            curve = bt.curve(int(comps[c]), grid.unflat(int(rng.integers(grid.size))), n_t)
            start[c] = curve.fine_nodes[0]
            base = np.rint(curve.velocities * grid.dt / plan.dxf).astype(int)
            for s in range(n_t):
                d = tuple(base[s] + rng.integers(-1, 2, size=N))
                rows[c, s] = disp_index.get(d, disp_index[tuple(base[s])])
        else:
            pool = slow if c % 2 else np.arange(plan.nd)
            rows[c] = rng.choice(pool, size=n_t)

    nodes = np.empty((n_curves, n_t + 1), dtype=int)
    nodes[:, 0] = start
    shape = plan.fine_shape
    for s in range(n_t):
        multi = np.stack(np.unravel_index(nodes[:, s], shape), axis=-1) + plan.disp[rows[:, s]]
        nodes[:, s + 1] = np.ravel_multi_index(tuple((multi % plan.nfa).T), shape)

    costs = np.empty((n_curves, n_t))
    for i in range(u.m):
        sel = np.flatnonzero(comps == i)
        if not len(sel):
            continue
        for s in range(n_t):
            G = plan.coupling_cost(i, frozen, s)
            r, x = rows[sel, s], nodes[sel, s + 1]
            K = plan.kinetic_at(i, r, x)
            costs[sel, s] = K - (G[plan.src[r, x]] if G.ndim == 1 else G[r, x])

    W = table[comps[:, None], np.arange(n_t + 1)[None, :], nodes]
    S = np.concatenate([np.zeros((n_curves, 1)), np.cumsum(costs, axis=1)], axis=1)
    E = W - S  # must be nonincreasing along every curve
    runmin = np.minimum.accumulate(E[:, :-1], axis=1)
    excess = float(np.max(E[:, 1:] - runmin))
    rep = AuditReport("calibration inequality")
    rep.passed = excess <= tol
    rep.rows.append(AuditRow("calibration_inequality", n_t, float(grid.times[n_t]), -excess, -tol, _status(rep.passed)))
    rep.summary.append(f"{n_curves} random admissible curves, worst slack {-excess:.3e} (must be >= {-tol:g})")
    return rep


def semiconcavity_constant(u: VectorField, t_min: float) -> tuple[float, list[AuditRow]]:
    """K = max (u(x+dx) + u(x-dx) - 2u(x)) / dx^2 over slices with t >= t_min."""
    grid = u.grid
    rows = []
    K = -math.inf
    for k in range(1, grid.n_t + 1):
        t = float(grid.times[k])
        if t < t_min:
            continue
        d2 = max(float(np.max(_second_differences(u.values[i, k], grid.dim))) for i in range(u.m))
        kk = d2 / grid.dx**2
        K = max(K, kk)
        rows.append(AuditRow("semiconcavity_K", k, t, kk, math.nan, "report"))
    return K, rows
