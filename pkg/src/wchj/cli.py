"""``wchj run | refine | validate``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .config import AUDITS, ConfigError, ExperimentConfig, parse_audit_list, parse_config, parse_config_text
from .fixed_point import SolveNotConverged, contraction_probe, solve
from .lax_oleinik import Backtracker, OperatorConfig, SweepPlan, apply_operator, default_v_max, estimate_bytes, write_curve_csv
from .model import VectorField, read_slice_csv, sup_norm, validate_system, write_field_csv

logger = logging.getLogger("wchj")

CURVES_PER_COMPONENT = 8


class RunError(RuntimeError):
    pass


def _load(path: str, overrides: list[str]) -> ExperimentConfig:
    cfg = parse_config(path)
    if not overrides:
        return cfg
    # re-parse the canonical text with overrides appended to their sections
    text = cfg.emit()
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("["):
            current = line[1:-1]
            sections[current] = []
        elif line.strip():
            sections[current].append(line)
    errors = []
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            errors.append(f"--set expects section.key=value, got {item!r}")
            continue
        lhs, value = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        lines = [ln for ln in sections.setdefault(sec, []) if ln.split("=", 1)[0].strip() != key]
        sections[sec] = lines + [f"{key} = {value.strip()}"]
    if errors:
        raise ConfigError(errors)
    merged = "\n".join(f"[{s}]\n" + "\n".join(v) for s, v in sections.items())
    return parse_config_text(merged, base=Path(path).parent, source=Path(path))


def operator_config(exp: ExperimentConfig, sys_, grid, phi) -> OperatorConfig:
    v_max = exp.v_max if exp.v_max is not None else default_v_max(sys_, grid, phi)
    return OperatorConfig(v_max=v_max, quadrature=exp.quadrature, subgrid=exp.subgrid,
                          velocity_scale=exp.velocity_scale)


def _check_memory(grid, op: OperatorConfig, m: int, cap_mb: float, label: str = "") -> float:
    need = estimate_bytes(grid, op, m) / 2**20
    if need > cap_mb:
        raise RunError(
            f"refusing{label}: n_x={grid.points_per_axis}, n_t={grid.n_t} needs an estimated "
            f"{need:.0f} MiB, above the cap of {cap_mb:.0f} MiB (raise memory_cap_mb)"
        )
    return need


def _perturbation(u: VectorField, seed: int) -> VectorField:
    """Smooth seeded perturbation of u used for the contraction probe."""
    rng = np.random.default_rng(seed)
    pts = u.grid.coords()
    vals = u.values.copy()
    for i in range(u.m):
        for k in range(u.grid.n_t + 1):
            c = rng.normal(size=(3, u.grid.dim))
            wave = sum(np.sin(2 * np.pi * (j + 1) * pts @ c[j] + c[j, 0]) for j in range(3)) / 3
            vals[i, k] += 0.1 * wave.reshape(u.grid.shape)
    return VectorField(u.grid, vals)


def _rows_contraction(rows, label):
    return [analysis.AuditRow(label, r.k, r.t, r.measured, r.bound, "FAIL" if r.violated else "pass") for r in rows]


def run_experiment(exp: ExperimentConfig, out: Path, include_timing: bool = False, plots: bool = False) -> int:
    sys_ = exp.build_system()
    grid = exp.build_grid()
    phi = exp.build_initial(grid)
    check = validate_system(sys_, seed=exp.seed)
    if not check.passed:
        raise RunError("system fails assumption checks:\n" + "\n".join(check.lines()))
    op = operator_config(exp, sys_, grid, phi)
    _check_memory(grid, op, sys_.m, exp.memory_cap_mb)
    plan = SweepPlan(sys_, grid, phi, op)
    logger.info("subgrid factor %d, %d displacements per step", plan.sub, plan.nd)

    out.mkdir(parents=True, exist_ok=True)
    try:
        u, report = solve(sys_, grid, phi, op, tol=exp.tol, max_iter=exp.max_iter, plan=plan)
    except SolveNotConverged as exc:
        exc.report.write_csv(out / "report.csv", include_timing=include_timing)
        raise
    write_field_csv(u, out / "solution.csv")
    report.write_csv(out / "report.csv", include_timing=include_timing)
    (out / "config.cfg").write_text(exp.emit())

    reports: list[analysis.AuditReport] = []

    # hard assertions
    Au = apply_operator(sys_, grid, phi, u, op, plan)
    fp = sup_norm(Au - u)
    fp_rep = analysis.AuditReport("fixed-point residual", hard=True, passed=fp <= exp.tol)
    fp_rep.rows.append(analysis.AuditRow("fixed_point_residual", grid.n_t, grid.t_final, fp, exp.tol,
                                         "pass" if fp_rep.passed else "FAIL"))
    fp_rep.summary.append(f"|A[u*] - u*| = {fp:.3e} (tol {exp.tol:g}) after {report.iterations} iterations")
    excess = report.envelope_excess()
    fp_rep.summary.append(f"factorial envelope: worst excess {max(excess, default=0.0):.3e}")
    reports.append(fp_rep)

    con = analysis.AuditReport("contraction", hard=True)
    u0 = VectorField.constant_in_time(grid, phi)
    rows_a = contraction_probe(sys_, grid, phi, u, u0, op, plan)
    rows_b = contraction_probe(sys_, grid, phi, u, _perturbation(u, exp.seed), op, plan)
    con.rows += _rows_contraction(rows_a, "contraction_vs_initial") + _rows_contraction(rows_b, "contraction_vs_perturbed")
    con.passed = not any(r.violated for r in rows_a + rows_b)
    worst = max((r.measured - r.bound) for r in rows_a + rows_b)
    con.summary.append(f"{2 * len(rows_a)} slices probed, worst measured - bound {worst:.3e}")
    reports.append(con)

    reports.append(analysis.calibration_equality(sys_, u, op))
    reports.append(analysis.calibration_inequality(sys_, u, op, seed=exp.seed))

    ledger = analysis.build_ledger(sys_, u, seed=exp.seed)
    if "holder" in exp.audit:
        reports.append(analysis.holder_audit(u, ledger, 1))
    lip = None
    if "lipschitz" in exp.audit:
        lip = analysis.lipschitz_audit(u, ledger)
        reports.append(lip)
    if "residual" in exp.audit and grid.n_t >= 3:
        reports.append(analysis.residual_audit(sys_, u))

    curves = []
    warnings = []
    if "curves" in exp.audit:
        dual, checks = analysis.duality_audit(sys_, u, op)
        reports.append(dual)
        K, krows = analysis.semiconcavity_constant(u, ledger.t_theta / 2)
        semi = analysis.AuditReport("semiconcavity", rows=krows)
        semi.summary.append(f"K = {K:.4g} on slices t >= t_theta/2" if math.isfinite(K) else "no slices t >= t_theta/2")
        reports.append(semi)
        bt = Backtracker(sys_, u, u.tables.frozen, op)
        curve_dir = out / "curves"
        curve_dir.mkdir(exist_ok=True)
        stride = max(1, grid.points_per_axis // CURVES_PER_COMPONENT)
        for i in range(u.m):
            for ix in range(0, grid.points_per_axis, stride):
                end = (ix,) * grid.dim
                c = bt.curve(i, end, grid.n_t)
                curves.append(c)
                write_curve_csv(c, curve_dir / f"u{i + 1}_x{'_'.join(map(str, end))}.csv")
        top = max(max((float(c.late_speed) for c in checks), default=0.0),
                  max((float(c.speeds.max()) if len(c.speeds) else 0.0 for c in curves), default=0.0))
        if top >= op.v_max - op.velocity_step(grid) * 0.5:
            warnings.append(f"warning: backtracked curves saturate the speed cap v_max = {op.v_max:g}; "
                            f"rerun with a larger v_max")

    if exp.oracle is not None:
        ref, t_ref = read_slice_csv(exp.oracle)
        err = _oracle_error(u, ref, t_ref)
        rep = analysis.AuditReport("oracle comparison", passed=err <= 5e-3)
        rep.rows.append(analysis.AuditRow("oracle_sup_error", grid.n_t, grid.t_final, err, 5e-3,
                                          "pass" if rep.passed else "FAIL"))
        rep.summary.append(f"sup error vs {exp.oracle.name} at t = {t_ref:g}: {err:.3e}")
        reports.append(rep)

    header = [
        f"wchj run: m={sys_.m}, dim={grid.dim}, n_x={grid.points_per_axis}, n_t={grid.n_t}, T={grid.t_final:g}",
        f"operator: v_max={op.v_max:g}, quadrature={op.quadrature}, subgrid={plan.sub}, "
        f"velocity step={op.velocity_step(grid):.4g}",
        f"solve: {report.iterations} iterations, last residual {report.residuals[-1]:.3e}, "
        f"a-posteriori error bound {report.error_bound():.3e}",
        "ledger:",
    ] + ["    " + s for s in ledger.lines()] + warnings + [""]
    analysis.write_audit_csv(reports, out / "audit.csv")
    analysis.write_audit_txt(reports, out / "audit.txt", header)
    for w in warnings:
        print(w, file=sys.stderr)
    if plots:
        from .plotting import render_run

        render_run(out, u, report, lip.rows[: grid.n_t] if lip else None, curves)

    hard_ok = all(r.passed for r in reports if r.hard)
    for r in reports:
        print(f"[{r.verdict()}] {r.name}" + (f": {r.summary[0]}" if r.summary else ""))
    return 0 if hard_ok else 1


def _oracle_error(u: VectorField, ref: np.ndarray, t_ref: float) -> float:
    grid = u.grid
    k = int(round(t_ref / grid.dt))
    if abs(k * grid.dt - t_ref) > 1e-9 or not 0 <= k <= grid.n_t:
        raise RunError(f"oracle time {t_ref:g} is not a slice of this grid")
    if ref.shape[0] != u.m:
        raise RunError(f"oracle has {ref.shape[0]} components, solution has {u.m}")
    n, nr = grid.points_per_axis, ref.shape[1]
    if n % nr == 0:
        sol = u.values[(slice(None), k) + (slice(None, None, n // nr),) * grid.dim]
        return float(np.max(np.abs(sol - ref)))
    if nr % n == 0:
        sl = (slice(None),) + (slice(None, None, nr // n),) * grid.dim
        return float(np.max(np.abs(u.values[:, k] - ref[sl])))
    raise RunError(f"oracle grid n={nr} not nested with n_x={n}")


def refine_experiment(exp: ExperimentConfig, levels: int, out: Path | None = None) -> list[dict]:
    if levels < 2:
        raise RunError("refine needs --levels >= 2")
    configs = [exp.with_grid(exp.n_x * 2**l, exp.n_t * 2**l) for l in range(levels)]
    sys_ = exp.build_system()
    ops = []
    for l, c in enumerate(configs):
        grid = c.build_grid()
        phi = c.build_initial(grid)
        op = operator_config(c, sys_, grid, phi)
        _check_memory(grid, op, sys_.m, exp.memory_cap_mb, label=f" level {l}")
        ops.append((grid, phi, op))
    fields = []
    for grid, phi, op in ops:
        u, rep = solve(sys_, grid, phi, op, tol=exp.tol, max_iter=exp.max_iter)
        logger.info("level n_x=%d: %d iterations", grid.points_per_axis, rep.iterations)
        fields.append(u)
    rows = []
    ref = read_slice_csv(exp.oracle) if exp.oracle is not None else None
    for l, u in enumerate(fields):
        row = {"level": l, "n_x": u.grid.points_per_axis, "n_t": u.grid.n_t}
        if l + 1 < len(fields):
            fine = fields[l + 1].values
            sl = (slice(None), slice(None, None, 2)) + (slice(None, None, 2),) * u.grid.dim
            row["diff_to_next"] = float(np.max(np.abs(fine[sl] - u.values)))
        if ref is not None:
            row["oracle_error"] = _oracle_error(u, *ref)
        rows.append(row)
    for key, order_key in (("diff_to_next", "order"), ("oracle_error", "oracle_order")):
        for l in range(len(rows) - 1):
            a, b = rows[l].get(key), rows[l + 1].get(key)
            if a is not None and b is not None:
                rows[l][order_key] = math.log2(a / b) if a > 0 and b > 0 else math.nan
    cols = ["level", "n_x", "n_t", "diff_to_next", "order"] + (["oracle_error", "oracle_order"] if ref else [])
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_cell(r.get(c)) for c in cols))
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "refine.csv").write_text(text)
    sys.stdout.write(text)
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".6e")
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wchj", description="Weakly coupled Hamilton-Jacobi systems on the torus.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve, audit and write CSV outputs")
    r.add_argument("config")
    r.add_argument("--tol", type=float)
    r.add_argument("--max-iter", type=int)
    r.add_argument("--audit", help=f"all, none, or comma list of {', '.join(AUDITS)}")
    r.add_argument("--out", help="output directory (default: config 'out' or ./out)")
    r.add_argument("--timing", action="store_true", help="record wall times in report.csv (breaks byte reproducibility)")
    r.add_argument("--plots", action="store_true", help="also render PNG figures (needs matplotlib)")
    r.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    f = sub.add_parser("refine", help="convergence table under grid doubling")
    f.add_argument("config")
    f.add_argument("--levels", type=int, required=True)
    f.add_argument("--out")
    f.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    v = sub.add_parser("validate", help="parse the config and spot-check the assumptions")
    v.add_argument("config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            exp = parse_config(args.config)
            report = validate_system(exp.build_system(), seed=exp.seed)
            exp.build_initial()
            for line in report.lines():
                print(line)
            return 0 if report.passed else 1
        exp = _load(args.config, args.set)
        if args.command == "run":
            if args.tol is not None:
                exp = replace(exp, tol=args.tol)
            if args.max_iter is not None:
                exp = replace(exp, max_iter=args.max_iter)
            if args.audit is not None:
                exp = replace(exp, audit=parse_audit_list(args.audit))
            out = Path(args.out or exp.out or "out")
            return run_experiment(exp, out, include_timing=args.timing, plots=args.plots)
        refine_experiment(exp, args.levels, Path(args.out) if args.out else None)
        return 0
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except (RunError, SolveNotConverged, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
