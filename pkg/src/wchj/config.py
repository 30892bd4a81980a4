"""Experiment configs: flat ``key = value`` lines grouped in ``[section]`` headers.

Example::

    [system]
    m = 2
    kinetic = quadratic
    c_1 = 0.5
    c_2 = 0.5
    P_1 = u_2
    P_2 = u_1
    a = 0.4
    A = 1.2
    theta = 1

    [grid]
    dim = 1
    n_x = 64
    T = 0.5
    n_t = 64

    [operator]
    v_max = 8

    [initial]
    phi_1 = cos(2*pi*x)
    phi_2 = sin(2*pi*x)

Kinetic terms are either ``quadratic`` (``c_i`` is a coefficient expression
in x, giving h_i = c_i(x)|p|^2) or ``general`` (``h_i`` is an expression in
x and p, dualized numerically).  Relative paths resolve against the config
file's directory.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .expr import Expression, ExpressionError
from .legendre import QuadraticKinetic, dualize
from .model import CoupledSystem, InitialData, TorusGrid, read_initial_csv

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_text", "parse_audit_list", "AUDITS"]

AUDITS = ("holder", "lipschitz", "residual", "curves")
SECTIONS = ("system", "grid", "operator", "initial", "run")
_INDEXED = re.compile(r"^(c|h|P|phi)_(\d+)$")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    m: int
    kinetic: str
    kinetic_exprs: tuple[str, ...]
    coupling_exprs: tuple[str, ...]
    a: float
    A: float
    theta: float
    dim: int
    n_x: int
    T: float
    n_t: int
    initial_exprs: tuple[str, ...] | None = None
    initial_csv: Path | None = None
    v_max: float | None = None
    quadrature: str = "left_endpoint"
    subgrid: int | None = None
    velocity_scale: float = 2.0
    tol: float = 1e-9
    max_iter: int = 100
    audit: tuple[str, ...] = AUDITS
    out: str | None = None
    seed: int = 0
    oracle: Path | None = None
    memory_cap_mb: float = 4096.0
    source: Path | None = field(default=None, compare=False)

    # --- builders ---------------------------------------------------------

    def _coords(self) -> list[str]:
        return ["x", "y"][: self.dim]

    def _env(self, x: np.ndarray, u: np.ndarray | None = None, p: np.ndarray | None = None) -> dict:
        env = {name: x[..., j] for j, name in enumerate(self._coords())}
        if u is not None:
            env.update({f"u_{j + 1}": u[..., j] for j in range(self.m)})
        if p is not None:
            if self.dim == 1:
                env["p"] = p[..., 0]
            else:
                env.update({f"p_{j + 1}": p[..., j] for j in range(self.dim)})
        return env

    def build_system(self) -> CoupledSystem:
        coords = set(self._coords())
        unknowns = {f"u_{j + 1}" for j in range(self.m)}
        momenta = {"p"} if self.dim == 1 else {"p_1", "p_2"}
        duals = []
        for src in self.kinetic_exprs:
            if self.kinetic == "quadratic":
                e = Expression(src, coords)

                def coef(x, e=e):
                    x = np.asarray(x, dtype=float)
                    return np.broadcast_to(np.asarray(e(**self._env(x)), dtype=float), x.shape[:-1])

                duals.append(dualize(QuadraticKinetic(coef), (self.a, self.A)))
            else:
                e = Expression(src, coords | momenta)
                grads = [e.diff(n) for n in sorted(momenta)]

                def h(x, p, e=e):
                    x, p = np.asarray(x, dtype=float), np.asarray(p, dtype=float)
                    shape = np.broadcast_shapes(x.shape, p.shape)[:-1]
                    return np.broadcast_to(np.asarray(e(**self._env(x, p=p)), dtype=float), shape)

                def grad(x, p, grads=grads):
                    x, p = np.asarray(x, dtype=float), np.asarray(p, dtype=float)
                    shape = np.broadcast_shapes(x.shape, p.shape)
                    env = self._env(x, p=p)
                    return np.stack([np.broadcast_to(np.asarray(g(**env), dtype=float), shape[:-1]) for g in grads], -1)

                duals.append(dualize(h, (self.a, self.A), grad_p=grad, dim=self.dim))
        coupling, coupling_grad = [], []
        for src in self.coupling_exprs:
            e = Expression(src, coords | unknowns)
            de = [e.diff(n) for n in self._coords()]

            def P(x, u, e=e):
                shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
                return np.broadcast_to(np.asarray(e(**self._env(np.asarray(x), np.asarray(u))), dtype=float), shape)

            def dP(x, u, de=de):
                shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
                env = self._env(np.asarray(x), np.asarray(u))
                return np.stack([np.broadcast_to(np.asarray(d(**env), dtype=float), shape) for d in de], -1)

            coupling.append(P)
            coupling_grad.append(dP)
        return CoupledSystem(duals, coupling, self.a, self.A, self.theta, coupling_grad_x=coupling_grad, dim=self.dim)

    def build_grid(self) -> TorusGrid:
        return TorusGrid(self.dim, self.n_x, self.T, self.n_t)

    def build_initial(self, grid: TorusGrid | None = None) -> InitialData:
        grid = grid or self.build_grid()
        if self.initial_csv is not None:
            return read_initial_csv(self.initial_csv, grid, self.m)
        exprs = [Expression(s, set(self._coords())) for s in self.initial_exprs]

        def phi(x):
            x = np.asarray(x, dtype=float)
            return np.stack([np.broadcast_to(np.asarray(e(**self._env(x)), dtype=float), x.shape[:-1]) for e in exprs], -1)

        return InitialData.from_function(grid, phi)

    def with_grid(self, n_x: int, n_t: int) -> "ExperimentConfig":
        return replace(self, n_x=n_x, n_t=n_t)

    # --- canonical text -----------------------------------------------------

    def emit(self) -> str:
        def num(v: float) -> str:
            return repr(float(v))

        kin = "c" if self.kinetic == "quadratic" else "h"
        lines = ["[system]", f"m = {self.m}", f"kinetic = {self.kinetic}"]
        lines += [f"{kin}_{j + 1} = {s}" for j, s in enumerate(self.kinetic_exprs)]
        lines += [f"P_{j + 1} = {s}" for j, s in enumerate(self.coupling_exprs)]
        lines += [f"a = {num(self.a)}", f"A = {num(self.A)}", f"theta = {num(self.theta)}", ""]
        lines += ["[grid]", f"dim = {self.dim}", f"n_x = {self.n_x}", f"T = {num(self.T)}", f"n_t = {self.n_t}", ""]
        lines += ["[operator]", f"v_max = {'auto' if self.v_max is None else num(self.v_max)}",
                  f"quadrature = {self.quadrature}", f"subgrid = {'auto' if self.subgrid is None else self.subgrid}",
                  f"velocity_scale = {num(self.velocity_scale)}", f"tol = {num(self.tol)}",
                  f"max_iter = {self.max_iter}", ""]
        lines += ["[initial]"]
        if self.initial_csv is not None:
            lines.append(f"csv = {self.initial_csv}")
        else:
            lines += [f"phi_{j + 1} = {s}" for j, s in enumerate(self.initial_exprs)]
        lines += ["", "[run]", f"audit = {','.join(self.audit) if self.audit else 'none'}", f"seed = {self.seed}",
                  f"memory_cap_mb = {num(self.memory_cap_mb)}"]
        if self.out is not None:
            lines.append(f"out = {self.out}")
        if self.oracle is not None:
            lines.append(f"oracle = {self.oracle}")
        return "\n".join(lines) + "\n"


# --- parsing -----------------------------------------------------------------

_KEYS = {
    "system": {"m", "kinetic", "a", "A", "theta"},
    "grid": {"dim", "n_x", "T", "n_t"},
    "operator": {"v_max", "quadrature", "subgrid", "velocity_scale", "tol", "max_iter"},
    "initial": {"csv"},
    "run": {"audit", "out", "seed", "oracle", "memory_cap_mb"},
}
_INDEXED_SECTION = {"c": "system", "h": "system", "P": "system", "phi": "initial"}


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"]) from None
    return parse_config_text(text, base=path.parent, source=path)


def parse_config_text(text: str, base: str | Path = ".", source: Path | None = None) -> ExperimentConfig:
    """Parse and validate; every problem found is reported in one :class:`ConfigError`."""
    base = Path(base)
    errors: list[str] = []
    raw: dict[str, tuple[str, int]] = {}
    indexed: dict[tuple[str, int], tuple[str, int]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                errors.append(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = (s.strip() for s in stripped.split("=", 1))
        if section is None:
            errors.append(f"line {lineno}: key {key!r} outside any section")
            continue
        if section not in SECTIONS:
            continue
        m = _INDEXED.match(key)
        if m and _INDEXED_SECTION[m.group(1)] == section:
            slot = (m.group(1), int(m.group(2)))
            if slot in indexed:
                errors.append(f"line {lineno}: duplicate key {key!r}")
            indexed[slot] = (value, lineno)
        elif key in _KEYS[section]:
            if key in raw:
                errors.append(f"line {lineno}: duplicate key {key!r}")
            raw[key] = (value, lineno)
        else:
            errors.append(f"line {lineno}: unknown key {key!r} in [{section}]")

    def get(key, conv, default=None, required=False, allow_auto=False):
        if key not in raw:
            if required:
                errors.append(f"missing required key {key!r}")
            return default
        value, lineno = raw[key]
        if allow_auto and value == "auto":
            return None
        try:
            out = conv(value)
        except (TypeError, ValueError):
            errors.append(f"line {lineno}: {key} = {value!r} is not a valid {conv.__name__}")
            return default
        if isinstance(out, float) and not math.isfinite(out):
            errors.append(f"line {lineno}: {key} must be finite")
            return default
        return out

    m = get("m", int, required=True)
    kinetic = get("kinetic", str, "quadratic")
    if kinetic not in ("quadratic", "general"):
        errors.append(f"line {raw['kinetic'][1]}: kinetic must be 'quadratic' or 'general', got {kinetic!r}")
        kinetic = "quadratic"
    a = get("a", float, required=True)
    A = get("A", float, required=True)
    theta = get("theta", float, required=True)
    dim = get("dim", int, 1)
    n_x = get("n_x", int, required=True)
    T = get("T", float, required=True)
    n_t = get("n_t", int, required=True)
    v_max = get("v_max", float, None, allow_auto=True)
    quadrature = get("quadrature", str, "left_endpoint")
    subgrid = get("subgrid", int, None, allow_auto=True)
    velocity_scale = get("velocity_scale", float, 2.0)
    tol = get("tol", float, 1e-9)
    max_iter = get("max_iter", int, 100)
    seed = get("seed", int, 0)
    memory_cap = get("memory_cap_mb", float, 4096.0)
    out = get("out", str, None)

    if a is not None and A is not None and not 0 < a < 1 < A:
        errors.append(f"a = {a:g}, A = {A:g} violate assumption (A): 0<a<1<A")
    if theta is not None and not theta > 0:
        errors.append(f"theta = {theta:g} must be positive")
    if dim is not None and dim not in (1, 2):
        errors.append(f"dim = {dim} must be 1 or 2")
    if n_x is not None and n_x < 8:
        errors.append(f"n_x = {n_x} must be >= 8")
    if T is not None and not T > 0:
        errors.append(f"T = {T:g} must be positive")
    if n_t is not None and n_t < 1:
        errors.append(f"n_t = {n_t} must be >= 1")
    if v_max is not None and not v_max > 0:
        errors.append(f"v_max = {v_max:g} must be positive")
    if quadrature not in ("left_endpoint", "midpoint"):
        errors.append(f"quadrature must be left_endpoint or midpoint, got {quadrature!r}")
    if subgrid is not None and subgrid < 1:
        errors.append(f"subgrid = {subgrid} must be >= 1")
    for name, v in (("velocity_scale", velocity_scale), ("tol", tol), ("memory_cap_mb", memory_cap)):
        if v is not None and not v > 0:
            errors.append(f"{name} = {v:g} must be positive")
    if max_iter is not None and max_iter < 1:
        errors.append(f"max_iter = {max_iter} must be >= 1")

    audit: tuple[str, ...] = AUDITS
    if "audit" in raw:
        value, lineno = raw["audit"]
        audit = _parse_audit(value, errors, f"line {lineno}: ")

    def path_key(key):
        if key not in raw:
            return None
        value, lineno = raw[key]
        p = Path(value)
        p = p if p.is_absolute() else (base / p)
        p = p.resolve()
        if not p.exists():
            errors.append(f"line {lineno}: {key} path {str(p)!r} does not exist")
        return p

    oracle = path_key("oracle")
    initial_csv = path_key("csv")

    m_ok = isinstance(m, int) and m >= 1
    if m is not None and not m_ok:
        errors.append(f"m = {m} must be >= 1")
    coords = set(["x", "y"][: (dim if dim in (1, 2) else 1)])
    unknowns = {f"u_{j + 1}" for j in range(m if m_ok else 0)}
    momenta = {"p"} if dim != 2 else {"p_1", "p_2"}
    kin_key = "c" if kinetic == "quadratic" else "h"
    other = "h" if kin_key == "c" else "c"
    for (k, j), (_, lineno) in indexed.items():
        if k == other:
            errors.append(f"line {lineno}: key '{k}_{j}' does not match kinetic = {kinetic}")
        elif m_ok and not 1 <= j <= m:
            errors.append(f"line {lineno}: index {j} in '{k}_{j}' outside 1..{m}")

    def exprs(prefix: str, names: set[str], required: bool) -> tuple[str, ...] | None:
        if not m_ok:
            return None
        out = []
        for j in range(1, m + 1):
            if (prefix, j) not in indexed:
                if required:
                    errors.append(f"missing required key '{prefix}_{j}'")
                out.append(None)
                continue
            value, lineno = indexed[(prefix, j)]
            try:
                out.append(Expression(value, names).source)
            except ExpressionError as exc:
                errors.append(f"line {lineno}: {prefix}_{j}: {exc}")
                out.append(None)
        return tuple(out)

    kin_names = coords if kinetic == "quadratic" else coords | momenta
    kinetic_exprs = exprs(kin_key, kin_names, True)
    coupling_exprs = exprs("P", coords | unknowns, False)
    if coupling_exprs is not None:
        # an absent P_i means no coupling
        coupling_exprs = tuple("0" if s is None else s for s in coupling_exprs)
    has_phi = any(k == "phi" for k, _ in indexed)
    initial_exprs = None
    if initial_csv is not None and has_phi:
        errors.append("[initial]: give either csv or phi_i expressions, not both")
    elif initial_csv is None:
        initial_exprs = exprs("phi", coords, True)

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(
        m=m, kinetic=kinetic, kinetic_exprs=kinetic_exprs, coupling_exprs=coupling_exprs,
        a=a, A=A, theta=theta, dim=dim, n_x=n_x, T=T, n_t=n_t,
        initial_exprs=initial_exprs, initial_csv=initial_csv, v_max=v_max, quadrature=quadrature,
        subgrid=subgrid, velocity_scale=velocity_scale, tol=tol, max_iter=max_iter, audit=audit,
        out=out, seed=seed, oracle=oracle, memory_cap_mb=memory_cap, source=source,
    )


def _parse_audit(value: str, errors: list[str], where: str = "") -> tuple[str, ...]:
    items = [s.strip() for s in value.split(",") if s.strip()]
    if items == ["all"]:
        return AUDITS
    if items == ["none"]:
        return ()
    bad = [s for s in items if s not in AUDITS]
    if bad:
        errors.append(f"{where}unknown audit(s) {bad}; choose from all, none, {', '.join(AUDITS)}")
    return tuple(s for s in AUDITS if s in items)


def parse_audit_list(value: str) -> tuple[str, ...]:
    errors: list[str] = []
    out = _parse_audit(value, errors)
    if errors:
        raise ConfigError(errors)
    return out
