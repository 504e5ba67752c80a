"""TOML experiment configs.

A config names the problem, the solvers to run, a list of refinement levels
``(K, h, P)``, test points and property checks. Errors carry the dotted
field path (or the line for syntax errors).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .model import DriverSpec, FieldSpec, OperatorSpec, TerminalSpec, control

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SOLVERS = ("dpp", "fd", "policy_mc")

CHECKS = {
    "value_tolerance": "every solver matches the expected value at each test point within its tolerance",
    "oracle_agreement": "dpp and fd agree within 2% relative or 0.05 absolute",
    "assumptions": "declared Lipschitz, ellipticity, growth and structural bounds hold on samples",
    "fd_comparison": "fd outputs for g and g + 1 are nodewise ordered",
    "dpp_comparison": "dpp outputs for g and g + 1 are nodewise ordered",
    "viscosity_residuals": "fd residuals shrink by a factor >= 1.5 when h is halved",
    "envelope_dominance": "every frozen control's value stays below the dpp value",
    "dpp_consistency": "direct and two-stage dpp values agree at t = T/2",
    "bsde_comparison": "lsmc solutions for g and g + 1 are ordered and zero-noise comparison is exact",
    "regularity": "Hoelder, Lipschitz and growth constants stabilise between the two finest levels",
    "policy_argmax": "the dpp policy picks the max-volatility control on >= 99% of interior nodes",
}

TABLE_KINDS = ("fd_space", "dpp_time", "sde_strong", "bsde_zero_noise")


@dataclass(frozen=True)
class Level:
    K: int
    h: float
    P: int


@dataclass(frozen=True)
class TestPoint:
    t: float
    x: tuple
    expected: float | None = None
    tol: float | None = None


@dataclass(frozen=True)
class TableSpec:
    kind: str
    levels: tuple
    paths: int = 20000
    control: int = 0
    h: float | None = None


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    name: str
    problem: OperatorSpec
    solvers: tuple
    levels: tuple
    test_points: tuple
    checks: tuple = ()
    seed: int = 0
    output: str = "nlfk-out"
    box: tuple = (-10.0, 10.0)
    radius: float = 3.0
    margin: float | None = None
    fd_box: tuple | None = None
    fd_h: float | None = None
    fd_dt: float | None = None
    fd_out_steps: int | None = 20
    dpp_rule: str = "gauss_hermite"
    dpp_nodes: int = 8
    mc_paths: int = 4096
    table: TableSpec | None = None
    source: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def finest(self):
        return self.levels[-1]

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def with_output(self, output):
        return replace(self, output=str(output))


class _Section:
    """Dict wrapper that records the dotted path and rejects unknown keys."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise ConfigError("expected a table", where=path or "<root>")
        self.data = data
        self.path = path
        self.used = set()

    def where(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, default=None, kind=None, required=False):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise ConfigError("missing required field", where=self.where(key))
            return default
        v = self.data[key]
        if kind is not None:
            try:
                v = _coerce(v, kind)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"expected {kind}, got {v!r}", where=self.where(key)) from exc
        return v

    def sub(self, key, required=False):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise ConfigError("missing required section", where=self.where(key))
            return None
        return _Section(self.data[key], self.where(key))

    def items(self, key):
        self.used.add(key)
        v = self.data.get(key, [])
        if not isinstance(v, list):
            raise ConfigError("expected an array of tables", where=self.where(key))
        return [_Section(d, f"{self.where(key)}[{i}]") for i, d in enumerate(v)]

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(f"unknown field(s) {extra}", where=self.path or "<root>")


def _coerce(v, kind):
    if kind == "float":
        if isinstance(v, bool):
            raise TypeError
        return float(v)
    if kind == "int":
        if isinstance(v, bool) or not float(v).is_integer():
            raise ValueError
        return int(v)
    if kind == "str":
        if not isinstance(v, str):
            raise TypeError
        return v
    if kind == "list":
        if not isinstance(v, list):
            raise TypeError
        return v
    raise AssertionError(kind)


def _field_spec(raw, kind, where, n, m):
    if isinstance(raw, dict):
        sec = _Section(raw, where)
        form = sec.get("form", "constant", "str")
        try:
            spec = FieldSpec(
                form,
                value=sec.get("value") if form != "affine" else sec.get("offset"),
                matrix=sec.get("matrix"),
                name=sec.get("name"),
                kind=kind,
            )
        except InputError as exc:
            raise ConfigError(str(exc), where=where) from exc
        sec.finish()
        return spec
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read {kind} {raw!r}", where=where) from exc
    shape = (n,) if kind == "drift" else (n, m)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr)) if kind == "drift" else float(arr) * np.eye(n, m)
    if arr.shape != shape:
        raise ConfigError(f"{kind} has shape {arr.shape}, expected {shape}", where=where)
    return FieldSpec("constant", value=arr, kind=kind)


def parse_problem(sec):
    T = sec.get("horizon", required=True, kind="float")
    n = sec.get("dim_x", 1, "int")
    m = sec.get("dim_w", n, "int")
    lam = sec.get("ellipticity", 0.0, "float")
    term = sec.sub("terminal", required=True)
    try:
        terminal = TerminalSpec(
            term.get("name", required=True, kind="str"),
            term.get("lipschitz", 0.0, "float"),
            term.get("growth", 0.0, "float"),
            term.get("shift", 0.0, "float"),
        )
    except InputError as exc:
        raise ConfigError(str(exc), where=term.where("name")) from exc
    term.finish()
    drv = sec.sub("driver")
    if drv is None:
        driver = DriverSpec()
    else:
        lz = drv.get("lambda_z")
        try:
            driver = DriverSpec(
                drv.get("form", "zero", "str"),
                rate=drv.get("rate", 0.0, "float"),
                lambda_z=None if lz is None else np.atleast_1d(np.asarray(lz, dtype=float)),
                const=drv.get("const", 0.0, "float"),
                name=drv.get("name"),
                lipschitz_z=drv.get("lipschitz_z", None, "float"),
                monotonicity_mu=drv.get("mu", None, "float"),
            )
        except InputError as exc:
            raise ConfigError(str(exc), where=drv.path) from exc
        drv.finish()
    controls = []
    for c in sec.items("controls"):
        b = _field_spec(c.get("drift", 0.0), "drift", c.where("drift"), n, m)
        s = _field_spec(c.get("diffusion", required=True), "diffusion", c.where("diffusion"), n, m)
        try:
            controls.append(control(b, s, c.get("lipschitz", None, "float")))
        except InputError as exc:
            raise ConfigError(str(exc), where=c.path) from exc
        c.finish()
    if not controls:
        raise ConfigError("at least one control is required", where=sec.where("controls"))
    sec.finish()
    try:
        return OperatorSpec(controls, driver, terminal, T, n, m, lam)
    except InputError as exc:
        raise ConfigError(str(exc), where=sec.path) from exc


def _box(sec, key, default):
    v = sec.get(key, default)
    if v is None:
        return None
    if not (isinstance(v, list) and len(v) == 2) or not float(v[0]) < float(v[1]):
        raise ConfigError("expected [lower, upper] with lower < upper", where=sec.where(key))
    return float(v[0]), float(v[1])


def parse_config(text, source=None):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc), where=source) from exc
    root = _Section(raw, "")
    name = root.get("name", Path(source).stem if source else "experiment", "str")
    seed = root.get("seed", 0, "int")
    output = root.get("output", "nlfk-out", "str")
    problem = parse_problem(root.sub("problem", required=True))

    solvers = tuple(root.get("solvers", required=True, kind="list"))
    if not solvers:
        raise ConfigError("at least one solver is required", where="solvers")
    for s in solvers:
        if s not in SOLVERS:
            raise ConfigError(f"unknown solver {s!r}; expected a subset of {SOLVERS}", where="solvers")
    if "policy_mc" in solvers and "dpp" not in solvers:
        raise ConfigError("policy_mc evaluates the dpp policy and needs the dpp solver", where="solvers")
    checks = tuple(root.get("checks", [], "list"))
    for c in checks:
        if c not in CHECKS:
            raise ConfigError(f"unknown check {c!r}; see --list-checks", where="checks")
    if len(set(checks)) != len(checks):
        raise ConfigError("checks must not repeat", where="checks")

    levels = []
    for g in root.items("grids"):
        levels.append(Level(g.get("K", required=True, kind="int"), g.get("h", required=True, kind="float"),
                            g.get("P", 1000, "int")))
        g.finish()
    if not levels:
        raise ConfigError("at least one refinement level is required", where="grids")
    for a, b in zip(levels, levels[1:]):
        if not (b.K > a.K and b.h < a.h and b.P >= a.P):
            raise ConfigError("levels must be strictly refined (K up, h down, P not down)", where="grids")

    points = []
    for p in root.items("test_points"):
        x = p.get("x", required=True)
        x = tuple(float(v) for v in np.atleast_1d(x))
        if len(x) != problem.dim_x:
            raise ConfigError(f"x has {len(x)} coordinates, problem has N={problem.dim_x}", where=p.where("x"))
        points.append(TestPoint(p.get("t", 0.0, "float"), x, p.get("expected", None, "float"), p.get("tol", None, "float")))
        p.finish()
    if not points:
        raise ConfigError("at least one test point is required", where="test_points")

    kw = {}
    sp = root.sub("space")
    if sp is not None:
        kw["box"] = _box(sp, "box", [-10.0, 10.0])
        kw["radius"] = sp.get("radius", 3.0, "float")
        kw["margin"] = sp.get("margin", None, "float")
        sp.finish()
    fd = root.sub("fd")
    if fd is not None:
        kw["fd_box"] = _box(fd, "box", None)
        kw["fd_h"] = fd.get("h", None, "float")
        kw["fd_dt"] = fd.get("dt", None, "float")
        kw["fd_out_steps"] = fd.get("out_steps", 20, "int")
        fd.finish()
    dp = root.sub("dpp")
    if dp is not None:
        kw["dpp_rule"] = dp.get("rule", "gauss_hermite", "str")
        if kw["dpp_rule"] not in ("gauss_hermite", "monte_carlo"):
            raise ConfigError("rule must be gauss_hermite or monte_carlo", where=dp.where("rule"))
        kw["dpp_nodes"] = dp.get("nodes", 8, "int")
        kw["mc_paths"] = dp.get("mc_paths", 4096, "int")
        dp.finish()
    tb = root.sub("table")
    if tb is not None:
        kind = tb.get("kind", required=True, kind="str")
        if kind not in TABLE_KINDS:
            raise ConfigError(f"unknown table kind {kind!r}; expected one of {TABLE_KINDS}", where=tb.where("kind"))
        lv = tuple(tb.get("levels", required=True, kind="list"))
        if len(lv) < 3:
            raise ConfigError("a convergence table needs at least 3 levels", where=tb.where("levels"))
        kw["table"] = TableSpec(kind, lv, tb.get("paths", 20000, "int"), tb.get("control", 0, "int"), tb.get("h", None, "float"))
        tb.finish()
    root.finish()
    return ExperimentConfig(name, problem, solvers, tuple(levels), tuple(points), checks, seed, output,
                            source=source, **kw)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", where=str(path)) from exc
    return parse_config(text, str(path))


def bundled_config_path(name):
    """Path of a config shipped with the package (``heat.cfg``, ``gheat.cfg``, ...)."""
    return Path(__file__).parent / "configs" / name


def bundled_configs():
    return sorted(p.name for p in (Path(__file__).parent / "configs").glob("*.cfg"))
