"""Experiment runner: solvers, named checks, reports and convergence tables."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .bsde import check_bsde_comparison, check_stopped_bsde, controlled_driver, solve_bsde_lsmc, solve_bsde_zero_noise
from .dpp import (
    AntitheticMC,
    GaussHermite,
    SolverConfig,
    SpaceGrid,
    dpp_two_stage,
    evaluate_policy_value,
    interior_policy_share,
    monotone_dt_threshold,
    regularity_constants,
    solve_value_dpp,
)
from .errors import InputError
from .fd import FdScheme, check_comparison_order, check_doubling_condition, check_monotonicity_in_r, solve_fd, viscosity_residuals
from .model import validate_assumptions
from .sde import NoiseStore, TimeGrid, coupled_strong_errors, fit_order, simulate_forward

ORACLE_REL, ORACLE_ABS = 0.02, 0.05
ORDER_TOL = 1e-10
BSDE_TOL = 5e-2
RESIDUAL_ROUNDOFF = 1e-8


@dataclass
class PointResult:
    solver: str
    t: float
    x: tuple
    value: float
    stderr: float
    oracle: float | None
    rel_gap: float | None


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float
    threshold: float
    detail: str = ""
    witness: object = None


@dataclass
class SolveReport:
    name: str
    seed: int
    points: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    orders: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def failed(self):
        return [c for c in self.checks if not c.passed]

    @property
    def exit_code(self):
        return 1 if self.failed else 0

    def value(self, solver, t=None, x=None):
        for p in self.points:
            if p.solver == solver and (t is None or p.t == t) and (x is None or tuple(x) == p.x):
                return p.value
        raise KeyError(solver)

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def render(self):
        lines = [f"experiment {self.name} (seed {self.seed})", "", "values"]
        for p in self.points:
            x = ", ".join(f"{v:g}" for v in p.x)
            s = f"  {p.solver:<10} u({p.t:g}, {x}) = {p.value:.6f}"
            if p.stderr:
                s += f" +/- {p.stderr:.2e}"
            if p.oracle is not None:
                s += f"   oracle {p.oracle:.6f}   rel gap {p.rel_gap:.2e}"
            lines.append(s)
        if self.checks:
            lines += ["", "checks"]
            for c in self.checks:
                flag = "PASS" if c.passed else "FAIL"
                lines.append(f"  [{flag}] {c.name}: observed {c.observed:.4g} vs threshold {c.threshold:.4g}  {c.detail}")
                if not c.passed and c.witness is not None:
                    lines.append(f"         witness {c.witness}")
        for tab in self.orders:
            lines += ["", tab.render()]
        if self.warnings:
            lines += ["", "warnings"] + [f"  {w}" for w in self.warnings]
        if self.timings:
            lines += ["", "wall clock"] + [f"  {k:<22} {v:8.2f} s" for k, v in self.timings.items()]
        lines += ["", "status: " + ("ok" if not self.failed else f"{len(self.failed)} check(s) failed")]
        return "\n".join(lines) + "\n"

    def write(self, out):
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_rows(
            out / "points.csv",
            ["solver", "t"] + [f"x_{i + 1}" for i in range(len(self.points[0].x))] + ["value", "stderr", "oracle", "rel_gap"]
            if self.points
            else ["solver"],
            ([p.solver, p.t, *p.x, p.value, p.stderr, p.oracle, p.rel_gap] for p in self.points),
        )
        io.write_rows(
            out / "checks.csv",
            ["check", "passed", "observed", "threshold", "witness"],
            ([c.name, int(c.passed), c.observed, c.threshold, "" if c.witness is None else repr(c.witness)] for c in self.checks),
        )
        (out / "report.txt").write_text(self.render())


@contextmanager
def _stage(report, name):
    t = time.perf_counter()
    try:
        yield
    except Exception as exc:
        exc.stage = name
        raise
    finally:
        report.timings[name] = report.timings.get(name, 0.0) + time.perf_counter() - t


class Experiment:
    """Lazily computed solves shared between checks."""

    def __init__(self, cfg, jobs=1):
        self.cfg = cfg
        self.op = cfg.problem
        self.jobs = max(1, int(jobs))
        self._cache = {}

    def _once(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def space(self, h, box=None):
        lo, hi = box or self.cfg.box
        n = self.op.dim_x
        return SpaceGrid(np.full(n, lo), np.full(n, hi), h)

    def rule(self):
        if self.cfg.dpp_rule == "monte_carlo":
            return AntitheticMC(self.cfg.mc_paths, self.cfg.seed)
        return GaussHermite(self.cfg.dpp_nodes)

    def dpp(self, level, op=None, key="g"):
        op = op or self.op
        return self._once(
            ("dpp", level, key),
            lambda: solve_value_dpp(op, TimeGrid(0.0, op.horizon, level.K), self.space(level.h), self.rule()),
        )

    def fd_scheme(self, h=None, out_steps="default"):
        h = h or self.cfg.fd_h or self.cfg.finest.h
        out = self.cfg.fd_out_steps if out_steps == "default" else out_steps
        return FdScheme.build(self.op, self.space(h, self.cfg.fd_box), dt=self.cfg.fd_dt, out_steps=out)

    def fd(self, h=None, op=None, key="g", out_steps="default"):
        op = op or self.op
        return self._once(("fd", h, key, out_steps), lambda: solve_fd(op, self.fd_scheme(h, out_steps)))

    def map(self, fn, items):
        if self.jobs == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.jobs) as pool:
            return list(pool.map(fn, items))


def _rel_gap(v, ref):
    return abs(v - ref) / max(abs(ref), 1e-12)


def _solver_points(exp, report):
    cfg = exp.cfg
    fd_vals = {}
    if "fd" in cfg.solvers:
        with _stage(report, "fd"):
            vf = exp.fd()
            for p in cfg.test_points:
                fd_vals[p] = vf.value(p.t, p.x)
    rows = []
    if "dpp" in cfg.solvers:
        with _stage(report, "dpp"):
            vf = exp.dpp(cfg.finest)
            report.warnings += vf.warnings
            for p in cfg.test_points:
                rows.append(("dpp", p, vf.value(p.t, p.x), vf.stderr(p.t, p.x)))
    for p in cfg.test_points:
        if p in fd_vals:
            rows.append(("fd", p, fd_vals[p], 0.0))
    if "policy_mc" in cfg.solvers:
        with _stage(report, "policy_mc"):
            vf = exp.dpp(cfg.finest)
            for i, p in enumerate(cfg.test_points):
                v, se = evaluate_policy_value(exp.op, vf, p.t, p.x, cfg.finest.P, cfg.seed + i)
                rows.append(("policy_mc", p, v, se))
    for solver, p, v, se in rows:
        oracle = p.expected
        if oracle is None and solver != "fd":
            oracle = fd_vals.get(p)
        gap = None if oracle is None else _rel_gap(v, oracle)
        report.points.append(PointResult(solver, p.t, p.x, float(v), float(se), oracle, gap))


# -- checks -------------------------------------------------------------------


def _check_value_tolerance(exp, report):
    worst, wit, thr = -math.inf, None, 0.0
    for r in report.points:
        pt = next(p for p in exp.cfg.test_points if p.t == r.t and p.x == r.x)
        if pt.expected is None:
            continue
        tol = (pt.tol if pt.tol is not None else 0.02) + 3 * r.stderr
        excess = abs(r.value - pt.expected) - tol
        if excess > worst:
            worst, wit, thr = excess, (r.solver, r.t, r.x, r.value, pt.expected), tol
    if wit is None:
        raise InputError("value_tolerance needs test points with an expected value")
    return CheckResult("value_tolerance", worst <= 0, worst + thr, thr, "worst |value - expected| vs its tolerance", wit)


def _check_oracle_agreement(exp, report):
    if not {"dpp", "fd"} <= set(exp.cfg.solvers):
        raise InputError("oracle_agreement needs both the dpp and fd solvers")
    worst, wit, thr = -math.inf, None, 0.0
    for p in exp.cfg.test_points:
        d = report.value("dpp", p.t, p.x)
        f = report.value("fd", p.t, p.x)
        tol = max(ORACLE_REL * abs(f), ORACLE_ABS)
        if abs(d - f) - tol > worst:
            worst, wit, thr = abs(d - f) - tol, (p.t, p.x, d, f), tol
    return CheckResult("oracle_agreement", worst <= 0, worst + thr, thr, "|dpp - fd| vs max(2% rel, 0.05)", wit)


def _check_assumptions(exp, report):
    rep = validate_assumptions(exp.op, seed=exp.cfg.seed)
    extra = [check_monotonicity_in_r(exp.op, seed=exp.cfg.seed), check_doubling_condition(exp.op, seed=exp.cfg.seed)]
    bad = rep.violations + [c for c in extra if not c.passed]
    total = len(rep.checks) + len(extra)
    wit = None if not bad else {c.name: (c.declared, c.observed, c.witness) for c in bad}
    return CheckResult("assumptions", not bad, len(bad), 0, f"{total - len(bad)}/{total} bounds hold", wit)


def _comparison(name, solve, exp):
    shifted = exp.op.with_terminal_shift(1.0)
    u, v = exp.map(lambda a: solve(*a), [(exp.op, "g"), (shifted, "g+1")])
    res = check_comparison_order(u, v, ORDER_TOL)
    return CheckResult(name, res.ordered, res.margin, ORDER_TOL, "max(u_g - u_{g+1})", res.witness)


def _check_fd_comparison(exp, report):
    return _comparison("fd_comparison", lambda op, key: exp.fd(op=op, key=key), exp)


def _check_dpp_comparison(exp, report):
    lvl = exp.cfg.finest
    dt = exp.op.horizon / lvl.K
    limit = monotone_dt_threshold(exp.op)
    if dt > limit:
        return CheckResult("dpp_comparison", False, dt, limit, "time step exceeds the monotone threshold")
    return _comparison("dpp_comparison", lambda op, key: exp.dpp(lvl, op, key), exp)


def _check_residuals(exp, report):
    h = exp.cfg.fd_h or exp.cfg.finest.h
    coarse = viscosity_residuals(exp.fd(2 * h, out_steps=None), exp.op)
    fine = viscosity_residuals(exp.fd(h, out_steps=None), exp.op)
    ratio = coarse.max_abs / max(fine.max_abs, 1e-300)
    # stencils exact for this solution: both residuals already sit at round-off
    exact = fine.max_abs <= RESIDUAL_ROUNDOFF
    ok = exact or ratio >= 1.5
    detail = f"max|r| {coarse.max_abs:.3e} at h={2 * h:g} -> {fine.max_abs:.3e} at h={h:g}"
    if exact:
        detail += " (round-off level)"
    return CheckResult("viscosity_residuals", ok, ratio, 1.5, detail, None if ok else fine.summary())


def _check_envelope(exp, report):
    cfg = exp.cfg
    lvl = cfg.finest
    vf = exp.dpp(lvl)
    worst, wit, best_gap = -math.inf, None, -math.inf
    for i, p in enumerate(cfg.test_points):
        u, se_u = vf.value(p.t, p.x), vf.stderr(p.t, p.x)

        def frozen(j):
            return evaluate_policy_value(exp.op, j, p.t, p.x, lvl.P, cfg.seed + 1000 * (i + 1) + j, grid=vf.grid)

        vals = exp.map(frozen, range(exp.op.n_controls))
        tols = [3 * math.hypot(se, se_u) + 0.05 for _, se in vals]
        for j, ((v, se), tol) in enumerate(zip(vals, tols)):
            if v - u - tol > worst:
                worst, wit = v - u - tol, (p.t, p.x, j, v, u)
        # the best frozen control should come within tolerance from below
        j = int(np.argmax([v for v, _ in vals]))
        best_gap = max(best_gap, u - vals[j][0] - tols[j])
    ok = worst <= 0 and best_gap <= 0
    return CheckResult("envelope_dominance", ok, max(worst, best_gap), 0.0,
                       "max excess of frozen value over dpp, and shortfall of the best frozen control", wit)


def _check_consistency(exp, report):
    cfg = exp.cfg
    lvl = cfg.finest
    T = exp.op.horizon
    config = SolverConfig(exp.space(lvl.h), T / lvl.K, exp.rule())
    worst, wit, thr = -math.inf, None, 0.0
    for p in cfg.test_points:
        if p.t >= T / 2:
            continue
        res = dpp_two_stage(exp.op, p.t, p.x, T / 2, config)
        tol = max(0.02, 3 * res.combined_stderr)
        if res.gap - tol > worst:
            worst, wit, thr = res.gap - tol, (p.t, p.x, res.direct, res.two_stage), tol
    if wit is None:
        raise InputError("dpp_consistency needs a test point with t < T/2")
    return CheckResult("dpp_consistency", worst <= 0, worst + thr, thr, "|direct - two_stage|", wit)


def _check_bsde(exp, report):
    cfg = exp.cfg
    op = exp.op
    lvl = cfg.finest
    p = cfg.test_points[0]
    grid = TimeGrid(p.t, op.horizon, max(1, round(lvl.K * (op.horizon - p.t) / op.horizon)))
    noise = NoiseStore.generate(cfg.seed, lvl.P, grid.steps, op.dim_w, grid.dt)
    x0 = np.asarray(p.x)
    ens = simulate_forward(0, op, grid, x0, noise)
    xi = op.terminal(ens.terminal())
    f = controlled_driver(op, ens)
    lo = solve_bsde_lsmc(ens, xi, f)
    hi = solve_bsde_lsmc(ens, xi + 1.0, f)
    cmp = check_bsde_comparison(lo, hi, BSDE_TOL)
    # zero noise: y' = -f(t, x0, y), compared from y_T and y_T + 1
    b0, s0 = op.controls[0].b(p.t, x0[None])[0], op.controls[0].sigma(p.t, x0[None])[0]
    zf = lambda t, y: float(op.driver(t, x0, b0, s0, y, np.zeros(op.dim_w)))  # noqa: E731
    g0 = float(op.terminal(x0[None])[0])
    zlo = solve_bsde_zero_noise(g0, zf, grid)
    zhi = solve_bsde_zero_noise(g0 + 1.0, zf, grid)
    zcmp = check_bsde_comparison(zlo, zhi, ORDER_TOL)
    strict = bool(np.all(zlo < zhi))
    # stopped version: paths freeze on leaving the unit box around the start point
    stopped = simulate_forward(0, op, grid, x0, noise, exit_box=(x0 - 1.0, x0 + 1.0))
    ssol = solve_bsde_lsmc(stopped, op.terminal(stopped.terminal()), controlled_driver(op, stopped))
    stop = check_stopped_bsde(ssol, stopped.stop_step, BSDE_TOL)
    ok = cmp.ordered and zcmp.ordered and strict and stop.ok
    worst = max(cmp.margin, zcmp.margin, stop.worst_y, stop.worst_z)
    detail = (f"lsmc margin {cmp.margin:.3g}, zero-noise margin {zcmp.margin:.3g}, "
              f"stopped drift {max(stop.worst_y, stop.worst_z):.3g}")
    wit = None if ok else {"lsmc": cmp.witness, "zero_noise": zcmp.witness, "stopped": stop.witness}
    return CheckResult("bsde_comparison", ok, worst, BSDE_TOL, detail, wit)


def _check_regularity(exp, report):
    cfg = exp.cfg
    if len(cfg.levels) < 2:
        raise InputError("regularity needs at least two refinement levels")
    a = regularity_constants(exp.dpp(cfg.levels[-2]), cfg.radius)
    b = regularity_constants(exp.dpp(cfg.levels[-1]), cfg.radius)
    changes = {}
    for k in ("holder_t", "lipschitz_x", "growth"):
        ca, cb = getattr(a, k), getattr(b, k)
        changes[k] = abs(cb - ca) / max(abs(cb), 1e-12)
    worst = max(changes.values())
    return CheckResult("regularity", worst < 0.2, worst, 0.2,
                       ", ".join(f"{k} {getattr(b, k):.3g}" for k in changes), changes)


def _check_argmax(exp, report):
    vf = exp.dpp(exp.cfg.finest)
    nodes = np.zeros((1, exp.op.dim_x))
    _, ss = exp.op.coefficients(0.0, nodes)
    j = int(np.argmax(np.einsum("jnik,jnik->j", ss, ss)))
    margin = exp.cfg.margin if exp.cfg.margin is not None else 0.3 * (exp.cfg.box[1] - exp.cfg.box[0])
    share = interior_policy_share(vf, j, margin)
    return CheckResult("policy_argmax", share >= 0.99, share, 0.99, f"share of interior nodes choosing control {j}")


CHECK_FUNCS = {
    "value_tolerance": _check_value_tolerance,
    "oracle_agreement": _check_oracle_agreement,
    "assumptions": _check_assumptions,
    "fd_comparison": _check_fd_comparison,
    "dpp_comparison": _check_dpp_comparison,
    "viscosity_residuals": _check_residuals,
    "envelope_dominance": _check_envelope,
    "dpp_consistency": _check_consistency,
    "bsde_comparison": _check_bsde,
    "regularity": _check_regularity,
    "policy_argmax": _check_argmax,
}


def run_experiment(cfg, jobs=1, out=None):
    """Run solvers and checks; write CSVs and the text report when ``out`` is given."""
    exp = Experiment(cfg, jobs)
    report = SolveReport(cfg.name, cfg.seed)
    _solver_points(exp, report)
    for name in cfg.checks:
        with _stage(report, f"check:{name}"):
            report.checks.append(CHECK_FUNCS[name](exp, report))
    if out is not None:
        report.write(out)
        if "dpp" in cfg.solvers:
            io.write_value_field(Path(out) / "dpp_value.csv", exp.dpp(cfg.finest))
        if "fd" in cfg.solvers:
            io.write_value_field(Path(out) / "fd_value.csv", exp.fd())
    return report


# -- convergence tables -------------------------------------------------------


@dataclass
class ConvergenceTable:
    kind: str
    step_label: str
    levels: list
    steps: list
    values: list
    errors: list
    order: float
    reference: float | None

    def render(self):
        lines = [f"convergence table: {self.kind}"]
        ref = "n/a" if self.reference is None else f"{self.reference:.8g}"
        lines.append(f"  reference {ref}")
        lines.append(f"  {'level':>8} {self.step_label:>12} {'value':>14} {'error':>12}")
        for lv, s, v, e in zip(self.levels, self.steps, self.values, self.errors):
            vs = "" if v is None else f"{v:.8f}"
            es = "" if e is None else f"{e:.3e}"
            lines.append(f"  {lv!s:>8} {s:12.6g} {vs:>14} {es:>12}")
        lines.append(f"  fitted order {self.order:.3f}")
        return "\n".join(lines)

    def write(self, path):
        io.write_rows(
            path,
            ["level", self.step_label, "value", "error", "order"],
            ([lv, s, v, e, self.order] for lv, s, v, e in zip(self.levels, self.steps, self.values, self.errors)),
        )


def _against_reference(values, expected):
    if expected is not None:
        errs = [abs(v - expected) for v in values]
        return errs, expected, list(range(len(values)))
    ref = values[-1]
    errs = [abs(v - ref) for v in values[:-1]] + [None]
    return errs, ref, list(range(len(values) - 1))


def convergence_table(cfg, jobs=1):
    """Refinement study for ``cfg.table``; the order is a least-squares fit of log error on log step."""
    tab = cfg.table
    if tab is None:
        raise InputError("config has no [table] section")
    exp = Experiment(cfg, jobs)
    op = cfg.problem
    p = cfg.test_points[0]
    x0 = np.asarray(p.x)
    levels = list(tab.levels)
    if tab.kind == "fd_space":
        steps = [float(h) for h in levels]
        values = exp.map(lambda h: solve_fd(op, FdScheme.build(op, exp.space(h, cfg.fd_box), out_steps=None)).value(p.t, p.x), steps)
        errs, ref, fit = _against_reference(values, p.expected)
        label = "h"
    elif tab.kind == "dpp_time":
        h = tab.h or cfg.finest.h
        steps = [op.horizon / int(k) for k in levels]
        values = exp.map(
            lambda k: solve_value_dpp(op, TimeGrid(0.0, op.horizon, int(k)), exp.space(h), exp.rule()).value(p.t, p.x), levels
        )
        errs, ref, fit = _against_reference(values, p.expected)
        label = "dt"
    elif tab.kind == "sde_strong":
        ks = [int(k) for k in levels]
        if any(b != 2 * a for a, b in zip(ks, ks[1:])):
            raise InputError("sde_strong levels must double")
        dts, e = coupled_strong_errors(op, tab.control, x0, ks[0], len(ks), tab.paths, cfg.seed, p.t)
        steps, values, errs, ref, fit = list(dts), [None] * len(ks), list(e), None, list(range(len(ks)))
        label = "dt"
    else:
        c = op.controls[tab.control]
        b0, s0 = c.b(p.t, x0[None])[0], c.sigma(p.t, x0[None])[0]
        zw = np.zeros(op.dim_w)

        def f(t, y):
            return float(op.driver(t, x0, b0, s0, y, zw))

        g0 = float(op.terminal(x0[None])[0])
        steps = [(op.horizon - p.t) / int(k) for k in levels]
        values = [float(solve_bsde_zero_noise(g0, f, TimeGrid(p.t, op.horizon, int(k)))[0]) for k in levels]
        errs, ref, fit = _against_reference(values, p.expected)
        label = "dt"
    order = fit_order([steps[i] for i in fit], [errs[i] for i in fit])
    return ConvergenceTable(tab.kind, label, levels, steps, values, errs, order, ref)
