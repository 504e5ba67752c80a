"""Problem datum and the sup-envelope operator.

An :class:`OperatorSpec` bundles a finite family of coefficient pairs
``(b, sigma)``, a driver ``f`` and a terminal condition ``g``. The operator is

    F(t, x, y, p, S) = max_j  1/2 <sigma_j sigma_j^T, S> + p.b_j + f(t, x, b_j, sigma_j, y, p^T sigma_j)

All evaluation routines are vectorised over leading batch axes: ``x`` has
shape ``(..., N)``, ``S`` has shape ``(..., N, N)`` and so on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import registry
from .errors import InputError, NumericError

FORMS = ("constant", "affine", "named")


def _as_float_array(value, name):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """One coefficient field, either the drift or the diffusion.

    ``constant``: ``value`` is the vector (drift) or matrix (diffusion).
    ``affine``: ``matrix @ x + value``; for a diffusion ``matrix`` has shape
    ``(N, M, N)`` and acts per entry.
    ``named``: ``name`` is looked up in the registry.
    """

    form: str
    value: np.ndarray | None = None
    matrix: np.ndarray | None = None
    name: str | None = None
    kind: str = "drift"

    def __post_init__(self):
        if self.form not in FORMS:
            raise InputError(f"unsupported {self.kind} form {self.form!r}; expected one of {FORMS}")
        if self.form == "named":
            if not self.name:
                raise InputError(f"named {self.kind} needs a name")
            registry.lookup(self.kind, self.name)
            return
        if self.value is None:
            raise InputError(f"{self.form} {self.kind} needs a value")
        object.__setattr__(self, "value", _as_float_array(self.value, f"{self.kind} value"))
        if self.form == "affine":
            if self.matrix is None:
                raise InputError(f"affine {self.kind} needs a matrix")
            object.__setattr__(self, "matrix", _as_float_array(self.matrix, f"{self.kind} matrix"))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        if self.form == "constant":
            return np.broadcast_to(self.value, batch + self.value.shape)
        if self.form == "affine":
            if self.kind == "drift":
                return x @ self.matrix.T + self.value
            return np.einsum("ijl,...l->...ij", self.matrix, x) + self.value
        return np.asarray(registry.lookup(self.kind, self.name)(t, x), dtype=float)

    def affine_lipschitz(self):
        """Exact Lipschitz constant (Euclidean / Frobenius) for constant and affine forms."""
        if self.form == "constant":
            return 0.0
        if self.form == "affine":
            n_in = self.matrix.shape[-1]
            return float(np.linalg.norm(self.matrix.reshape(-1, n_in), 2))
        return None


def constant(value, kind="drift"):
    return FieldSpec("constant", value=value, kind=kind)


def affine(matrix, offset, kind="drift"):
    return FieldSpec("affine", value=offset, matrix=matrix, kind=kind)


def named(name, kind="drift"):
    return FieldSpec("named", name=name, kind=kind)


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """One admissible pair ``(b, sigma)`` with its declared Lipschitz bound."""

    drift: FieldSpec
    diffusion: FieldSpec
    lipschitz_bound: float = 0.0

    def __post_init__(self):
        if self.drift.kind != "drift" or self.diffusion.kind != "diffusion":
            raise InputError("drift/diffusion field kinds are swapped")
        if self.lipschitz_bound < 0:
            raise InputError("lipschitz_bound must be nonnegative")

    def b(self, t, x):
        return self.drift(t, x)

    def sigma(self, t, x):
        return self.diffusion(t, x)


def control(drift, diffusion, lipschitz_bound=None):
    """Build a :class:`CoefficientField` from plain constants or FieldSpecs.

    Numbers and arrays become constant fields. When ``lipschitz_bound`` is
    omitted it is computed exactly for constant and affine forms.
    """
    if not isinstance(drift, FieldSpec):
        drift = constant(np.atleast_1d(np.asarray(drift, dtype=float)), "drift")
    if not isinstance(diffusion, FieldSpec):
        diffusion = constant(np.atleast_2d(np.asarray(diffusion, dtype=float)), "diffusion")
    if lipschitz_bound is None:
        parts = [drift.affine_lipschitz(), diffusion.affine_lipschitz()]
        if any(p is None for p in parts):
            raise InputError("lipschitz_bound must be declared for named fields")
        lipschitz_bound = max(parts)
    return CoefficientField(drift, diffusion, float(lipschitz_bound))


DRIVER_FORMS = ("zero", "constant", "linear_in_y", "linear_in_z", "linear", "named")


@dataclass(frozen=True, eq=False)
class DriverSpec:
    """Driver ``f(t, x, b, sigma, y, z)``.

    The affine forms evaluate ``const + rate * y + lambda_z . z``; ``zero``,
    ``constant``, ``linear_in_y`` and ``linear_in_z`` just restrict which of
    those parameters may be nonzero.
    """

    form: str = "zero"
    rate: float = 0.0
    lambda_z: np.ndarray | None = None
    const: float = 0.0
    name: str | None = None
    lipschitz_z: float | None = None
    monotonicity_mu: float | None = None

    def __post_init__(self):
        if self.form not in DRIVER_FORMS:
            raise InputError(f"unsupported driver form {self.form!r}; expected one of {DRIVER_FORMS}")
        lz = None if self.lambda_z is None else _as_float_array(np.atleast_1d(self.lambda_z), "lambda_z")
        object.__setattr__(self, "lambda_z", lz)
        if self.form == "named":
            if not self.name:
                raise InputError("named driver needs a name")
            registry.lookup("driver", self.name)
            if self.lipschitz_z is None or self.monotonicity_mu is None:
                raise InputError("named driver must declare lipschitz_z and monotonicity_mu")
            return
        if self.form == "zero" and (self.rate or self.const or lz is not None):
            raise InputError("zero driver takes no parameters")
        if self.form == "linear_in_y" and (self.const or lz is not None):
            raise InputError("linear_in_y driver takes only a rate")
        if self.form == "linear_in_z" and (self.rate or self.const):
            raise InputError("linear_in_z driver takes only lambda_z")
        if self.form == "constant" and (self.rate or lz is not None):
            raise InputError("constant driver takes only const")
        # affine drivers have exact constants
        if self.lipschitz_z is None:
            object.__setattr__(self, "lipschitz_z", 0.0 if lz is None else float(np.linalg.norm(lz)))
        if self.monotonicity_mu is None:
            object.__setattr__(self, "monotonicity_mu", float(self.rate))

    @property
    def y_independent(self):
        return self.form in ("zero", "constant", "linear_in_z") or (
            self.form == "linear" and self.rate == 0.0
        )

    def __call__(self, t, x, b, sigma, y, z):
        if self.form == "named":
            return np.asarray(registry.lookup("driver", self.name)(t, x, b, sigma, y, z), dtype=float)
        y = np.asarray(y, dtype=float)
        out = self.const + self.rate * y
        if self.lambda_z is not None:
            out = out + np.asarray(z, dtype=float) @ self.lambda_z
        return out


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    name: str
    lipschitz_bound: float = 0.0
    growth_bound: float = 0.0
    shift: float = 0.0

    def __post_init__(self):
        registry.lookup("terminal", self.name)

    def __call__(self, x):
        out = np.asarray(registry.lookup("terminal", self.name)(np.asarray(x, dtype=float)), dtype=float)
        return out + self.shift if self.shift else out


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    controls: tuple
    driver: DriverSpec
    terminal: TerminalSpec
    horizon: float
    dim_x: int = 1
    dim_w: int = 1
    ellipticity_lambda: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        if not self.controls:
            raise InputError("control family must be nonempty")
        if not self.horizon > 0:
            raise InputError("horizon must be positive")
        if self.dim_x < 1 or self.dim_w < 1:
            raise InputError("dimensions must be >= 1")
        if self.ellipticity_lambda < 0:
            raise InputError("ellipticity_lambda must be nonnegative")
        x = np.zeros((1, self.dim_x))
        for j, c in enumerate(self.controls):
            b = np.asarray(c.b(0.0, x))
            s = np.asarray(c.sigma(0.0, x))
            if b.shape != (1, self.dim_x) or s.shape != (1, self.dim_x, self.dim_w):
                raise InputError(
                    f"control {j} has shapes b{b.shape[1:]}, sigma{s.shape[1:]}; "
                    f"expected ({self.dim_x},), ({self.dim_x}, {self.dim_w})"
                )

    @property
    def n_controls(self):
        return len(self.controls)

    def replace(self, **changes):
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return OperatorSpec(**kw)

    def with_terminal_shift(self, c):
        t = self.terminal
        return self.replace(terminal=TerminalSpec(t.name, t.lipschitz_bound, t.growth_bound + abs(c), t.shift + c))

    def coefficients(self, t, x):
        """Stacked ``b`` of shape ``(J, ..., N)`` and ``sigma`` of shape ``(J, ..., N, M)``."""
        x = np.asarray(x, dtype=float)
        bs = np.stack([np.broadcast_to(c.b(t, x), x.shape) for c in self.controls])
        ss = np.stack(
            [np.broadcast_to(c.sigma(t, x), x.shape + (self.dim_w,)) for c in self.controls]
        )
        return bs, ss


def _check_args(n, x, p, S):
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    S = np.asarray(S, dtype=float)
    if x.shape[-1:] != (n,) or p.shape[-1:] != (n,) or S.shape[-2:] != (n, n):
        raise InputError(f"dimension mismatch: x{x.shape}, p{p.shape}, S{S.shape} for N={n}")
    if not np.allclose(S, np.swapaxes(S, -1, -2), rtol=0, atol=1e-12 * (1 + np.abs(S).max())):
        raise InputError("S must be symmetric")
    return x, p, S


def _generator(b, sigma, driver, t, x, y, p, S, p_drift=None):
    a = np.einsum("...ik,...jk->...ij", sigma, sigma)
    second = 0.5 * np.sum(a * S, axis=(-2, -1))
    pd = p if p_drift is None else p_drift
    first = np.sum(pd * b, axis=-1)
    z = np.einsum("...i,...ij->...j", p, sigma)
    return second + first + driver(t, x, b, sigma, y, z)


def eval_generator(ctrl, driver, t, x, y, p, S):
    """Semilinear generator of a single control at one or many points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x, p, S = _check_args(x.shape[-1], x, np.atleast_1d(p), np.atleast_2d(S))
    b, sigma = ctrl.b(t, x), ctrl.sigma(t, x)
    if b.shape[-1] != x.shape[-1] or sigma.shape[-2] != x.shape[-1]:
        raise InputError(f"control acts on N={b.shape[-1]} but x has N={x.shape[-1]}")
    val = _generator(b, sigma, driver, t, x, y, p, S)
    if not np.all(np.isfinite(val)):
        raise NumericError(f"non-finite generator value at t={t}")
    return float(val) if np.ndim(val) == 0 else val


def generator_values(op, t, x, y, p, S, p_drift=None):
    """All control generators, stacked on a trailing axis of length J.

    ``p_drift`` optionally replaces ``p`` in the first-order term only, with
    one gradient per control (shape ``(J, ..., N)``); the finite-difference
    oracle uses it for upwinding.
    """
    x, p, S = _check_args(op.dim_x, x, p, S)
    bs, ss = op.coefficients(t, x)
    vals = np.stack(
        [
            _generator(bs[j], ss[j], op.driver, t, x, y, p, S, None if p_drift is None else p_drift[j])
            for j in range(op.n_controls)
        ],
        axis=-1,
    )
    if not np.all(np.isfinite(vals)):
        raise NumericError(f"non-finite generator value at t={t}")
    return vals


def eval_F(op, t, x, y, p, S):
    """Sup-envelope value and the smallest maximising control index."""
    vals = generator_values(op, t, np.atleast_1d(x), y, np.atleast_1d(p), np.atleast_2d(S))
    idx = np.argmax(vals, axis=-1)
    value = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]
    if value.ndim == 0:
        return float(value), int(idx)
    return value, idx


# -- assumption validation ----------------------------------------------------


@dataclass
class BoundCheck:
    name: str
    declared: float | None
    observed: float
    passed: bool
    witness: dict | None = None
    certified: bool = True


@dataclass
class AssumptionReport:
    checks: list

    @property
    def violations(self):
        return [c for c in self.checks if not c.passed]

    @property
    def ok(self):
        return not self.violations

    def by_name(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _within(observed, declared):
    return observed <= declared + 1e-9 * (1 + abs(declared))


def _worst(name, declared, ratios, witness_fn):
    i = int(np.argmax(ratios))
    obs = float(ratios[i])
    ok = declared is None or _within(obs, declared)
    return BoundCheck(name, declared, obs, ok, None if ok and declared is not None else witness_fn(i))


def min_diffusion_eigenvalue(op, sample_count=256, seed=0, box=3.0):
    """Smallest eigenvalue of sigma sigma^T over a seeded sweep of ``[0,T] x [-box, box]^N``."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, op.horizon, size=sample_count)
    x = rng.uniform(-box, box, size=(sample_count, op.dim_x))
    lo = np.inf
    for c in op.controls:
        s = np.stack([c.sigma(ti, xi[None])[0] for ti, xi in zip(t, x)])
        a = np.einsum("pik,pjk->pij", s, s)
        lo = min(lo, float(np.linalg.eigvalsh(a).min()))
    return lo


def validate_assumptions(op, sample_count=1000, seed=0, box=3.0):
    """Seeded falsification of the structural bounds declared on ``op``.

    Draws ``sample_count`` tuples ``(t, x, x', y, y', z, z')`` with spatial
    and value coordinates uniform in ``[-box, box]`` and reports, for every
    declared constant, the worst observed ratio together with a witness when
    the declaration is violated. The equicontinuity modulus is recorded as a
    sampled quantity only (``certified=False``).
    """
    if sample_count < 1:
        raise InputError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    n, m = op.dim_x, op.dim_w
    t = rng.uniform(0.0, op.horizon, size=sample_count)
    x = rng.uniform(-box, box, size=(sample_count, n))
    x2 = rng.uniform(-box, box, size=(sample_count, n))
    y = rng.uniform(-box, box, size=sample_count)
    y2 = rng.uniform(-box, box, size=sample_count)
    z = rng.uniform(-box, box, size=(sample_count, m))
    z2 = rng.uniform(-box, box, size=(sample_count, m))
    dx = np.linalg.norm(x - x2, axis=-1)
    dx = np.where(dx > 0, dx, np.inf)

    def per_time(fn, xs):
        # registered fields may not broadcast over t, so evaluate per sample
        return np.stack([fn(ti, xi[None])[0] for ti, xi in zip(t, xs)])

    checks = []
    bound_sup = np.zeros(sample_count)
    modulus = 0.0
    for j, c in enumerate(op.controls):
        b1, b2 = per_time(c.b, x), per_time(c.b, x2)
        s1, s2 = per_time(c.sigma, x), per_time(c.sigma, x2)
        for label, d in (("drift", b1 - b2), ("diffusion", (s1 - s2).reshape(sample_count, -1))):
            ratios = np.linalg.norm(d, axis=-1) / dx
            checks.append(
                _worst(
                    f"control[{j}].{label}_lipschitz",
                    c.lipschitz_bound,
                    ratios,
                    lambda i: {"t": float(t[i]), "x": x[i].tolist(), "x_prime": x2[i].tolist()},
                )
            )
        bound_sup = np.maximum(bound_sup, np.linalg.norm(b1, axis=-1) + np.linalg.norm(s1.reshape(sample_count, -1), axis=-1))
        xe = x + 1e-6 * rng.standard_normal(x.shape)
        be, se = per_time(c.b, xe), per_time(c.sigma, xe)
        modulus = max(
            modulus,
            float(np.max(np.linalg.norm(be - b1, axis=-1) + np.linalg.norm((se - s1).reshape(sample_count, -1), axis=-1))),
        )
        a = np.einsum("pik,pjk->pij", s1, s1)
        eig = np.linalg.eigvalsh(a).min(axis=-1)
        i = int(np.argmin(eig))
        ok = bool(op.ellipticity_lambda <= eig[i] + 1e-12)
        checks.append(
            BoundCheck(
                f"control[{j}].ellipticity",
                op.ellipticity_lambda,
                float(eig[i]),
                ok,
                None if ok else {"t": float(t[i]), "x": x[i].tolist()},
            )
        )
    checks.append(BoundCheck("equiboundedness", None, float(bound_sup.max()), bool(np.isfinite(bound_sup).all())))
    checks.append(BoundCheck("equicontinuity_modulus_1e-6", None, modulus, True, certified=False))

    drv = op.driver
    c0 = op.controls[0]
    b, s = per_time(c0.b, x), per_time(c0.sigma, x)
    dz = np.linalg.norm(z - z2, axis=-1)
    dz = np.where(dz > 0, dz, np.inf)
    fz = np.abs(drv(t, x, b, s, y, z) - drv(t, x, b, s, y, z2)) / dz
    checks.append(
        _worst("driver.lipschitz_z", drv.lipschitz_z, fz, lambda i: {"z": z[i].tolist(), "z_prime": z2[i].tolist(), "y": float(y[i])})
    )
    dy = np.where(y != y2, y - y2, np.nan)
    mono = dy * (drv(t, x, b, s, y, z) - drv(t, x, b, s, y2, z)) / dy**2
    mono = np.nan_to_num(mono, nan=-np.inf)
    checks.append(
        _worst("driver.monotonicity", drv.monotonicity_mu, mono, lambda i: {"y": float(y[i]), "y_prime": float(y2[i]), "t": float(t[i])})
    )

    g = op.terminal
    gl = np.abs(g(x) - g(x2)) / dx
    checks.append(_worst("terminal.lipschitz", g.lipschitz_bound, gl, lambda i: {"x": x[i].tolist(), "x_prime": x2[i].tolist()}))
    gg = np.abs(g(x)) / (1 + np.linalg.norm(x, axis=-1))
    checks.append(_worst("terminal.growth", g.growth_bound, gg, lambda i: {"x": x[i].tolist()}))
    return AssumptionReport(checks)
