"""Backward solution of the BSDE along a simulated ensemble.

Conditional expectations are global least-squares fits on a polynomial basis
of the (standardised) state, one fit per time slice. ``Z`` comes from the
increment projection ``E[(Y_{k+1} - C_k) dW_k | X_k] / dt`` with ``C_k`` the
regressed continuation value.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import InputError, NumericError, SolverError


@dataclass(frozen=True)
class RegressionBasis:
    kind: str = "polynomial"
    degree: int = 3

    def __post_init__(self):
        if self.kind not in ("polynomial", "tensor"):
            raise InputError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise InputError("basis degree must be >= 0")

    def exponents(self, n, degree=None):
        d = self.degree if degree is None else degree
        exps = [e for e in product(range(d + 1), repeat=n) if self.kind == "tensor" or sum(e) <= d]
        return sorted(exps, key=lambda e: (sum(e), e[::-1]))

    def design(self, x, degree=None):
        """Design matrix on per-slice standardised states.

        Coordinates with (numerically) zero spread are dropped, so a slice of
        identical states reduces to the constant column.
        """
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        live = std > 1e-12 * (1.0 + np.abs(mean))
        u = (x[:, live] - mean[live]) / std[live]
        cols = [np.prod(u ** np.array(e), axis=1) for e in self.exponents(u.shape[1], degree)]
        return np.column_stack(cols)


def _fit(basis, x, targets, k):
    n = x.shape[0]
    degree = basis.degree
    # too few samples for the full basis: shrink the degree rather than fail
    while degree > 0 and len(basis.exponents(x.shape[1], degree)) > n:
        degree -= 1
    A = basis.design(x, degree)
    coef, _, rank, _ = np.linalg.lstsq(A, targets, rcond=None)
    if rank < A.shape[1]:
        raise SolverError(
            f"rank-deficient regression at step {k} ({rank} < {A.shape[1]} columns); "
            "try a lower basis degree"
        )
    return A @ coef


def conditional_expectation(basis, x, targets, k=0, groups=None):
    """Least-squares projection of ``targets`` (``(P,)`` or ``(P, q)``) onto the basis of ``x``.

    ``groups`` is an optional boolean mask; the two groups are fitted separately.
    """
    if groups is None or groups.all() or not groups.any():
        return _fit(basis, x, targets, k)
    out = np.empty_like(np.asarray(targets, dtype=float))
    for mask in (groups, ~groups):
        out[mask] = _fit(basis, x[mask], targets[mask], k)
    return out


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    grid: object
    Y: np.ndarray
    Z: np.ndarray
    Y0_estimate: float
    Y0_stderr: float

    @property
    def path_count(self):
        return self.Y.shape[0]


def controlled_driver(op, ensemble, driver=None):
    """``f(k, x, y, z)`` using the control recorded on each path at step ``k``.

    Vanishes from each path's stop step on when the ensemble was stopped.
    """
    drv = op.driver if driver is None else driver
    grid = ensemble.grid

    def f(k, x, y, z):
        t = grid.time(k)
        idx = ensemble.controls[:, k]
        bs, ss = op.coefficients(t, x)
        rows = np.arange(x.shape[0])
        val = drv(t, x, bs[idx, rows], ss[idx, rows], y, z)
        if ensemble.stop_step is not None:
            val = np.where(k < ensemble.stop_step, val, 0.0)
        return val

    return f


def solve_bsde_lsmc(ensemble, terminal, driver, basis=None, picard_iters=2):
    """Backward Euler with regression-based conditional expectations.

    ``driver(k, x, y, z)`` returns the driver on every path at step ``k``
    (see :func:`controlled_driver`). Each step sets the continuation
    ``C = E[Y_{k+1} | X_k]`` and then iterates ``y <- C + dt f(y, Z)``
    ``picard_iters`` times starting from ``y = C``.

    ``Y0_stderr`` is the sample standard error of ``xi + sum_k dt f_k``, whose
    mean equals ``Y0_estimate`` up to regression bias when the basis holds
    constants.
    """
    basis = basis or RegressionBasis()
    if picard_iters < 1:
        raise InputError("picard_iters must be >= 1")
    grid = ensemble.grid
    xi = np.asarray(terminal, dtype=float)
    P, K = ensemble.path_count, grid.steps
    if xi.shape != (P,):
        raise InputError(f"terminal values have shape {xi.shape}, expected ({P},)")
    if not np.all(np.isfinite(xi)):
        raise InputError("terminal values must be finite")
    M = ensemble.noise.dim_w
    dt = grid.dt
    Y = np.empty((P, K + 1))
    Z = np.zeros((P, K, M))
    Y[:, K] = xi
    acc = xi.copy()
    for k in range(K - 1, -1, -1):
        x = ensemble.states[:, k]
        dw = ensemble.increments(k)
        groups = None if ensemble.stop_step is None else k < ensemble.stop_step
        cont = conditional_expectation(basis, x, Y[:, k + 1], k, groups)
        # centring on the continuation leaves E[. | X_k] unchanged but cuts variance
        z = conditional_expectation(basis, x, (Y[:, k + 1] - cont)[:, None] * dw, k, groups) / dt
        y = cont
        for _ in range(picard_iters):
            fk = driver(k, x, y, z)
            y = cont + dt * fk
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite Y at step {k}")
        Y[:, k] = y
        Z[:, k] = z
        acc += dt * fk
    est = float(np.mean(Y[:, 0]))
    se = float(np.std(acc, ddof=1) / np.sqrt(P)) if P > 1 else float("nan")
    return BsdeSolution(grid, Y, Z, est, se)


def solve_bsde_zero_noise(y_T, driver, grid):
    """Explicit backward Euler for ``y' = -f(t, y)``: ``y_k = y_{k+1} + dt f(t_k, y_{k+1})``."""
    y = np.empty(grid.steps + 1)
    y[-1] = y_T
    dt = grid.dt
    for k in range(grid.steps - 1, -1, -1):
        y[k] = y[k + 1] + dt * driver(grid.time(k), y[k + 1])
        if not np.isfinite(y[k]):
            raise NumericError(f"non-finite value at step {k}")
    return y


@dataclass
class OrderCheck:
    ordered: bool
    margin: float
    witness: tuple | None = None


def _values(sol):
    return sol.Y if isinstance(sol, BsdeSolution) else np.asarray(sol, dtype=float)


def check_bsde_comparison(sol1, sol2, tol=0.0):
    """Is ``Y1 <= Y2 + tol`` on every path and step?

    ``margin`` is ``max(Y1 - Y2)``, negative when the solutions are strictly
    ordered. Accepts :class:`BsdeSolution` objects or raw ``Y`` arrays (e.g.
    zero-noise paths).
    """
    if isinstance(sol1, BsdeSolution) and isinstance(sol2, BsdeSolution) and sol1.grid != sol2.grid:
        raise InputError("solutions live on different grids")
    a, b = _values(sol1), _values(sol2)
    if a.shape != b.shape:
        raise InputError(f"solution shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    flat = int(np.argmax(diff))
    margin = float(diff.flat[flat])
    ok = margin <= tol
    return OrderCheck(ok, margin, None if ok else np.unravel_index(flat, diff.shape))


@dataclass
class StopCheck:
    ok: bool
    worst_y: float
    worst_z: float
    witness: tuple | None = None


def check_stopped_bsde(sol, stop_step, tol):
    """After each path's stop step, ``Y`` must stay at ``Y_tau`` and ``Z`` at zero."""
    P, K1 = sol.Y.shape
    stop_step = np.broadcast_to(np.asarray(stop_step, dtype=np.int64), (P,))
    steps = np.arange(K1)
    after = steps[None, :] >= stop_step[:, None]
    y_tau = sol.Y[np.arange(P), np.minimum(stop_step, K1 - 1)]
    dy = np.where(after, np.abs(sol.Y - y_tau[:, None]), 0.0)
    zn = np.linalg.norm(sol.Z, axis=-1)
    dz = np.where(after[:, :-1], zn, 0.0)
    wy, wz = float(dy.max()), float(dz.max(initial=0.0))
    ok = wy <= tol and wz <= tol
    witness = None
    if not ok:
        arr = dy if wy > tol else dz
        witness = np.unravel_index(int(np.argmax(arr)), arr.shape)
    return StopCheck(ok, wy, wz, witness)
