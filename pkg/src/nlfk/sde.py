"""Euler-Maruyama simulation of the controlled forward SDE.

Brownian increments live in a :class:`NoiseStore` addressed by
``(seed, path, step)``: paths are grouped in blocks of ``BLOCK`` and each block
draws from its own Philox stream keyed on ``(seed, block)``, step-major, so
the increment for a given step never depends on how many steps or paths were
requested. That is what makes restarts and coupled refinements reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, SimulationError

BLOCK = 256
_U64 = 2**64


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise InputError("a time grid needs at least one step")
        if not self.T > self.t0:
            raise InputError(f"grid end {self.T} must exceed start {self.t0}")

    @property
    def dt(self):
        return (self.T - self.t0) / self.steps

    @property
    def nodes(self):
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def time(self, k):
        return self.t0 + k * self.dt

    def tail(self, k):
        """Grid for ``[t_k, T]`` with the same spacing."""
        return TimeGrid(self.time(k), self.T, self.steps - k)

    def index_of(self, t, atol=1e-9):
        k = int(round((t - self.t0) / self.dt))
        if not 0 <= k <= self.steps or abs(self.time(k) - t) > atol:
            raise InputError(f"time {t} is not a node of {self}")
        return k


def _block_normals(seed, block, steps, dim_w):
    key = (int(seed) % _U64) + (int(block) << 64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal((steps, BLOCK, dim_w))


@dataclass(frozen=True, eq=False)
class NoiseStore:
    """Brownian increments ``dW[p, k]`` with covariance ``dt * I``.

    ``factor > 1`` marks a store coarsened from a finer one by summing
    ``factor`` consecutive increments.
    """

    seed: int
    dt: float
    increments: np.ndarray
    factor: int = 1

    @classmethod
    def generate(cls, seed, path_count, steps, dim_w=1, dt=1.0):
        if path_count < 1:
            raise InputError("path_count must be >= 1")
        n_blocks = -(-path_count // BLOCK)
        z = np.concatenate([_block_normals(seed, b, steps, dim_w) for b in range(n_blocks)], axis=1)
        inc = np.sqrt(dt) * np.ascontiguousarray(z[:, :path_count].transpose(1, 0, 2))
        inc.setflags(write=False)
        return cls(int(seed), float(dt), inc)

    @property
    def path_count(self):
        return self.increments.shape[0]

    @property
    def steps(self):
        return self.increments.shape[1]

    @property
    def dim_w(self):
        return self.increments.shape[2]

    def regenerate(self, p, k):
        """Recompute ``dW[p, k]`` from the counter scheme alone."""
        fine_dt = self.dt / self.factor
        block, lane = divmod(int(p), BLOCK)
        steps = (k + 1) * self.factor
        z = _block_normals(self.seed, block, steps, self.dim_w)[k * self.factor : steps, lane]
        return np.sqrt(fine_dt) * z.sum(axis=0) if self.factor > 1 else np.sqrt(fine_dt) * z[0]

    def coarsen(self, factor):
        if factor < 1 or self.steps % factor:
            raise InputError(f"cannot coarsen {self.steps} steps by {factor}")
        if factor == 1:
            return self
        inc = self.increments.reshape(self.path_count, -1, factor, self.dim_w).sum(axis=2)
        inc.setflags(write=False)
        return NoiseStore(self.seed, self.dt * factor, inc, self.factor * factor)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Forward paths ``states[p, k]`` on ``grid``.

    ``controls[p, k]`` is the control index used on step ``k -> k+1``.
    ``stop_step[p]`` is the first node at which the path had left the exit
    box (``grid.steps`` when it never left); the state is frozen from there on.
    """

    grid: TimeGrid
    states: np.ndarray
    noise: NoiseStore
    controls: np.ndarray
    stop_step: np.ndarray | None = None
    noise_offset: int = 0

    @property
    def path_count(self):
        return self.states.shape[0]

    def increments(self, k):
        """Increments driving step ``k``; zero for paths already stopped."""
        dw = self.noise.increments[:, self.noise_offset + k]
        if self.stop_step is None:
            return dw
        return np.where((k < self.stop_step)[:, None], dw, 0.0)

    def terminal(self):
        return self.states[:, -1]


def constant_policy(j):
    def choose(k, x):
        return j

    return choose


def _select(op, t, x, idx):
    """Coefficients for each path given per-path control indices."""
    if np.ndim(idx) == 0:
        c = op.controls[int(idx)]
        return (
            np.broadcast_to(c.b(t, x), x.shape),
            np.broadcast_to(c.sigma(t, x), x.shape + (op.dim_w,)),
        )
    idx = np.asarray(idx)
    if idx.min() < 0 or idx.max() >= op.n_controls:
        raise InputError("policy returned an out-of-range control index")
    bs, ss = op.coefficients(t, x)
    rows = np.arange(x.shape[0])
    return bs[idx, rows], ss[idx, rows]


def _euler(op, policy, grid, states, controls, noise, first, offset, stop_step, box):
    dt = grid.dt
    for k in range(first, grid.steps):
        x = states[:, k]
        idx = policy(k, x)
        controls[:, k] = idx
        b, s = _select(op, grid.time(k), x, idx)
        dw = noise.increments[:, offset + k]
        nxt = x + np.einsum("pij,pj->pi", s, dw) + b * dt
        if stop_step is not None:
            frozen = stop_step <= k
            nxt = np.where(frozen[:, None], x, nxt)
            out = ~frozen & np.any((nxt < box[0]) | (nxt > box[1]), axis=-1)
            stop_step[out] = k + 1
        bad = ~np.isfinite(nxt).all(axis=-1)
        if bad.any():
            raise SimulationError(int(np.argmax(bad)), k + 1)
        states[:, k + 1] = nxt


def _check_noise(grid, noise, offset=0):
    if noise.steps < offset + grid.steps:
        raise InputError(f"noise store has {noise.steps} steps, grid needs {offset + grid.steps}")
    if not np.isclose(noise.dt, grid.dt, rtol=1e-12, atol=0):
        raise InputError(f"noise dt {noise.dt} does not match grid dt {grid.dt}")


def _as_policy(ctrl_policy):
    if callable(ctrl_policy):
        return ctrl_policy
    return constant_policy(int(ctrl_policy))


def simulate_forward(ctrl_policy, op, grid, x0, noise, exit_box=None, noise_offset=0):
    """Euler-Maruyama paths under a feedback policy ``(k, x) -> control index``.

    ``ctrl_policy`` may also be a plain control index. ``x0`` is a single
    point or one point per path. With ``exit_box=(lower, upper)`` each path
    is frozen at the first node where it lies outside the box.
    """
    _check_noise(grid, noise, noise_offset)
    if noise.dim_w != op.dim_w:
        raise InputError(f"noise has M={noise.dim_w}, operator has M={op.dim_w}")
    policy = _as_policy(ctrl_policy)
    P = noise.path_count
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = x0[None]
    if not np.all(np.isfinite(x0)):
        raise InputError("initial condition must be finite")
    states = np.empty((P, grid.steps + 1, op.dim_x))
    states[:, 0] = np.broadcast_to(x0, (P, op.dim_x))
    controls = np.zeros((P, grid.steps), dtype=np.int64)
    stop_step = box = None
    if exit_box is not None:
        box = tuple(np.broadcast_to(np.asarray(v, dtype=float), (op.dim_x,)) for v in exit_box)
        stop_step = np.full(P, grid.steps, dtype=np.int64)
        outside = np.any((states[:, 0] < box[0]) | (states[:, 0] > box[1]), axis=-1)
        stop_step[outside] = 0
    _euler(op, policy, grid, states, controls, noise, 0, noise_offset, stop_step, box)
    return PathEnsemble(grid, states, noise, controls, stop_step, noise_offset)


def restart_flow(ensemble, restart_step, op, ctrl_policy, noise=None):
    """Resimulate from ``X_r`` with the same increments; the tail must match exactly."""
    grid = ensemble.grid
    if not 0 <= restart_step <= grid.steps:
        raise InputError(f"restart step {restart_step} outside [0, {grid.steps}]")
    if noise is not None and noise is not ensemble.noise:
        if noise.seed != ensemble.noise.seed or noise.increments.shape != ensemble.noise.increments.shape:
            raise InputError("restart noise store does not match the ensemble's")
    if ensemble.stop_step is not None:
        raise InputError("restart of stopped ensembles is not supported")
    states = ensemble.states.copy()
    controls = ensemble.controls.copy()
    _euler(op, _as_policy(ctrl_policy), grid, states, controls, ensemble.noise, restart_step,
           ensemble.noise_offset, None, None)
    return replace(ensemble, states=states, controls=controls)


REF_FACTOR = 16


def coupled_strong_errors(op, ctrl_policy, x0, K_coarse, levels, path_count, seed, t0=0.0):
    """Mean terminal error of levels ``K_coarse * 2**l`` (``l < levels``) against
    a reference grid ``REF_FACTOR`` times finer than the finest level, all
    driven by the same Brownian paths (fine increments summed per coarse step)."""
    if levels < 2:
        raise InputError("need at least two refinement levels")
    K_ref = K_coarse * 2 ** (levels - 1) * REF_FACTOR
    ref_grid = TimeGrid(t0, op.horizon, K_ref)
    fine = NoiseStore.generate(seed, path_count, K_ref, op.dim_w, ref_grid.dt)
    ref = simulate_forward(ctrl_policy, op, ref_grid, x0, fine).terminal()
    dts, errs = [], []
    for lvl in range(levels):
        K = K_coarse * 2**lvl
        grid = TimeGrid(t0, op.horizon, K)
        xt = simulate_forward(ctrl_policy, op, grid, x0, fine.coarsen(K_ref // K)).terminal()
        dts.append(grid.dt)
        errs.append(float(np.mean(np.linalg.norm(xt - ref, axis=-1))))
    return np.array(dts), np.array(errs)


def fit_order(steps, errors):
    """Least-squares slope of ``log(error)`` against ``log(step)``.

    Returns ``inf`` when every error is at round-off level (the scheme is
    exact on this problem), so that order thresholds are met trivially.
    """
    steps = np.asarray(steps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if np.all(errors <= 1e-13):
        return float("inf")
    keep = errors > 0
    if keep.sum() < 2:
        raise InputError("need two nonzero errors to fit an order")
    return float(np.polyfit(np.log(steps[keep]), np.log(errors[keep]), 1)[0])


def estimate_strong_order(op, ctrl_policy, x0, K_coarse, levels, path_count, seed):
    dts, errs = coupled_strong_errors(op, ctrl_policy, x0, K_coarse, levels, path_count, seed)
    return fit_order(dts, errs)


def initial_data_stability(op, ctrl_policy, x0, x0_prime, grid, noise):
    """Empirical ``c`` in ``E sup_k |X_k - X'_k|^2 <= c |x0 - x0'|^2`` on shared noise."""
    a = simulate_forward(ctrl_policy, op, grid, x0, noise).states
    b = simulate_forward(ctrl_policy, op, grid, x0_prime, noise).states
    d0 = np.sum(np.square(np.asarray(x0, dtype=float) - np.asarray(x0_prime, dtype=float)))
    if d0 == 0:
        raise InputError("initial points must differ")
    sup = np.max(np.sum(np.square(a - b), axis=-1), axis=1)
    return float(np.mean(sup) / d0)
