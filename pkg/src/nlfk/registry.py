"""Named functions that configs can refer to by string.

Signatures by kind:

* ``terminal``: ``g(x) -> (...)`` with ``x`` of shape ``(..., N)``
* ``drift``: ``b(t, x) -> (..., N)``
* ``diffusion``: ``sigma(t, x) -> (..., N, M)``
* ``driver``: ``f(t, x, b, sigma, y, z) -> (...)``
"""

import numpy as np

from .errors import InputError

_REGISTRY = {"terminal": {}, "drift": {}, "diffusion": {}, "driver": {}}


def register(kind, name):
    if kind not in _REGISTRY:
        raise InputError(f"unknown function kind {kind!r}")

    def deco(fn):
        _REGISTRY[kind][name] = fn
        return fn

    return deco


def lookup(kind, name):
    try:
        return _REGISTRY[kind][name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY.get(kind, {})))
        raise InputError(f"no {kind} function named {name!r} (known: {known})") from None


def names(kind):
    return sorted(_REGISTRY[kind])


# -- terminal conditions ------------------------------------------------------


@register("terminal", "zero")
def _zero(x):
    return np.zeros(np.shape(x)[:-1])


@register("terminal", "square")
def _square(x):
    return np.sum(np.square(x), axis=-1)


@register("terminal", "neg_square")
def _neg_square(x):
    return -np.sum(np.square(x), axis=-1)


@register("terminal", "square_plus_one")
def _square_plus_one(x):
    return np.sum(np.square(x), axis=-1) + 1.0


@register("terminal", "first")
def _first(x):
    return np.asarray(x, dtype=float)[..., 0].copy()


@register("terminal", "sum")
def _sum(x):
    return np.sum(x, axis=-1)


@register("terminal", "cos")
def _cos(x):
    return np.sum(np.cos(x), axis=-1)


@register("terminal", "sin")
def _sin(x):
    return np.sum(np.sin(x), axis=-1)


@register("terminal", "abs")
def _abs(x):
    return np.sum(np.abs(x), axis=-1)


# -- coefficient fields -------------------------------------------------------


@register("drift", "mean_revert")
def _mean_revert(t, x):
    return -np.asarray(x, dtype=float)


@register("drift", "sin")
def _sin_drift(t, x):
    return np.sin(x)


@register("diffusion", "geometric_half")
def _geometric_half(t, x):
    x = np.asarray(x, dtype=float)
    return 0.5 * x[..., :, None] * np.ones(x.shape[-1])[None, :]


@register("diffusion", "bounded_cos")
def _bounded_cos(t, x):
    x = np.asarray(x, dtype=float)
    return (1.0 + 0.25 * np.cos(x))[..., :, None]


# -- drivers ------------------------------------------------------------------


@register("driver", "y_squared")
def _y_squared(t, x, b, sigma, y, z):
    return np.square(y)


@register("driver", "abs_z")
def _abs_z(t, x, b, sigma, y, z):
    return np.sqrt(np.sum(np.square(z), axis=-1))
