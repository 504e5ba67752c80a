"""The standard one-dimensional test problems with closed-form values at the origin.

* ``heat``: one control ``(0, 1)``, ``g = x^2``; ``u = x^2 + (T - t)``.
* ``gheat``: volatilities ``{1, 2}``, ``g = x^2``; ``u = x^2 + 4 (T - t)``.
* ``concave``: volatilities ``{1, 2}``, ``g = -x^2``; ``u = -x^2 - (T - t)``.
* ``discounting``: one control, ``f = -0.1 y``, ``g = x``; ``u = x exp(-0.1 (T - t))``.

Declared Lipschitz and growth constants for ``x^2`` hold on ``[-3, 3]``,
the default sampling box of :func:`nlfk.model.validate_assumptions`.
"""

from __future__ import annotations

import math

from .model import DriverSpec, OperatorSpec, TerminalSpec, control


def volatility_family(sigmas, terminal, driver=None, T=1.0, lipschitz=6.0, growth=3.0):
    ctrls = [control(0.0, s) for s in sigmas]
    lam = min(sigmas) ** 2
    return OperatorSpec(ctrls, driver or DriverSpec(), TerminalSpec(terminal, lipschitz, growth), T, 1, 1, lam)


def heat(T=1.0):
    return volatility_family([1.0], "square", T=T)


def gheat(T=1.0):
    return volatility_family([1.0, 2.0], "square", T=T)


def concave(T=1.0):
    return volatility_family([1.0, 2.0], "neg_square", T=T)


def discounting(rate=0.1, T=1.0):
    return volatility_family([1.0], "first", DriverSpec("linear_in_y", rate=-rate), T, 1.0, 1.0)


# (name, operator, x0, exact u(0, x0))
def standard():
    return [
        ("heat", heat(), 0.0, 1.0),
        ("gheat", gheat(), 0.0, 4.0),
        ("discounting", discounting(), 1.0, math.exp(-0.1)),
    ]
