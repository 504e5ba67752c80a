"""CSV export of ensembles, BSDE solutions, value fields and residuals.

Floats are written with ``repr`` so that files round-trip exactly and two
runs with the same seed produce byte-identical output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_rows(path):
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


def write_ensemble(path, ens):
    P, K1, N = ens.states.shape
    header = ["path", "step", "time"] + [f"x_{i + 1}" for i in range(N)] + ["control_index"]
    times = ens.grid.nodes

    def rows():
        for p in range(P):
            for k in range(K1):
                ctrl = ens.controls[p, k] if k < K1 - 1 else None
                yield [p, k, times[k], *ens.states[p, k], ctrl]

    return write_rows(path, header, rows())


def write_bsde(path, sol):
    P, K1 = sol.Y.shape
    M = sol.Z.shape[-1]
    header = ["path", "step", "Y"] + [f"Z_{i + 1}" for i in range(M)]

    def rows():
        for p in range(P):
            for k in range(K1):
                z = sol.Z[p, k] if k < K1 - 1 else [None] * M
                yield [p, k, sol.Y[p, k], *z]

    return write_rows(path, header, rows())


def write_value_field(path, vf, column="value", values=None, with_policy=True):
    """One row per (step, node); ``argmax`` is blank at the terminal step or
    when the field has no policy."""
    values = vf.values if values is None else values
    nodes = vf.space.nodes()
    N = nodes.shape[1]
    header = ["step", "time"] + [f"x_{i + 1}" for i in range(N)] + [column, "argmax"]
    times = vf.grid.nodes
    pol = vf.policy.indices if with_policy and vf.policy is not None else None

    def rows():
        for k in range(values.shape[0]):
            for j in range(nodes.shape[0]):
                arg = pol[k, j] if pol is not None and k < pol.shape[0] else None
                v = values[k, j]
                yield [k, times[k], *nodes[j], None if np.isnan(v) else v, arg]

    return write_rows(path, header, rows())


def write_residuals(path, vf, report):
    """Residual field in the value-field layout; boundary nodes are blank."""
    return write_value_field(path, vf, "residual", report.field, with_policy=False)
