"""Print every bundled convergence table (fd space, Euler strong order, zero-noise Euler)
plus a dpp time-refinement table on the G-heat problem with g = cos.

With g = x^2 the dpp recursion is exact in time, so the time table uses cos,
whose value has no closed form; the reference is a fine fd solve.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from nlfk import battery
from nlfk.config import TableSpec, bundled_config_path, load_config
from nlfk.dpp import SpaceGrid
from nlfk.experiment import convergence_table
from nlfk.fd import FdScheme, solve_fd

TABLES = ["fd_space.cfg", "sde_strong.cfg", "bsde_zero_noise.cfg"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="nlfk-out/tables")
    args = ap.parse_args()
    out = Path(args.out)
    for name in TABLES:
        tab = convergence_table(load_config(bundled_config_path(name)))
        tab.write(out / name.replace(".cfg", ".csv"))
        print(tab.render(), end="\n\n")
    op = battery.volatility_family([1.0, 2.0], "cos")
    ref = solve_fd(op, FdScheme.build(op, SpaceGrid(-8.0, 8.0, 0.02), out_steps=1)).value(0.0, [0.0])
    cfg = load_config(bundled_config_path("gheat.cfg"))
    point = replace(cfg.test_points[0], expected=ref)
    cfg = replace(cfg, problem=op, box=(-8.0, 8.0), test_points=(point,),
                  table=TableSpec("dpp_time", (10, 20, 40, 80), h=0.01))
    tab = convergence_table(cfg)
    tab.write(out / "dpp_time.csv")
    print(tab.render())


if __name__ == "__main__":
    main()
