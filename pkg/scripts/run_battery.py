"""Run the bundled experiment configs and print their reports.

Usage: python scripts/run_battery.py [--out DIR] [--seed N]
"""

import argparse
from pathlib import Path

from nlfk.config import bundled_config_path, load_config
from nlfk.experiment import run_experiment

CONFIGS = ["heat.cfg", "gheat.cfg", "semilinear.cfg"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="nlfk-out/battery")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    status = 0
    for name in CONFIGS:
        cfg = load_config(bundled_config_path(name))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        rep = run_experiment(cfg, out=Path(args.out) / cfg.name)
        print(rep.render())
        status = max(status, rep.exit_code)
    return status


if __name__ == "__main__":
    raise SystemExit(main())
