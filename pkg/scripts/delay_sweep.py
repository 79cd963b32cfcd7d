#!/usr/bin/env python3
"""Train the chunkwise model at several alignment delays and tabulate test TER.

    python scripts/delay_sweep.py --config configs/desk.ini --delays 0 1 2 4 --out runs/delay
"""

import argparse
import logging
import sys

from chunkaligner.alignment import CapacityError
from chunkaligner.config import load_run_config
from chunkaligner.experiments import delay_sweep


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--delays", type=int, nargs="+", default=[0, 1, 2, 4])
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="runs/delay_sweep")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_run_config(args.config).with_overrides(arch="chunkwise", steps=args.steps)
    try:
        report = delay_sweep(cfg, args.delays, out_dir=args.out, log=print)
    except CapacityError as e:
        print(f"error: {e}; set repair_spill = true in [train] to spill late labels forward", file=sys.stderr)
        return 2
    print(report.to_table(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
