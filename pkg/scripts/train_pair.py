#!/usr/bin/env python3
"""Train chunkwise and transducer models on one dataset, then benchmark their decoders.

    python scripts/train_pair.py --config configs/desk.ini --out runs/pair
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from chunkaligner.config import dump_run_config, load_run_config
from chunkaligner.evaluation import BenchReport, bench_entry
from chunkaligner.experiments import run_experiment
from chunkaligner.synthdata import generate_dataset


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--archs", nargs="+", default=["chunkwise", "transducer"])
    ap.add_argument("--out", default="runs/pair")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    base = load_run_config(args.config)
    out = Path(args.out)
    dataset = generate_dataset(base.task, sizes=base.dataset_sizes)
    entries, summary = [], {}
    for arch in args.archs:
        cfg = base.with_overrides(arch=arch)
        run_dir = out / arch
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(dump_run_config(cfg))
        start = time.process_time()
        outcome, _ = run_experiment(cfg, dataset, name=arch, out_dir=run_dir)
        cpu = time.process_time() - start
        summary[arch] = {"test_ter": outcome.test_ter, "best_dev_ter": outcome.best_dev_ter, "cpu_seconds": cpu}
        entries.append(bench_entry(arch, outcome.test))
        print(f"{arch}: test TER {outcome.test_ter:.4f}, {cpu / 60:.1f} CPU-min")
    bench = BenchReport(len(dataset["test"]), entries)
    (out / "bench.json").write_text(bench.to_json() + "\n")
    (out / "bench.txt").write_text(bench.to_table())
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(bench.to_table(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
