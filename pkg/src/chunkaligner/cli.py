"""Command-line entry point: ``generate``, ``train``, ``eval``, ``bench``, ``inspect-attention``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .alignment import CapacityError
from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .evaluation import (
    BenchReport,
    DecodeSettings,
    bench_entry,
    build_metrics,
    decode_corpus,
    export_attention,
    read_loss_curve,
    summarize_attention,
)
from .model import ARCHITECTURES, Model
from .synthdata import generate_dataset, load_dataset, save_dataset
from .train import DivergenceError, train

logger = logging.getLogger("chunkaligner")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT = "model.npz"
RUN_CONFIG = "config.ini"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--chunk-size", type=int, help="chunk length L_c in encoder frames")
    p.add_argument("--tau", type=float, help="EOC threshold")
    p.add_argument("--beam", type=int, help="beam size (1 = greedy)")
    p.add_argument("--delay-frames", type=int, help="alignment delay in encoder frames")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chunkaligner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--sizes", type=int, nargs=3, metavar=("TRAIN", "DEV", "TEST"))

    p = sub.add_parser("train", help="train one architecture")
    _common(p)
    p.add_argument("--data", help="dataset directory (default: [paths] data)")
    p.add_argument("--steps", type=int)

    for name, helptext in (("eval", "decode a split and write metrics"), ("bench", "paired decode benchmark")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data")
        p.add_argument("--split", default="test", choices=("train", "dev", "test"))
        p.add_argument("--max-utterances", type=int)
        p.add_argument("--jobs", type=int, default=1, help="decode worker processes (results stay ordered)")
        if name == "eval":
            p.add_argument("--checkpoint", help=f"checkpoint file (default: OUT/{CHECKPOINT})")
        else:
            p.add_argument("--checkpoint", action="append", required=True, help="repeat for each model")

    p = sub.add_parser("inspect-attention", help="export encoder attention matrices")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--utt", help="utterance id (default: first of the split)")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, action="append", help="head index; repeat for several (default: all)")
    return parser


# ---------------------------------------------------------------- helpers


def _overrides(args) -> dict:
    return {
        "arch": args.arch,
        "seed": args.seed,
        "chunk_size": args.chunk_size,
        "tau": args.tau,
        "beam": args.beam,
        "delay_frames": args.delay_frames,
        "out": args.out,
    }


def _run_config(args, fallback: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    cfg = load_run_config(path)
    return cfg.with_overrides(**_overrides(args))


def _load_split(data_dir: str, split: str, limit: int | None):
    try:
        _, splits = load_dataset(data_dir)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    if split not in splits:
        raise DataError(f"split {split!r} missing from {data_dir}")
    utts = splits[split]
    return utts[:limit] if limit else utts


def _load_model(path: str | Path) -> Model:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        return Model.load(path)
    except (ValueError, KeyError, OSError) as e:
        raise DataError(f"cannot load {path}: {e}") from e


def _settings(cfg: RunConfig) -> DecodeSettings:
    return DecodeSettings(cfg.train.chunk_len, cfg.decode.beam_size, cfg.decode.tau, cfg.decode.max_symbols)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = _run_config(args)
    sizes = tuple(args.sizes) if args.sizes else cfg.dataset_sizes
    out = Path(args.out or cfg.paths.data)
    ds = generate_dataset(cfg.task, sizes=sizes)
    save_dataset(out, cfg.task, ds)
    print(json.dumps({"out": str(out), **{k: len(v) for k, v in ds.items()}}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.steps is not None:
        cfg = cfg.with_overrides(steps=args.steps)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = args.data or cfg.paths.data
    try:
        task_cfg, splits = load_dataset(data_dir)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    if task_cfg.model_vocab_size != cfg.model.vocab_size or task_cfg.feature_dim != cfg.model.feature_dim:
        raise DataError("dataset vocabulary/feature size does not match the model config")
    (out / RUN_CONFIG).write_text(dump_run_config(cfg))
    model = Model(cfg.model)
    result = train(model, splits["train"], splits.get("dev", []), cfg.train, log_path=out / "train_log.jsonl")
    model.save(out / CHECKPOINT)
    summary = {
        "architecture": cfg.train.architecture,
        "best_dev_ter": result.best_dev_ter,
        "final_loss": result.final_loss,
        "steps": result.steps,
        "seconds": result.seconds,
    }
    _write_json(out / "train_summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def _evaluate(checkpoint: Path, args):
    model = _load_model(checkpoint)
    cfg = _run_config(args, checkpoint.parent / RUN_CONFIG)
    if args.arch and args.arch != model.config.architecture:
        raise DataError(f"--arch {args.arch} does not match checkpoint architecture {model.config.architecture}")
    utts = _load_split(args.data or cfg.paths.data, args.split, args.max_utterances)
    settings = _settings(cfg)
    records = decode_corpus(model, utts, settings, jobs=args.jobs)
    report = build_metrics(model, utts, records, settings, read_loss_curve(checkpoint.parent / "train_log.jsonl"))
    return cfg, report, records


def cmd_eval(args) -> int:
    base = load_run_config(args.config).with_overrides(**_overrides(args)) if args.config else None
    out = Path(args.out or (base.paths.out if base else "."))
    checkpoint = Path(args.checkpoint or out / CHECKPOINT)
    _, report, records = _evaluate(checkpoint, args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    with open(out / "decodes.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    print(json.dumps({"ter": report.ter, "utterances": report.num_utterances, "rtf": report.rtf}))
    return EXIT_OK


def cmd_bench(args) -> int:
    if len(args.checkpoint) < 2:
        raise UsageError("bench needs at least two --checkpoint arguments")
    entries = []
    n = 0
    for ckpt in args.checkpoint:
        path = Path(ckpt)
        _, report, _ = _evaluate(path, args)
        entries.append(bench_entry(str(path), report))
        n = report.num_utterances
    bench = BenchReport(n, entries)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(bench.to_json() + "\n")
    table = bench.to_table()
    (out / "bench.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    checkpoint = Path(args.checkpoint)
    model = _load_model(checkpoint)
    cfg = _run_config(args, checkpoint.parent / RUN_CONFIG)
    utts = _load_split(args.data or cfg.paths.data, args.split, None)
    if args.utt is None:
        utt = utts[0]
    else:
        found = [u for u in utts if u.id == args.utt]
        if not found:
            raise DataError(f"utterance {args.utt!r} not in split {args.split}")
        utt = found[0]
    out = Path(args.out or checkpoint.parent / "attention")
    try:
        summary = export_attention(model, utt, args.layer, cfg.train.chunk_len, out, args.head)
        baseline, _ = summarize_attention(Model(model.config), utt, args.layer, cfg.train.chunk_len, args.head)
    except IndexError as e:
        raise UsageError(str(e)) from e
    payload = {
        **summary.to_dict(),
        "untrained_leftmost_mass": baseline.leftmost_mass,
        "untrained_mean_leftmost_mass": baseline.mean_leftmost_mass,
    }
    _write_json(out / f"attn_{utt.id}_L{args.layer}.json", payload)
    print(json.dumps({k: payload[k] for k in ("mean_leftmost_mass", "untrained_mean_leftmost_mass", "max_row_sum_error")}))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect-attention": cmd_inspect_attention,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"chunkaligner: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as e:
        print(f"chunkaligner: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CapacityError as e:
        print(f"chunkaligner: data error: {e} (set repair_spill = true in [train] to spill labels)", file=sys.stderr)
        return EXIT_DATA
    except (DataError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"chunkaligner: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
