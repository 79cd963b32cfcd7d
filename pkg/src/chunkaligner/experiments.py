"""Train-then-evaluate runs and the emission-delay sweep."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .evaluation import DecodeSettings, MetricsReport, build_metrics, decode_corpus
from .model import Model
from .synthdata import Utterance, generate_dataset
from .train import train

SWEEP_SCHEMA_VERSION = 1


@dataclass
class RunOutcome:
    name: str
    architecture: str
    delay_frames: int
    steps: int
    train_seconds: float
    best_dev_ter: float
    test: MetricsReport

    @property
    def test_ter(self) -> float:
        return self.test.ter


def run_experiment(
    cfg: RunConfig,
    dataset: dict[str, list[Utterance]] | None = None,
    name: str | None = None,
    out_dir: str | Path | None = None,
) -> tuple[RunOutcome, Model]:
    """Train ``cfg`` from scratch and decode the test split with ``cfg.decode``."""
    if dataset is None:
        dataset = generate_dataset(cfg.task, sizes=cfg.dataset_sizes)
    model = Model(cfg.model)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    result = train(model, dataset["train"], dataset["dev"], cfg.train, log_path=log_path)
    settings = DecodeSettings(cfg.train.chunk_len, cfg.decode.beam_size, cfg.decode.tau, cfg.decode.max_symbols)
    test = dataset["test"]
    records = decode_corpus(model, test, settings)
    curve = [{k: h[k] for k in ("step", "loss", "dev_ter") if k in h} for h in result.history]
    report = build_metrics(model, test, records, settings, curve)
    outcome = RunOutcome(
        name=name or cfg.train.architecture,
        architecture=cfg.train.architecture,
        delay_frames=cfg.train.delay_frames,
        steps=cfg.train.steps,
        train_seconds=result.seconds,
        best_dev_ter=result.best_dev_ter,
        test=report,
    )
    if out_dir is not None:
        model.save(out_dir / "model.npz")
        (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    return outcome, model


# ---------------------------------------------------------------- delay sweep


@dataclass
class SweepRow:
    delay_frames: int
    test_ter: float
    best_dev_ter: float
    train_seconds: float
    mean_label_softmax_evals: float
    mean_decode_seconds: float


@dataclass
class SweepReport:
    architecture: str
    chunk_len: int
    steps: int
    rows: list[SweepRow] = field(default_factory=list)
    schema_version: int = SWEEP_SCHEMA_VERSION

    def row(self, delay: int) -> SweepRow:
        for r in self.rows:
            if r.delay_frames == delay:
                return r
        raise KeyError(delay)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SweepReport:
        d = json.loads(text)
        if d.get("schema_version") != SWEEP_SCHEMA_VERSION:
            raise ValueError(f"unsupported sweep schema {d.get('schema_version')}")
        rows = [SweepRow(**r) for r in d.pop("rows")]
        return cls(rows=rows, **d)

    def to_table(self) -> str:
        lines = [
            f"# {self.architecture}, L_c={self.chunk_len}, {self.steps} steps",
            "delay  test_TER  dev_TER  train_s  softmax_evals  decode_ms",
        ]
        for r in self.rows:
            lines.append(
                f"{r.delay_frames:>5}  {r.test_ter:8.4f}  {r.best_dev_ter:7.4f}  {r.train_seconds:7.1f}"
                f"  {r.mean_label_softmax_evals:13.2f}  {1000 * r.mean_decode_seconds:9.3f}"
            )
        return "\n".join(lines) + "\n"


def sweep_row(outcome: RunOutcome) -> SweepRow:
    return SweepRow(
        delay_frames=outcome.delay_frames,
        test_ter=outcome.test_ter,
        best_dev_ter=outcome.best_dev_ter,
        train_seconds=outcome.train_seconds,
        mean_label_softmax_evals=outcome.test.mean_stats["label_softmax_evals"],
        mean_decode_seconds=outcome.test.mean_decode_seconds,
    )


def delay_sweep(
    cfg: RunConfig,
    delays: Sequence[int] = (0, 1, 2, 4),
    out_dir: str | Path | None = None,
    log=None,
    reuse: dict[int, RunOutcome] | None = None,
) -> SweepReport:
    """Train one model per delay on a shared dataset.

    Delayed end frames are clamped to the last frame, so nonzero delays can
    overflow the final chunk; those runs always use ``repair_spill``.
    ``reuse`` maps delays to already finished runs of the same config (for
    example the delay-0 baseline), which are reported without retraining.
    """
    dataset = generate_dataset(cfg.task, sizes=cfg.dataset_sizes)
    report = SweepReport(cfg.train.architecture, cfg.train.chunk_len, cfg.train.steps)
    for d in delays:
        if reuse and d in reuse:
            report.rows.append(sweep_row(reuse[d]))
            continue
        train_cfg = dataclasses.replace(cfg.train, delay_frames=d, repair_spill=cfg.train.repair_spill or d > 0)
        run_cfg = dataclasses.replace(cfg, train=train_cfg)
        sub = None if out_dir is None else Path(out_dir) / f"delay{d}"
        t0 = time.perf_counter()
        outcome, _ = run_experiment(run_cfg, dataset, name=f"delay{d}", out_dir=sub)
        report.rows.append(sweep_row(outcome))
        if log:
            log(f"delay {d}: test TER {outcome.test_ter:.4f} ({time.perf_counter() - t0:.0f}s)")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.json").write_text(report.to_json() + "\n")
        (Path(out_dir) / "sweep.txt").write_text(report.to_table())
    return report
