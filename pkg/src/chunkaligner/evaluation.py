"""Decoding a test set into metrics, paired benchmarks and attention exports.

Wall-clock decode times cover the search only; the encoder forward pass is
shared by every architecture and is timed separately.
"""

from __future__ import annotations

import json
import multiprocessing
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import CapacityError, append_eos, assign_to_chunks, grid_entry_counts
from .decoding import (
    DecodeResult,
    ModelScorer,
    aligner_decode,
    chunkwise_beam_search,
    chunkwise_greedy,
    transducer_beam,
    transducer_greedy,
)
from .model import Model, attention_mask
from .synthdata import Utterance, edit_distance, token_error_rate

SCHEMA_VERSION = 1
FRAME_STRIDE_S = 0.010  # raw-frame stride used for the real-time-factor analog
STAT_KEYS = (
    "joiner_space_evals",
    "eoc_evals",
    "label_softmax_evals",
    "predictor_steps",
    "frames_visited",
    "chunks_entered",
)


@dataclass
class DecodeSettings:
    chunk_len: int = 8
    beam_size: int = 1
    tau: float = 0.5
    max_symbols: int = 4


def run_decoder(model: Model, h_enc: np.ndarray, settings: DecodeSettings) -> DecodeResult:
    """Dispatch to the decoder matching the model's architecture."""
    scorer = ModelScorer(model, h_enc)
    arch = model.config.architecture
    s = settings
    if arch == "chunkwise":
        if s.beam_size == 1:
            return chunkwise_greedy(scorer, s.chunk_len, s.tau)
        return chunkwise_beam_search(scorer, s.chunk_len, s.beam_size, s.tau)
    if arch == "transducer":
        if s.beam_size == 1:
            return transducer_greedy(scorer, s.max_symbols)
        return transducer_beam(scorer, s.beam_size, s.max_symbols)
    return aligner_decode(scorer, beam_size=s.beam_size)


@dataclass
class UtteranceRecord:
    id: str
    ref: list[int]
    hyp: list[int]
    score: float
    errors: int
    num_frames: int
    num_raw_frames: int
    encode_seconds: float
    decode_seconds: float
    stats: dict[str, int]
    eoc_frames: list[int]
    forced_final: bool = False
    truncated: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def decode_one(model: Model, utt: Utterance, settings: DecodeSettings) -> UtteranceRecord:
    t0 = time.perf_counter()
    h = model.encode(utt.features).h_enc.data
    t1 = time.perf_counter()
    res = run_decoder(model, h, settings)
    t2 = time.perf_counter()
    return UtteranceRecord(
        id=utt.id,
        ref=list(utt.tokens),
        hyp=list(res.tokens),
        score=float(res.score),
        errors=edit_distance(utt.tokens, res.tokens),
        num_frames=h.shape[0],
        num_raw_frames=utt.num_raw_frames,
        encode_seconds=t1 - t0,
        decode_seconds=t2 - t1,
        stats=res.stats.as_dict(),
        eoc_frames=list(res.eoc_frames),
        forced_final=res.forced_final,
        truncated=res.truncated,
    )


_WORKER: dict = {}


def _worker_init(model_config, arrays, settings):
    from .tensor import Tensor

    _WORKER["model"] = Model(model_config, {k: Tensor(v, name=k) for k, v in arrays.items()})
    _WORKER["settings"] = settings


def _worker_decode(utt: Utterance) -> UtteranceRecord:
    return decode_one(_WORKER["model"], utt, _WORKER["settings"])


def decode_corpus(
    model: Model, utts: Sequence[Utterance], settings: DecodeSettings, jobs: int = 1
) -> list[UtteranceRecord]:
    """Decode every utterance; ``jobs > 1`` uses worker processes.

    Records are returned sorted by utterance id in both modes.
    """
    if jobs <= 1:
        records = [decode_one(model, u, settings) for u in utts]
    else:
        arrays = {k: p.data for k, p in model.params.items()}
        with multiprocessing.get_context("spawn").Pool(
            jobs, initializer=_worker_init, initargs=(model.config, arrays, settings)
        ) as pool:
            records = pool.map(_worker_decode, list(utts))
    return sorted(records, key=lambda r: r.id)


# ---------------------------------------------------------------- metrics report


def mean_grid_entries(utts: Sequence[Utterance], vocab_size: int, chunk_len: int) -> dict[str, float]:
    keys = ("chunkwise", "transducer")
    tot = dict.fromkeys(keys, 0.0)
    for u in utts:
        g = grid_entry_counts(u.num_frames, len(u.tokens), vocab_size, chunk_len)
        for k in keys:
            tot[k] += g[k]
    n = max(len(utts), 1)
    return {k: v / n for k, v in tot.items()}


@dataclass
class MetricsReport:
    architecture: str
    num_utterances: int
    ter: float
    decode: dict
    mean_stats: dict[str, float]
    mean_grid_entries: dict[str, float]
    mean_decode_seconds: float
    mean_encode_seconds: float
    audio_seconds: float
    rtf: float
    forced_final: int = 0
    truncated: int = 0
    loss_curve: list[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {d.get('schema_version')}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        return cls.from_dict(json.loads(text))


def build_metrics(
    model: Model,
    utts: Sequence[Utterance],
    records: Sequence[UtteranceRecord],
    settings: DecodeSettings,
    loss_curve: list[dict] | None = None,
) -> MetricsReport:
    if not records:
        raise ValueError("no utterances decoded")
    by_id = {r.id: r for r in records}
    refs = [list(u.tokens) for u in utts]
    hyps = [by_id[u.id].hyp for u in utts]
    n = len(records)
    mean_stats = {k: sum(r.stats[k] for r in records) / n for k in STAT_KEYS}
    decode_total = sum(r.decode_seconds for r in records)
    audio = sum(r.num_raw_frames for r in records) * FRAME_STRIDE_S
    return MetricsReport(
        architecture=model.config.architecture,
        num_utterances=n,
        ter=token_error_rate(refs, hyps),
        decode=asdict(settings),
        mean_stats=mean_stats,
        mean_grid_entries=mean_grid_entries(utts, model.config.vocab_size, settings.chunk_len),
        mean_decode_seconds=decode_total / n,
        mean_encode_seconds=sum(r.encode_seconds for r in records) / n,
        audio_seconds=audio,
        rtf=decode_total / audio,
        forced_final=sum(r.forced_final for r in records),
        truncated=sum(r.truncated for r in records),
        loss_curve=list(loss_curve or []),
    )


def read_loss_curve(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    keep = ("step", "loss", "dev_ter")
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append({k: rec[k] for k in keep if k in rec})
    return out


# ---------------------------------------------------------------- paired benchmark


@dataclass
class BenchEntry:
    name: str
    architecture: str
    ter: float
    mean_decode_seconds: float
    mean_stats: dict[str, float]
    mean_grid_entries: float


@dataclass
class BenchReport:
    """Paired comparison; ratios are ``entry / entries[0]``."""

    num_utterances: int
    entries: list[BenchEntry]
    schema_version: int = SCHEMA_VERSION

    def ratios(self) -> list[dict[str, float]]:
        ref = self.entries[0]
        out = []
        for e in self.entries:
            out.append(
                {
                    "decode_seconds": e.mean_decode_seconds / ref.mean_decode_seconds,
                    "joiner_space_evals": _ratio(e.mean_stats["joiner_space_evals"], ref.mean_stats["joiner_space_evals"]),
                    "grid_entries": _ratio(e.mean_grid_entries, ref.mean_grid_entries),
                }
            )
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = self.ratios()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> BenchReport:
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported bench schema {d.get('schema_version')}")
        entries = [BenchEntry(**e) for e in d["entries"]]
        return cls(d["num_utterances"], entries, d["schema_version"])

    def to_table(self) -> str:
        head = ["name", "arch", "TER", "decode_ms", "joiner_evals", "softmax_evals", "grid_entries", "x_decode"]
        rows = [head]
        for e, r in zip(self.entries, self.ratios()):
            rows.append(
                [
                    e.name,
                    e.architecture,
                    f"{e.ter:.4f}",
                    f"{1000 * e.mean_decode_seconds:.3f}",
                    f"{e.mean_stats['joiner_space_evals']:.1f}",
                    f"{e.mean_stats['label_softmax_evals']:.1f}",
                    f"{e.mean_grid_entries:.1f}",
                    f"{r['decode_seconds']:.3f}",
                ]
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _ratio(a: float, b: float) -> float:
    return a / b if b else float("inf")


def bench_entry(name: str, report: MetricsReport) -> BenchEntry:
    grid_key = "chunkwise" if report.architecture == "chunkwise" else "transducer"
    return BenchEntry(
        name=name,
        architecture=report.architecture,
        ter=report.ter,
        mean_decode_seconds=report.mean_decode_seconds,
        mean_stats=dict(report.mean_stats),
        mean_grid_entries=report.mean_grid_entries[grid_key],
    )


# ---------------------------------------------------------------- attention inspection


def chunk_label_counts(utt: Utterance, chunk_len: int) -> tuple[int, ...]:
    """U_n per chunk with ``<eos>`` included (the labels the chunk must emit)."""
    try:
        return assign_to_chunks(append_eos(utt.alignment), chunk_len).counts
    except CapacityError:
        return assign_to_chunks(append_eos(utt.alignment), chunk_len, repair=True).counts


def leftmost_mass(weights: np.ndarray, counts: Sequence[int], chunk_len: int) -> np.ndarray:
    """Mean attention mass that chunk n's queries put on its first U_n + 1 frames.

    ``weights`` is ``(heads, T, T)``; returns one fraction per chunk.
    """
    t = weights.shape[-1]
    out = np.zeros(len(counts))
    for n, u in enumerate(counts):
        lo, hi = n * chunk_len, min((n + 1) * chunk_len, t)
        keys = slice(lo, min(lo + u + 1, hi))
        out[n] = weights[:, lo:hi, keys].sum(-1).mean()
    return out


def uniform_leftmost_mass(mask: np.ndarray, counts: Sequence[int], chunk_len: int) -> np.ndarray:
    """The same fraction under uniform attention over each query's visible keys."""
    w = mask / mask.sum(-1, keepdims=True)
    return leftmost_mass(w[None], counts, chunk_len)


def format_matrix(m: np.ndarray, delimiter: str = "\t") -> str:
    return "\n".join(delimiter.join(f"{v:.10g}" for v in row) for row in m) + "\n"


def parse_matrix(text: str, delimiter: str = "\t") -> np.ndarray:
    return np.array([[float(v) for v in line.split(delimiter)] for line in text.splitlines() if line])


def attention_pgm(m: np.ndarray, chunk_len: int, scale: int = 4) -> bytes:
    """Binary PGM of a weight matrix, rows normalized to their max, with chunk gridlines."""
    t = m.shape[0]
    peak = np.maximum(m.max(axis=1, keepdims=True), 1e-300)
    img = np.repeat(np.repeat(np.round(255 * m / peak), scale, 0), scale, 1).astype(np.uint8)
    grid = 128
    for b in range(chunk_len, t, chunk_len):
        img[b * scale, :] = grid
        img[:, b * scale] = grid
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


@dataclass
class AttentionSummary:
    utterance: str
    layer: int
    heads: list[int]
    chunk_len: int
    counts: list[int]
    leftmost_mass: list[float]
    uniform_expectation: list[float]
    max_row_sum_error: float

    @property
    def mean_leftmost_mass(self) -> float:
        return float(np.mean(self.leftmost_mass))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_leftmost_mass"] = self.mean_leftmost_mass
        d["mean_uniform_expectation"] = float(np.mean(self.uniform_expectation))
        return d


def layer_attention(model: Model, utt: Utterance, layer: int) -> np.ndarray:
    """``(heads, T, T)`` weights of one encoder layer."""
    if not 0 <= layer < model.config.encoder_layers:
        raise IndexError(f"layer {layer} out of range [0, {model.config.encoder_layers})")
    return model.encode(utt.features, keep_attention=True).attention[layer].data


def summarize_attention(
    model: Model, utt: Utterance, layer: int, chunk_len: int, heads: Sequence[int] | None = None
) -> tuple[AttentionSummary, np.ndarray]:
    w = layer_attention(model, utt, layer)
    heads = list(range(w.shape[0])) if heads is None else list(heads)
    for h in heads:
        if not 0 <= h < w.shape[0]:
            raise IndexError(f"head {h} out of range [0, {w.shape[0]})")
    w = w[heads]
    counts = chunk_label_counts(utt, chunk_len)
    cfg = model.config
    t = w.shape[-1]
    mask = attention_mask(t, cfg.mask_mode, cfg.current_chunk, cfg.history_frames, np.array([t]))[0]
    summary = AttentionSummary(
        utterance=utt.id,
        layer=layer,
        heads=heads,
        chunk_len=chunk_len,
        counts=list(counts),
        leftmost_mass=leftmost_mass(w, counts, chunk_len).tolist(),
        uniform_expectation=uniform_leftmost_mass(mask, counts, chunk_len).tolist(),
        max_row_sum_error=float(np.abs(w.sum(-1) - 1.0).max()),
    )
    return summary, w


def export_attention(
    model: Model, utt: Utterance, layer: int, chunk_len: int, out_dir: str | Path, heads: Sequence[int] | None = None
) -> AttentionSummary:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, w = summarize_attention(model, utt, layer, chunk_len, heads)
    for h, m in zip(summary.heads, w):
        stem = f"attn_{utt.id}_L{layer}_H{h}"
        (out / f"{stem}.tsv").write_text(format_matrix(m))
        (out / f"{stem}.pgm").write_bytes(attention_pgm(m, chunk_len))
    return summary
