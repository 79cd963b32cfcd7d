"""Synthetic speech-like utterances with exact alignments, plus token error rate.

Each token owns a fixed random unit-vector prototype. An utterance renders
every token as its prototype repeated for a sampled number of raw frames,
adds Gaussian noise, and records each token's end frame in encoder frames.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import CapacityError, ForcedAlignment, append_eos, assign_to_chunks
from .model import FIRST_TOKEN

FORMAT_NAME = "chunkaligner-synth"
FORMAT_VERSION = 1
SPLITS = ("train", "dev", "test")


@dataclass
class SynthTaskConfig:
    """Generator settings; durations are in raw frames.

    ``chunk_len`` (encoder frames), when set, rejects utterances whose labels
    plus ``<eos>`` would overflow a chunk.
    """

    vocab_size: int = 16
    feature_dim: int = 8
    min_duration: int = 16
    max_duration: int = 32
    noise_std: float = 0.15
    min_tokens: int = 5
    max_tokens: int = 20
    frame_reduction: int = 4
    chunk_len: int | None = 8
    seed: int = 0

    def __post_init__(self):
        if self.min_duration < 1 or self.max_duration < self.min_duration:
            raise ValueError("need 1 <= min_duration <= max_duration")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (consecutive tokens differ)")
        if self.feature_dim < 1 or self.frame_reduction < 1 or self.noise_std < 0:
            raise ValueError("invalid feature settings")

    @property
    def model_vocab_size(self) -> int:
        """Output-table size including ``<sos>`` and ``<eos>``."""
        return self.vocab_size + FIRST_TOKEN


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    tokens: tuple[int, ...]
    alignment: ForcedAlignment
    durations: tuple[int, ...] = field(default=())

    @property
    def num_raw_frames(self) -> int:
        return self.features.shape[0]

    @property
    def num_frames(self) -> int:
        return self.alignment.num_frames

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.tokens == other.tokens
            and self.alignment == other.alignment
            and self.durations == other.durations
            and self.features.shape == other.features.shape
            and bool((self.features == other.features).all())
        )


def prototypes(cfg: SynthTaskConfig) -> np.ndarray:
    """``(vocab_size, feature_dim)`` unit vectors, fixed by the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    v = rng.normal(size=(cfg.vocab_size, cfg.feature_dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _fits_chunks(a: ForcedAlignment, chunk_len: int) -> bool:
    try:
        assign_to_chunks(append_eos(a), chunk_len)
    except CapacityError:
        return False
    return True


def generate_utterance(
    cfg: SynthTaskConfig, rng: np.random.Generator, utt_id: str = "utt", protos: np.ndarray | None = None
) -> Utterance:
    """Sample one utterance; consecutive tokens always differ so every boundary is audible."""
    protos = prototypes(cfg) if protos is None else protos
    r = cfg.frame_reduction
    while True:
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        ids = [int(rng.integers(cfg.vocab_size))]
        for _ in range(n - 1):
            step = int(rng.integers(1, cfg.vocab_size))
            ids.append((ids[-1] + step) % cfg.vocab_size)
        durations = rng.integers(cfg.min_duration, cfg.max_duration + 1, size=n)
        # stretch the final token so the raw length is a whole number of encoder frames
        durations[-1] += (-durations.sum()) % r
        ends = np.cumsum(durations)
        t_raw = int(ends[-1])
        frames = tuple(int(math.ceil(e / r)) for e in ends)
        alignment = ForcedAlignment(frames, t_raw // r)
        if cfg.chunk_len is None or _fits_chunks(alignment, cfg.chunk_len):
            break
    feats = np.repeat(protos[ids], durations, axis=0)
    if cfg.noise_std > 0:
        feats = feats + rng.normal(scale=cfg.noise_std, size=feats.shape)
    return Utterance(
        utt_id,
        feats,
        tuple(i + FIRST_TOKEN for i in ids),
        alignment,
        tuple(int(d) for d in durations),
    )


def split_sizes(count: int, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> list[int]:
    sizes = [int(round(count * f)) for f in fractions[:-1]]
    return sizes + [count - sum(sizes)]


def generate_split(cfg: SynthTaskConfig, split: str, count: int) -> list[Utterance]:
    """Utterance ``i`` of ``split`` draws from its own seed stream, so splits never overlap."""
    protos = prototypes(cfg)
    key = SPLITS.index(split) + 1
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(key, i)))
        out.append(generate_utterance(cfg, rng, f"{split}-{i:05d}", protos))
    return out


def generate_dataset(
    cfg: SynthTaskConfig, count: int | None = None, sizes: Sequence[int] | None = None
) -> dict[str, list[Utterance]]:
    """Train/dev/test splits, either an 80/10/10 split of ``count`` or explicit ``sizes``."""
    if sizes is None:
        if count is None:
            raise ValueError("give count or sizes")
        sizes = split_sizes(count)
    return {name: generate_split(cfg, name, n) for name, n in zip(SPLITS, sizes)}


# ---------------------------------------------------------------- serialization


def _encode_features(x: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(x, dtype="<f8").tobytes()).decode("ascii")


def _decode_features(payload: str, shape: Sequence[int]) -> np.ndarray:
    raw = base64.b64decode(payload)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def utterance_record(u: Utterance) -> dict:
    return {
        "id": u.id,
        "tokens": list(u.tokens),
        "alignment": list(u.alignment.frames),
        "num_frames": u.alignment.num_frames,
        "durations": list(u.durations),
        "shape": list(u.features.shape),
        "features": _encode_features(u.features),
    }


def utterance_from_record(rec: dict) -> Utterance:
    return Utterance(
        rec["id"],
        _decode_features(rec["features"], rec["shape"]),
        tuple(rec["tokens"]),
        ForcedAlignment(tuple(rec["alignment"]), rec["num_frames"]),
        tuple(rec.get("durations", ())),
    )


def write_split(path: str | Path, cfg: SynthTaskConfig, split: str, utts: Iterable[Utterance]) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "split": split, "config": asdict(cfg)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for u in utts:
            fh.write(json.dumps(utterance_record(u)) + "\n")


def read_split(path: str | Path) -> tuple[SynthTaskConfig, list[Utterance]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
        utts = [utterance_from_record(json.loads(line)) for line in fh if line.strip()]
    return SynthTaskConfig(**header["config"]), utts


def save_dataset(directory: str | Path, cfg: SynthTaskConfig, splits: dict[str, list[Utterance]]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, utts in splits.items():
        write_split(directory / f"{name}.jsonl", cfg, name, utts)


def load_dataset(directory: str | Path) -> tuple[SynthTaskConfig, dict[str, list[Utterance]]]:
    directory = Path(directory)
    cfg = None
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.jsonl"
        if path.exists():
            cfg, splits[name] = read_split(path)
    if cfg is None:
        raise FileNotFoundError(f"no dataset splits in {directory}")
    return cfg, splits


# ---------------------------------------------------------------- metrics


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edit distance over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis corpora differ in size")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("empty reference corpus")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total
