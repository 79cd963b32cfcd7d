"""Forced alignments, chunk assignment and end-of-chunk target grids.

Frames and chunk indices are 1-based throughout this module, matching how
alignments are written down; predictor step ``g`` denotes the predictor
output that has consumed ``<sos>, y_1, ..., y_{g-1}``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

logger = logging.getLogger(__name__)


class CapacityError(ValueError):
    """A chunk holds more labels than it has frames to emit them (plus its EOC)."""


@dataclass(frozen=True)
class ForcedAlignment:
    """Per-label end frame in encoder-frame units."""

    frames: tuple[int, ...]
    num_frames: int
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(int(f) for f in self.frames))
        if self.num_frames < 1:
            raise ValueError("alignment needs at least one frame")
        prev = 1
        for f in self.frames:
            if not 1 <= f <= self.num_frames:
                raise ValueError(f"frame {f} outside 1..{self.num_frames}")
            if f < prev:
                raise ValueError("alignment frames must be nondecreasing")
            prev = f

    def __len__(self) -> int:
        return len(self.frames)


def apply_delay(a: ForcedAlignment, delay_frames: int) -> ForcedAlignment:
    """Shift every label later by ``delay_frames``, clamping at the last frame."""
    if delay_frames < 0:
        raise ValueError("delay must be nonnegative")
    shifted = [f + delay_frames for f in a.frames]
    clamped = sum(f > a.num_frames for f in shifted)
    if clamped:
        logger.debug("delay %d clamped %d label(s) to frame %d", delay_frames, clamped, a.num_frames)
    return ForcedAlignment(tuple(min(f, a.num_frames) for f in shifted), a.num_frames, clamped)


def delay_frames_from_ms(delay_ms: float, stride_ms: float = 10.0, frame_reduction: int = 4) -> int:
    """Convert a delay in milliseconds to encoder frames (e.g. 320 ms -> 8)."""
    frames = delay_ms / (stride_ms * frame_reduction)
    if abs(frames - round(frames)) > 1e-9:
        raise ValueError(f"{delay_ms} ms is not a whole number of encoder frames")
    return int(round(frames))


def append_eos(a: ForcedAlignment) -> ForcedAlignment:
    """Add the ``<eos>`` label, aligned to the last frame."""
    return ForcedAlignment(a.frames + (a.num_frames,), a.num_frames, a.clamped)


@dataclass(frozen=True)
class ChunkAssignment:
    """Labels grouped into chunks of ``chunk_len`` encoder frames.

    ``slots[i] = (n, u_n)``: label ``i`` is the ``u_n``-th label of chunk
    ``n``. The last chunk may be shorter than ``chunk_len``.
    """

    chunk_len: int
    num_frames: int
    counts: tuple[int, ...]

    @property
    def num_chunks(self) -> int:
        return len(self.counts)

    @property
    def num_labels(self) -> int:
        return sum(self.counts)

    @property
    def slots(self) -> list[tuple[int, int]]:
        return [(n + 1, j + 1) for n, c in enumerate(self.counts) for j in range(c)]

    def chunk_length(self, n: int) -> int:
        return min(self.chunk_len, self.num_frames - (n - 1) * self.chunk_len)

    def capacities(self) -> list[int]:
        return [self.chunk_length(n) - 1 for n in range(1, self.num_chunks + 1)]

    def overflow(self) -> list[int]:
        """Chunks (1-based) holding more labels than their capacity."""
        return [n + 1 for n, (c, cap) in enumerate(zip(self.counts, self.capacities())) if c > cap]

    def is_valid(self) -> bool:
        return not self.overflow()


def num_chunks(num_frames: int, chunk_len: int) -> int:
    return math.ceil(num_frames / chunk_len)


def assign_to_chunks(a: ForcedAlignment, chunk_len: int, repair: bool = False) -> ChunkAssignment:
    """Put each label into chunk ``ceil(frame / chunk_len)``.

    Over-full chunks raise :class:`CapacityError` unless ``repair`` is set, in
    which case :func:`repair_spill` moves the excess forward.
    """
    if chunk_len < 2:
        raise ValueError("chunk_len must be at least 2")
    counts = [0] * num_chunks(a.num_frames, chunk_len)
    for f in a.frames:
        counts[(f - 1) // chunk_len] += 1
    c = ChunkAssignment(chunk_len, a.num_frames, tuple(counts))
    if c.is_valid():
        return c
    if repair:
        return repair_spill(c)
    raise CapacityError(f"chunks {c.overflow()} exceed capacity (counts {list(c.counts)})")


def repair_spill(c: ChunkAssignment) -> ChunkAssignment:
    """Move labels that do not fit, in order, into the following chunks."""
    caps = c.capacities()
    if sum(caps) < c.num_labels:
        raise CapacityError(
            f"{c.num_labels} labels cannot fit in {c.num_frames} frames with chunk length {c.chunk_len}"
        )
    carry = 0
    counts = []
    for count, cap in zip(c.counts, caps):
        want = count + carry
        counts.append(min(want, cap))
        carry = want - counts[-1]
    if carry:
        # labels pushed past the last chunk: backfill earlier chunks from the end
        for n in range(len(counts) - 1, -1, -1):
            room = caps[n] - counts[n]
            take = min(room, carry)
            counts[n] += take
            carry -= take
    return ChunkAssignment(c.chunk_len, c.num_frames, tuple(counts))


class EocEntry(NamedTuple):
    frame: int
    pred_step: int
    target: int


class JoinerPair(NamedTuple):
    frame: int
    pred_step: int
    kind: str  # "label" or "eoc"
    target: int  # token id for labels, 1 for the chunk-final EOC entry


def _require_valid(c: ChunkAssignment) -> None:
    if not c.is_valid():
        raise CapacityError(f"chunks {c.overflow()} exceed capacity")


def build_eoc_targets(c: ChunkAssignment) -> list[EocEntry]:
    """One EOC entry per label (target 0) plus a final one per chunk (target 1).

    The final entry of chunk ``n`` sits on the frame after the chunk's last
    label and uses the predictor output that has seen every label through
    chunk ``n``. Length is ``U + N``.
    """
    _require_valid(c)
    entries: list[EocEntry] = []
    done = 0
    for n, count in enumerate(c.counts):
        base = n * c.chunk_len
        for j in range(1, count + 1):
            entries.append(EocEntry(base + j, done + j, 0))
        entries.append(EocEntry(base + count + 1, done + count + 1, 1))
        done += count
    return entries


def build_joiner_pairs(c: ChunkAssignment, tokens: Sequence[int]) -> list[JoinerPair]:
    """Every joiner evaluation needed for one utterance's chunkwise loss.

    Label ``j`` of chunk ``n`` pairs encoder frame ``(n-1)*L_c + j`` with its
    predictor step; label entries also carry EOC target 0.
    """
    if len(tokens) != c.num_labels:
        raise ValueError(f"{len(tokens)} tokens for {c.num_labels} assigned labels")
    pairs = []
    for e in build_eoc_targets(c):
        if e.target:
            pairs.append(JoinerPair(e.frame, e.pred_step, "eoc", 1))
        else:
            pairs.append(JoinerPair(e.frame, e.pred_step, "label", int(tokens[e.pred_step - 1])))
    return pairs


def grid_entry_counts(num_frames: int, num_labels: int, vocab: int, chunk_len: int) -> dict[str, int]:
    """Prediction-grid sizes: chunkwise ``U*V + (U+N)`` versus transducer ``T*U*(V+1)``."""
    n = num_chunks(num_frames, chunk_len)
    return {
        "chunkwise": num_labels * vocab + num_labels + n,
        "transducer": num_frames * num_labels * (vocab + 1),
        "aligner": num_labels * vocab,
    }
