"""Chunkwise beam search and the Transducer / Aligner baseline decoders.

Decoders talk to a *scorer*: any object exposing ``num_frames``,
``vocab_size``, ``initial_state()``, ``predict(token, state)``,
``joiner_space(t, h_pred)``, ``gate(h_joiner)`` and ``label_dist(h_joiner)``,
with ``t`` a 0-based encoder frame. :class:`ModelScorer` is the numpy
implementation backed by trained parameters; tests plug in hand-built ones.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .model import EOS, SOS, Model


@dataclass
class DecodeStats:
    """Operation counts for one decode.

    For Transducer decoding ``eoc_evals`` counts blank-probability evaluations.
    """

    joiner_space_evals: int = 0
    eoc_evals: int = 0
    label_softmax_evals: int = 0
    predictor_steps: int = 0
    frames_visited: int = 0
    chunks_entered: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    state: Any
    pending: tuple[Any, Any] | None = None  # cached (h_pred, next state) for tokens[-1]
    eoc_frames: tuple[int, ...] = ()

    @property
    def labels(self) -> list[int]:
        """Emitted labels without ``<sos>``/``<eos>``."""
        return [k for k in self.tokens[1:] if k != EOS]


@dataclass
class DecodeResult:
    tokens: list[int]
    score: float
    stats: DecodeStats
    hypotheses: list[Hypothesis] = field(default_factory=list)
    forced_final: bool = False
    truncated: bool = False
    eoc_frames: tuple[int, ...] = ()


class ModelScorer:
    """Inference-time joiner/predictor evaluation on numpy arrays."""

    def __init__(self, model: Model, h_enc: np.ndarray):
        p = {k: v.data for k, v in model.params.items()}
        self.vocab_size = model.config.vocab_size
        self.num_frames = h_enc.shape[0]
        self._embed_x = p["pred.embed"] @ p["pred.W_x"] + p["pred.b"]
        self._w_h = p["pred.W_h"]
        self._enc_proj = h_enc @ p["joiner.W_enc"]
        self._w_pred = p["joiner.W_pred"]
        self._b = p["joiner.b"]
        self._w_gate = p.get("joiner.w_gate")
        self._b_gate = p.get("joiner.b_gate")
        self._w_label = p["joiner.W_label"]
        self._b_label = p["joiner.b_label"]
        self._dp = model.config.predictor_dim

    def initial_state(self) -> np.ndarray:
        return np.zeros(self._dp)

    def predict(self, token: int, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.tanh(self._embed_x[token] + state @ self._w_h)
        return h, h

    def joiner_space(self, t: int, h_pred: np.ndarray) -> np.ndarray:
        return np.tanh(self._enc_proj[t] + h_pred @ self._w_pred + self._b)

    def gate(self, h_joiner: np.ndarray) -> float:
        z = float(h_joiner @ self._w_gate + self._b_gate)
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))

    def label_dist(self, h_joiner: np.ndarray) -> np.ndarray:
        z = h_joiner @ self._w_label + self._b_label
        z = np.exp(z - z.max())
        return z / z.sum()


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def prune_hyps(hyps: Sequence[Hypothesis], beam_size: int) -> list[Hypothesis]:
    """Top ``beam_size`` by score; ties go to shorter, then lexicographically smaller, tokens."""
    return sorted(hyps, key=lambda h: (-h.score, len(h.tokens), h.tokens))[:beam_size]


def chunk_bounds(num_frames: int, chunk_len: int, n: int) -> tuple[int, int]:
    """0-based half-open frame range of chunk ``n`` (1-based)."""
    count = math.ceil(num_frames / chunk_len)
    if not 1 <= n <= count:
        raise ValueError(f"chunk {n} outside 1..{count}")
    return (n - 1) * chunk_len, min(n * chunk_len, num_frames)


def chunk_generator(h_enc, chunk_len: int, n: int):
    """Frames ``(n-1)*L_c + 1 .. min(n*L_c, T)`` of ``h_enc``; the last chunk may be short."""
    lo, hi = chunk_bounds(len(h_enc), chunk_len, n)
    return h_enc[lo:hi]


def _emittable(vocab_size: int, exclude: Sequence[int]) -> np.ndarray:
    keep = np.ones(vocab_size, dtype=bool)
    keep[list(exclude)] = False
    return keep


def _step(scorer, hyp: Hypothesis, stats: DecodeStats):
    if hyp.pending is not None:
        return hyp.pending
    stats.predictor_steps += 1
    return scorer.predict(hyp.tokens[-1], hyp.state)


# ---------------------------------------------------------------- chunkwise


def chunkwise_beam_search(scorer, chunk_len: int, beam_size: int = 8, tau: float = 0.5) -> DecodeResult:
    """Chunk-synchronous beam search with end-of-chunk transitions, in log domain.

    Per frame each live hypothesis either fires EOC (probability above
    ``tau``; it waits in ``C`` for the next chunk) or expands every label with
    score ``log p(k) + log(1 - eoc)``. ``<eos>`` expansions finish. The frame
    loop stops early once no hypothesis remains in the chunk.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    t_total = scorer.num_frames
    if t_total < 1:
        raise ValueError("empty encoder output")
    stats = DecodeStats()
    emit = np.flatnonzero(_emittable(scorer.vocab_size, [SOS]))
    beam = [Hypothesis((SOS,), 0.0, scorer.initial_state())]
    finished: list[Hypothesis] = []
    n_chunks = math.ceil(t_total / chunk_len)
    for n in range(1, n_chunks + 1):
        lo, hi = chunk_bounds(t_total, chunk_len, n)
        stats.chunks_entered += 1
        moved: list[Hypothesis] = []
        for t in range(lo, hi):
            if not beam:
                break
            stats.frames_visited += 1
            expanded: list[Hypothesis] = []
            for hyp in beam:
                h_pred, next_state = _step(scorer, hyp, stats)
                hj = scorer.joiner_space(t, h_pred)
                stats.joiner_space_evals += 1
                eoc = scorer.gate(hj)
                stats.eoc_evals += 1
                if eoc > tau:
                    moved.append(
                        Hypothesis(
                            hyp.tokens,
                            hyp.score + _log(eoc),
                            hyp.state,
                            (h_pred, next_state),
                            hyp.eoc_frames + (t + 1,),
                        )
                    )
                    continue
                dist = scorer.label_dist(hj)
                stats.label_softmax_evals += 1
                base = hyp.score + _log(1.0 - eoc)
                for k in emit:
                    if dist[k] <= 0.0:
                        continue
                    child = Hypothesis(
                        hyp.tokens + (int(k),), base + math.log(dist[k]), next_state, None, hyp.eoc_frames
                    )
                    (finished if k == EOS else expanded).append(child)
            beam = prune_hyps(expanded, beam_size)
        beam = prune_hyps(beam + moved, beam_size)
    return _finish(finished, beam, stats)


def _finish(finished: list[Hypothesis], beam: list[Hypothesis], stats: DecodeStats) -> DecodeResult:
    if finished:
        ranked = prune_hyps(finished, len(finished))
        best = ranked[0]
        return DecodeResult(best.labels, best.score, stats, ranked, eoc_frames=best.eoc_frames)
    if not beam:
        return DecodeResult([], -math.inf, stats, [], forced_final=True)
    best = prune_hyps(beam, 1)[0]
    return DecodeResult(best.labels, best.score, stats, [best], forced_final=True, eoc_frames=best.eoc_frames)


def chunkwise_greedy(scorer, chunk_len: int, tau: float = 0.5) -> DecodeResult:
    """Single-hypothesis chunkwise decoding, equal to beam search with ``beam_size=1``.

    Per frame the hypothesis either moves to the next chunk (EOC above
    ``tau``) or extends with its best non-``<eos>`` label; every ``<eos>``
    completion is kept as a finished candidate. Once ``<eos>`` is the argmax
    no later completion can score higher, so decoding stops there.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    t_total = scorer.num_frames
    if t_total < 1:
        raise ValueError("empty encoder output")
    stats = DecodeStats()
    emit = _emittable(scorer.vocab_size, [SOS, EOS])
    hyp = Hypothesis((SOS,), 0.0, scorer.initial_state())
    finished: list[Hypothesis] = []
    for n in range(1, math.ceil(t_total / chunk_len) + 1):
        lo, hi = chunk_bounds(t_total, chunk_len, n)
        stats.chunks_entered += 1
        for t in range(lo, hi):
            stats.frames_visited += 1
            h_pred, next_state = _step(scorer, hyp, stats)
            hj = scorer.joiner_space(t, h_pred)
            stats.joiner_space_evals += 1
            eoc = scorer.gate(hj)
            stats.eoc_evals += 1
            if eoc > tau:
                hyp = Hypothesis(
                    hyp.tokens, hyp.score + _log(eoc), hyp.state, (h_pred, next_state), hyp.eoc_frames + (t + 1,)
                )
                break
            dist = scorer.label_dist(hj)
            stats.label_softmax_evals += 1
            base = hyp.score + _log(1.0 - eoc)
            k = int(np.argmax(np.where(emit, dist, -1.0)))
            if dist[EOS] > 0.0:
                finished.append(
                    Hypothesis(hyp.tokens + (EOS,), base + math.log(dist[EOS]), next_state, None, hyp.eoc_frames)
                )
            if dist[EOS] >= dist[k] or dist[k] <= 0.0:
                return _finish(finished, [], stats)
            hyp = Hypothesis(hyp.tokens + (k,), base + math.log(dist[k]), next_state, None, hyp.eoc_frames)
    return _finish(finished, [hyp], stats)


# ---------------------------------------------------------------- transducer


def transducer_greedy(scorer, max_symbols: int = 4) -> DecodeResult:
    """Frame-synchronous HAT greedy search.

    At each frame, emit the best label while ``(1 - blank) * max p(k)``
    exceeds the blank probability (at most ``max_symbols`` per frame). The
    label softmax is skipped when blank >= 0.5, since blank then wins.
    """
    stats = DecodeStats()
    emit = _emittable(scorer.vocab_size, [SOS, EOS])
    hyp = Hypothesis((SOS,), 0.0, scorer.initial_state())
    for t in range(scorer.num_frames):
        stats.frames_visited += 1
        for _ in range(max_symbols):
            h_pred, next_state = _step(scorer, hyp, stats)
            hyp.pending = (h_pred, next_state)
            hj = scorer.joiner_space(t, h_pred)
            stats.joiner_space_evals += 1
            blank = scorer.gate(hj)
            stats.eoc_evals += 1
            if blank >= 0.5:
                hyp.score += _log(blank)
                break
            dist = scorer.label_dist(hj)
            stats.label_softmax_evals += 1
            k = int(np.argmax(np.where(emit, dist, -1.0)))
            label_score = _log(1.0 - blank) + _log(dist[k])
            if _log(blank) >= label_score:
                hyp.score += _log(blank)
                break
            hyp = Hypothesis(hyp.tokens + (k,), hyp.score + label_score, next_state)
    return DecodeResult(hyp.labels, hyp.score, stats, [hyp])


def transducer_beam(scorer, beam_size: int = 8, max_symbols: int = 4) -> DecodeResult:
    """Frame-synchronous HAT beam search.

    Within a frame, blank-terminated and label-extended candidates are pruned
    jointly, so ``beam_size=1`` follows exactly the greedy path. Hypotheses
    reaching the same label sequence are merged by log-sum-exp.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    stats = DecodeStats()
    emit = np.flatnonzero(_emittable(scorer.vocab_size, [SOS, EOS]))
    beam = [Hypothesis((SOS,), 0.0, scorer.initial_state())]
    for t in range(scorer.num_frames):
        stats.frames_visited += 1
        done: dict[tuple[int, ...], Hypothesis] = {}
        active = beam
        for step in range(max_symbols):
            cands: list[tuple[Hypothesis, bool]] = []
            for hyp in active:
                h_pred, next_state = _step(scorer, hyp, stats)
                hyp.pending = (h_pred, next_state)
                hj = scorer.joiner_space(t, h_pred)
                stats.joiner_space_evals += 1
                blank = scorer.gate(hj)
                stats.eoc_evals += 1
                dist = scorer.label_dist(hj)
                stats.label_softmax_evals += 1
                cands.append((Hypothesis(hyp.tokens, hyp.score + _log(blank), hyp.state, hyp.pending), True))
                keep = _log(1.0 - blank)
                for k in emit:
                    if dist[k] > 0.0:
                        score = hyp.score + (keep + math.log(dist[k]))
                        cands.append((Hypothesis(hyp.tokens + (int(k),), score, next_state), False))
            pool = [(h, True) for h in done.values()] + cands
            kept = prune_hyps([h for h, _ in pool], beam_size)
            kept_ids = {id(h) for h in kept}
            done = {}
            active = []
            for h, is_done in pool:
                if id(h) not in kept_ids:
                    continue
                if is_done:
                    _merge(done, h)
                else:
                    active.append(h)
            if not active:
                break
        for h in active:
            _merge(done, h)
        beam = prune_hyps(list(done.values()), beam_size)
    ranked = prune_hyps(beam, len(beam))
    return DecodeResult(ranked[0].labels, ranked[0].score, stats, ranked)


def _merge(pool: dict[tuple[int, ...], Hypothesis], h: Hypothesis) -> None:
    old = pool.get(h.tokens)
    if old is None:
        pool[h.tokens] = h
    else:
        old.score = float(np.logaddexp(old.score, h.score))


# ---------------------------------------------------------------- aligner


def aligner_decode(scorer, max_len: int | None = None, beam_size: int = 1) -> DecodeResult:
    """Label-synchronous decoding on the diagonal: step ``u`` reads encoder frame ``u``.

    ``<eos>`` expansions finish a hypothesis; the search stops once no live
    hypothesis can outscore the best finished one (scores only decrease).
    Running out of ``max_len`` steps without a finished hypothesis sets
    ``truncated``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    t_total = scorer.num_frames
    max_len = t_total if max_len is None else max_len
    if max_len > t_total:
        raise ValueError(f"max_len={max_len} exceeds T={t_total}")
    stats = DecodeStats()
    emit = np.flatnonzero(_emittable(scorer.vocab_size, [SOS]))
    beam = [Hypothesis((SOS,), 0.0, scorer.initial_state())]
    finished: list[Hypothesis] = []
    for u in range(max_len):
        if not beam:
            break
        if finished and max(h.score for h in finished) >= beam[0].score:
            break
        stats.frames_visited += 1
        expanded = []
        for hyp in beam:
            h_pred, next_state = _step(scorer, hyp, stats)
            hj = scorer.joiner_space(u, h_pred)
            stats.joiner_space_evals += 1
            dist = scorer.label_dist(hj)
            stats.label_softmax_evals += 1
            for k in emit:
                if dist[k] <= 0.0:
                    continue
                child = Hypothesis(hyp.tokens + (int(k),), hyp.score + math.log(dist[k]), next_state)
                (finished if k == EOS else expanded).append(child)
        beam = prune_hyps(expanded, beam_size)
    if finished:
        ranked = prune_hyps(finished, len(finished))
        return DecodeResult(ranked[0].labels, ranked[0].score, stats, ranked)
    best = prune_hyps(beam, 1)
    if not best:
        return DecodeResult([], 0.0, stats, [], truncated=True)
    return DecodeResult(best[0].labels, best[0].score, stats, best, truncated=True)
