import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkaligner.alignment import ForcedAlignment, append_eos, assign_to_chunks
from chunkaligner.decoding import (
    DecodeStats,
    Hypothesis,
    ModelScorer,
    aligner_decode,
    chunk_generator,
    chunkwise_beam_search,
    chunkwise_greedy,
    prune_hyps,
    transducer_beam,
    transducer_greedy,
)
from chunkaligner.model import EOS, SOS, Model, ModelConfig


class TableScorer:
    """Scorer whose outputs are a pure function of (frame, emitted prefix).

    The predictor state is simply the token tuple, so decoders and the test
    oracles below see exactly the same probabilities.
    """

    def __init__(self, num_frames, vocab_size, gate_fn, dist_fn):
        self.num_frames = num_frames
        self.vocab_size = vocab_size
        self.gate_fn = gate_fn
        self.dist_fn = dist_fn
        self.calls = 0

    def initial_state(self):
        return ()

    def predict(self, token, state):
        out = state + (token,)
        return out, out

    def joiner_space(self, t, h_pred):
        self.calls += 1
        return (t, h_pred)

    def gate(self, hj):
        return self.gate_fn(*hj)

    def label_dist(self, hj):
        return self.dist_fn(*hj)


def random_table_scorer(seed, num_frames, vocab_size, gate_scale=1.0):
    cache = {}

    def draws(t, prefix):
        key = (t, prefix)
        if key not in cache:
            rng = np.random.default_rng([seed, t, len(prefix)] + list(prefix))
            gate = float(rng.uniform(0.0, gate_scale))
            dist = rng.dirichlet(np.ones(vocab_size))
            dist[SOS] = 0.0
            cache[key] = (gate, dist / dist.sum())
        return cache[key]

    return TableScorer(num_frames, vocab_size, lambda t, p: draws(t, p)[0], lambda t, p: draws(t, p)[1])


def oracle_scorer(tokens, frames, num_frames, chunk_len, confidence=0.99):
    """Emits the reference labels on the chunk grid with near-certain outputs."""
    a = append_eos(ForcedAlignment(tuple(frames), num_frames))
    c = assign_to_chunks(a, chunk_len)
    labels = list(tokens) + [EOS]
    before = np.concatenate([[0], np.cumsum(c.counts)])
    vocab = max(labels + [3]) + 1

    def chunk_of(t):
        return t // chunk_len

    def gate(t, prefix):
        emitted = len(prefix) - 1
        n = chunk_of(t)
        return confidence if emitted >= before[n + 1] else 1 - confidence

    def dist(t, prefix):
        d = np.full(vocab, (1 - confidence) / (vocab - 2))
        d[SOS] = 0.0
        d[labels[len(prefix) - 1]] = confidence
        return d

    return TableScorer(num_frames, vocab, gate, dist), c


def enumerate_paths(scorer, chunk_len, tau):
    """All finished Alg.-1 decision paths, scored in the probability domain."""
    t_total = scorer.num_frames
    n_chunks = math.ceil(t_total / chunk_len)
    out = []

    def walk(n, t, prefix, prob):
        if n >= n_chunks:
            return
        hi = min((n + 1) * chunk_len, t_total)
        if t >= hi:
            walk(n + 1, (n + 1) * chunk_len, prefix, prob)
            return
        eoc = scorer.gate_fn(t, prefix)
        if eoc > tau:
            walk(n + 1, (n + 1) * chunk_len, prefix, prob * eoc)
            return
        dist = scorer.dist_fn(t, prefix)
        for k in range(1, scorer.vocab_size):
            p = prob * (1 - eoc) * dist[k]
            if k == EOS:
                out.append((prefix + (k,), p))
            else:
                walk(n, t + 1, prefix + (k,), p)

    walk(0, 0, (SOS,), 1.0)
    return out


class TestChunks:
    def test_second_of_two(self):
        h = np.arange(20)
        assert chunk_generator(h, 10, 2).tolist() == list(range(10, 20))

    def test_short_last_chunk(self):
        assert len(chunk_generator(np.arange(17), 10, 2)) == 7

    @given(st.integers(1, 40), st.integers(1, 9))
    def test_partition(self, t, lc):
        h = np.arange(t)
        parts = [chunk_generator(h, lc, n) for n in range(1, -(-t // lc) + 1)]
        assert np.array_equal(np.concatenate(parts), h)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            chunk_generator(np.arange(5), 2, 4)


def test_prune_tie_breaking():
    hyps = [Hypothesis((0, 3), -1.0, None), Hypothesis((0, 2, 2), -1.0, None), Hypothesis((0, 2), -1.0, None)]
    assert [h.tokens for h in prune_hyps(hyps, 3)] == [(0, 2), (0, 3), (0, 2, 2)]


class TestChunkwiseBeam:
    def test_eoc_carries_empty_hypothesis(self):
        scorer = TableScorer(6, 4, lambda t, p: 0.9, lambda t, p: np.array([0, 0.1, 0.5, 0.4]))
        res = chunkwise_beam_search(scorer, chunk_len=2, beam_size=4)
        assert res.forced_final
        assert res.tokens == []
        assert res.score == pytest.approx(3 * math.log(0.9), abs=1e-12)
        assert res.eoc_frames == (1, 3, 5)
        assert res.stats.frames_visited == 3
        assert res.stats.label_softmax_evals == 0

    def test_early_exit_skips_rest_of_chunk(self):
        scorer = TableScorer(8, 4, lambda t, p: 0.9 if t in (1, 4) else 0.1, lambda t, p: np.array([0, 0.0, 1.0, 0]))
        res = chunkwise_greedy(scorer, chunk_len=4)
        # chunk 1: frames 1-2 visited (EOC at 2); chunk 2: frame 5 fires immediately
        assert res.stats.frames_visited == 3
        assert res.eoc_frames == (2, 5)

    def test_invalid_arguments(self):
        scorer = random_table_scorer(0, 4, 4)
        with pytest.raises(ValueError):
            chunkwise_beam_search(scorer, 2, beam_size=0)
        with pytest.raises(ValueError):
            chunkwise_beam_search(scorer, 2, tau=1.0)

    def test_matches_exhaustive_argmax(self):
        worst = 0.0
        checked = 0
        for seed in range(200):
            t = 1 + seed % 4
            scorer = random_table_scorer(seed, t, 4)
            paths = enumerate_paths(scorer, 2, 0.5)
            res = chunkwise_beam_search(scorer, chunk_len=2, beam_size=10_000, tau=0.5)
            if not paths:
                assert res.forced_final
                continue
            best = max(paths, key=lambda x: x[1])
            worst = max(worst, abs(res.score - math.log(best[1])))
            assert len(res.hypotheses) == len(paths)
            checked += 1
        assert checked > 100
        assert worst < 1e-10

    def test_beam_one_matches_greedy(self):
        for seed in range(100):
            cfg = ModelConfig(vocab_size=6, encoder_dim=8, predictor_dim=8, joiner_dim=8, ffn_dim=8, seed=seed)
            model = Model(cfg)
            rng = np.random.default_rng(seed)
            model.params["joiner.b_gate"].data[...] = rng.normal(scale=2.0)
            model.params["joiner.b_label"].data[EOS] = rng.normal() - 1.0
            t_raw = 4 * int(rng.integers(2, 15))
            h = model.encode(rng.normal(size=(t_raw, 8))).h_enc.data
            lc = int(rng.integers(2, 6))
            g = chunkwise_greedy(ModelScorer(model, h), lc)
            b = chunkwise_beam_search(ModelScorer(model, h), lc, beam_size=1)
            assert g.tokens == b.tokens
            assert g.forced_final == b.forced_final

    def test_stats_invariants(self):
        scorer = random_table_scorer(3, 9, 5, gate_scale=0.8)
        res = chunkwise_beam_search(scorer, chunk_len=3, beam_size=3)
        s = res.stats
        assert s.eoc_evals == s.joiner_space_evals
        assert s.label_softmax_evals <= s.joiner_space_evals
        assert s.joiner_space_evals == scorer.calls


class TestOracleDecode:
    def setup_method(self):
        # T=12, chunk 4: labels on frames 1,3 | 6 | (none) ; <eos> on 12
        self.tokens = (5, 3, 4)
        self.frames = (1, 3, 6)
        self.t = 12

    def test_greedy_recovers_reference(self):
        scorer, c = oracle_scorer(self.tokens, self.frames, self.t, 4)
        res = chunkwise_greedy(scorer, 4)
        assert res.tokens == list(self.tokens) and not res.forced_final
        assert res.stats.label_softmax_evals == len(self.tokens) + 1
        assert res.stats.joiner_space_evals == len(self.tokens) + res.stats.chunks_entered
        assert res.eoc_frames == (3, 6)

    def test_beam_recovers_reference(self):
        scorer, _ = oracle_scorer(self.tokens, self.frames, self.t, 4)
        assert chunkwise_beam_search(scorer, 4, beam_size=4).tokens == list(self.tokens)

    def test_all_chunks_empty(self):
        scorer = TableScorer(10, 4, lambda t, p: 0.99, lambda t, p: np.array([0, 0.5, 0.25, 0.25]))
        res = chunkwise_greedy(scorer, 4)
        assert res.stats.label_softmax_evals == 0
        assert len(res.eoc_frames) == 3 == res.stats.chunks_entered

    @given(st.data())
    @settings(max_examples=50, deadline=None)
    def test_random_references(self, data):
        lc = data.draw(st.integers(2, 6))
        t = data.draw(st.integers(1, 30))
        frames = sorted(data.draw(st.lists(st.integers(1, t), max_size=12)))
        try:
            assign_to_chunks(append_eos(ForcedAlignment(tuple(frames), t)), lc)
        except ValueError:
            return
        tokens = tuple(data.draw(st.lists(st.integers(2, 6), min_size=len(frames), max_size=len(frames))))
        scorer, _ = oracle_scorer(tokens, frames, t, lc)
        res = chunkwise_greedy(scorer, lc)
        assert res.tokens == list(tokens)
        assert res.stats.label_softmax_evals == len(tokens) + 1


class TestTransducer:
    def model_scorer(self, seed, arch="transducer"):
        cfg = ModelConfig(vocab_size=6, encoder_dim=8, predictor_dim=8, joiner_dim=8, ffn_dim=8, architecture=arch, seed=seed)
        model = Model(cfg)
        rng = np.random.default_rng(seed)
        if arch != "aligner":
            model.params["joiner.b_gate"].data[...] = rng.normal(scale=1.5)
        h = model.encode(rng.normal(size=(4 * int(rng.integers(2, 12)), 8))).h_enc.data
        return ModelScorer(model, h)

    def test_beam_one_matches_greedy(self):
        for seed in range(100):
            g = transducer_greedy(self.model_scorer(seed))
            b = transducer_beam(self.model_scorer(seed), beam_size=1)
            assert g.tokens == b.tokens
            assert g.score == pytest.approx(b.score, abs=1e-9)

    def test_visits_every_frame(self):
        for seed in range(10):
            s = self.model_scorer(seed)
            res = transducer_greedy(s)
            assert res.stats.joiner_space_evals >= s.num_frames
            assert res.stats.frames_visited == s.num_frames

    def test_certain_blank_emits_nothing(self):
        scorer = TableScorer(5, 4, lambda t, p: 0.8, lambda t, p: np.array([0, 0, 1.0, 0]))
        res = transducer_greedy(scorer)
        assert res.tokens == [] and res.stats.label_softmax_evals == 0
        assert res.score == pytest.approx(5 * math.log(0.8))

    def test_one_label_per_frame(self):
        def gate(t, p):
            return 0.1 if len(p) == t + 1 else 0.9

        scorer = TableScorer(3, 5, gate, lambda t, p: np.array([0, 0, 0, 1.0, 0]))
        assert transducer_greedy(scorer).tokens == [3, 3, 3]
        assert transducer_beam(scorer, beam_size=4).tokens == [3, 3, 3]

    def test_max_symbols_cap(self):
        scorer = TableScorer(2, 4, lambda t, p: 0.01, lambda t, p: np.array([0, 0, 1.0, 0]))
        assert len(transducer_greedy(scorer, max_symbols=3).tokens) == 6

    def test_beam_merges_duplicates(self):
        scorer = random_table_scorer(11, 5, 4, gate_scale=1.0)
        res = transducer_beam(scorer, beam_size=6)
        seqs = [h.tokens for h in res.hypotheses]
        assert len(seqs) == len(set(seqs))


class TestAligner:
    def test_stops_at_eos(self):
        def dist(t, p):
            return np.array([0, 0.9, 0.1, 0]) if t == 2 else np.array([0, 0.0, 0.2, 0.8])

        res = aligner_decode(TableScorer(5, 4, None, dist))
        assert res.tokens == [3, 3]
        assert res.stats.label_softmax_evals == 3 and not res.truncated

    def test_truncation(self):
        res = aligner_decode(TableScorer(3, 4, None, lambda t, p: np.array([0, 0, 1.0, 0])))
        assert res.truncated and res.tokens == [2, 2, 2]

    def test_max_len_bound(self):
        with pytest.raises(ValueError):
            aligner_decode(TableScorer(3, 4, None, None), max_len=4)

    def test_chunkwise_degenerates_to_aligner(self):
        for seed in range(20):
            cfg = ModelConfig(vocab_size=6, encoder_dim=8, predictor_dim=8, joiner_dim=8, ffn_dim=8, seed=seed)
            model = Model(cfg)
            model.params["joiner.b_gate"].data[...] = -40.0  # EOC numerically zero: 1 - eoc == 1.0
            rng = np.random.default_rng(seed)
            h = model.encode(rng.normal(size=(4 * int(rng.integers(2, 10)), 8))).h_enc.data
            t = h.shape[0]
            a = aligner_decode(ModelScorer(model, h), max_len=t)
            c = chunkwise_greedy(ModelScorer(model, h), chunk_len=t, tau=1 - 1e-9)
            assert a.tokens == c.tokens
            assert a.score == c.score

    def test_greedy_equals_beam_one(self):
        for seed in range(30):
            s = random_table_scorer(seed, 6, 5)
            assert aligner_decode(s).tokens == aligner_decode(s, beam_size=1).tokens

    def test_beam_at_least_greedy_score(self):
        for seed in range(10):
            s = random_table_scorer(seed, 5, 4)
            g = aligner_decode(s)
            b = aligner_decode(s, beam_size=8)
            if not g.truncated and not b.truncated:
                assert b.score >= g.score - 1e-12


def test_stats_as_dict():
    assert DecodeStats(joiner_space_evals=3).as_dict()["joiner_space_evals"] == 3
