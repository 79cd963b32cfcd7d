import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkaligner import tensor as T
from chunkaligner.alignment import ForcedAlignment
from chunkaligner.losses import (
    TransducerGrid,
    aligner_ce,
    brute_force_transducer,
    chunkwise_label_ce,
    eoc_bce,
    label_ce,
    total_chunkwise_loss,
    transducer_full_sum,
    transducer_grid,
    transducer_loss_batch,
)
from chunkaligner.model import EOS, JoinerOutputs, Model, ModelConfig
from chunkaligner.synthdata import SynthTaskConfig, Utterance, generate_split
from chunkaligner.tensor import Tape, Tensor, backward, grad_check
from chunkaligner.train import aligner_loss, chunkwise_loss, transducer_loss


def random_grid(rng, t, u_max, v):
    gate = rng.uniform(0.05, 0.95, size=(t, u_max + 1))
    logits = rng.normal(size=(t, u_max + 1, v))
    dist = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    return transducer_grid(JoinerOutputs(Tensor(dist), Tensor(gate)))


def recursive_path_sum(lb, ll, labels, t=0, u=0):
    """Probability-domain sum over paths, written as a plain recursion."""
    t_len = lb.shape[0]
    if t == t_len - 1 and u == len(labels):
        return math.exp(lb[t, u])
    total = 0.0
    if t < t_len - 1:
        total += math.exp(lb[t, u]) * recursive_path_sum(lb, ll, labels, t + 1, u)
    if u < len(labels):
        total += math.exp(ll[t, u, labels[u]]) * recursive_path_sum(lb, ll, labels, t, u + 1)
    return total


class TestTransducer:
    def test_two_frames_one_label(self):
        grid = transducer_grid(JoinerOutputs(Tensor(np.full((2, 2, 2), 0.5)), Tensor(np.full((2, 2), 0.5))))
        loss = transducer_full_sum(grid, [0]).item()
        assert loss == pytest.approx(-math.log(0.125), abs=1e-12)
        assert brute_force_transducer(grid, [0]) == pytest.approx(2.0794415416798357, abs=1e-12)

    def test_no_labels_is_all_blank(self, rng):
        grid = random_grid(rng, 4, 2, 3)
        expected = -grid.log_blank.data[:, 0].sum()
        assert transducer_full_sum(grid, []).item() == pytest.approx(expected, abs=1e-12)

    def test_single_frame_blank(self, rng):
        grid = random_grid(rng, 1, 0, 2)
        assert brute_force_transducer(grid, []) == pytest.approx(-grid.log_blank.data[0, 0], abs=1e-14)

    def test_grid_normalized(self, rng):
        assert random_grid(rng, 3, 2, 4).normalization_error() < 1e-12

    def test_matches_brute_force_many(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(300):
            t, u, v = rng.integers(1, 5), rng.integers(0, 4), rng.integers(1, 4)
            grid = random_grid(rng, t, u, v)
            labels = rng.integers(0, v, size=u).tolist()
            worst = max(worst, abs(transducer_full_sum(grid, labels).item() - brute_force_transducer(grid, labels)))
        assert worst < 1e-10

    @given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 3), st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_brute_force_matches_recursion(self, t, u, v, seed):
        rng = np.random.default_rng(seed)
        grid = random_grid(rng, t, u, v)
        labels = rng.integers(0, v, size=u).tolist()
        ref = -math.log(recursive_path_sum(grid.log_blank.data, grid.log_label.data, labels))
        assert brute_force_transducer(grid, labels) == pytest.approx(ref, abs=1e-10)

    def test_label_permutation_symmetry(self, rng):
        grid = random_grid(rng, 3, 2, 3)
        perm = np.array([2, 0, 1])
        permuted = TransducerGrid(grid.log_blank, Tensor(grid.log_label.data[..., np.argsort(perm)]))
        labels = [0, 2]
        a = brute_force_transducer(grid, labels)
        b = brute_force_transducer(permuted, [int(perm[k]) for k in labels])
        assert a == pytest.approx(b, abs=1e-14)

    def test_too_many_labels(self, rng):
        with pytest.raises(ValueError):
            transducer_full_sum(random_grid(rng, 2, 1, 2), [0, 1])

    def test_brute_force_size_limit(self, rng):
        with pytest.raises(ValueError):
            brute_force_transducer(random_grid(rng, 10, 3, 2), [0, 1, 0])

    def test_batch_padding_matches_individual(self, rng):
        grids = [random_grid(rng, 4, 3, 3), random_grid(rng, 2, 1, 3)]
        labels = [[0, 2, 1], [1]]
        lb = np.full((2, 4, 4), -5.0)
        lt = np.full((2, 4, 3), -5.0)
        for b, (g, y) in enumerate(zip(grids, labels)):
            t, u = g.num_frames, len(y)
            lb[b, :t, : u + 1] = g.log_blank.data[:, : u + 1]
            lt[b, :t, :u] = g.log_label.data[np.arange(t)[:, None], np.arange(u)[None], np.array(y)[None]]
        out = transducer_loss_batch(Tensor(lb), Tensor(lt), [4, 2], [3, 1]).data
        for b, (g, y) in enumerate(zip(grids, labels)):
            assert out[b] == pytest.approx(brute_force_transducer(g, y), abs=1e-10)

    def test_gradient_through_batch(self, rng):
        lb = Tensor(np.log(rng.uniform(0.1, 0.9, size=(2, 3, 3))))
        lt = Tensor(np.log(rng.uniform(0.05, 0.5, size=(2, 3, 2))))
        w = Tensor(np.array([1.0, 0.5]))
        f = lambda: T.tsum(transducer_loss_batch(lb, lt, [3, 2], [2, 1]) * w)  # noqa: E731
        assert grad_check(f, [lb, lt], eps=1e-6) < 1e-6

    def test_padding_gets_no_gradient(self, rng):
        lb = Tensor(np.log(rng.uniform(0.1, 0.9, size=(1, 4, 3))))
        lt = Tensor(np.log(rng.uniform(0.05, 0.5, size=(1, 4, 2))))
        with Tape() as tape:
            loss = T.tsum(transducer_loss_batch(lb, lt, [2], [1]))
        g = backward(tape, loss)
        assert np.all(g[lb][0, 2:] == 0) and np.all(g[lb][0, :, 2:] == 0)
        assert np.all(g[lt][0, :, 1:] == 0)


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        d = Tensor(np.eye(4)[[1, 3, 0]])
        assert chunkwise_label_ce(d, [1, 3, 0]).item() == 0.0

    def test_uniform_closed_form(self):
        d = Tensor(np.full((3, 4), 0.25))
        assert chunkwise_label_ce(d, [0, 1, 2]).item() == pytest.approx(3 * math.log(4), abs=1e-12)
        assert aligner_ce(d, [0, 1, 2], 5).item() == pytest.approx(4.1588830833596715, abs=1e-12)

    def test_scalar_loop_oracle(self, rng):
        d = rng.dirichlet(np.ones(6), size=5)
        y = rng.integers(0, 6, size=5)
        ref = 0.0
        for u in range(5):
            ref -= math.log(d[u, y[u]])
        assert label_ce(Tensor(d), y).item() == pytest.approx(ref, abs=1e-12)

    def test_zero_probability_is_finite(self):
        d = Tensor(np.array([[1.0, 0.0]]))
        assert label_ce(d, [1]).item() == pytest.approx(-math.log(1e-12))

    def test_aligner_needs_enough_frames(self):
        with pytest.raises(ValueError):
            aligner_ce(Tensor(np.full((3, 2), 0.5)), [0, 1, 0], 2)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            label_ce(Tensor(np.full((1, 2), 0.5)), [2])


class TestEocBce:
    def test_perfect(self):
        t = [0, 0, 1, 0, 1]
        assert eoc_bce(Tensor(np.array(t, float)), t).item() == pytest.approx(0.0, abs=1e-10)

    def test_half(self):
        assert eoc_bce(Tensor(np.full(6, 0.5)), [0, 1, 0, 0, 1, 1]).item() == pytest.approx(6 * math.log(2), abs=1e-12)

    def test_scalar_loop_oracle(self, rng):
        p = rng.uniform(0.01, 0.99, size=9)
        t = rng.integers(0, 2, size=9)
        ref = -sum(ti * math.log(pi) + (1 - ti) * math.log(1 - pi) for pi, ti in zip(p, t))
        assert eoc_bce(Tensor(p), t.tolist()).item() == pytest.approx(ref, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(T.ShapeError):
            eoc_bce(Tensor(np.full(3, 0.5)), [0, 1])


def test_total_is_plain_sum():
    r = total_chunkwise_loss(Tensor(2.0), Tensor(3.0), {"chunkwise": 7})
    assert r.value == 5.0
    assert r.components == {"label": 2.0, "eoc": 3.0}
    assert r.as_dict()["grid_entries"] == {"chunkwise": 7}


# ---------------------------------------------------------------- end-to-end


TINY_TASK = SynthTaskConfig(
    vocab_size=4, feature_dim=3, min_duration=2, max_duration=5, min_tokens=2, max_tokens=4,
    frame_reduction=2, chunk_len=4, seed=3,
)


def tiny_model(arch, seed=1):
    return Model(
        ModelConfig(
            feature_dim=3, vocab_size=TINY_TASK.model_vocab_size, encoder_dim=8, predictor_dim=6,
            joiner_dim=6, ffn_dim=8, frame_reduction=2, architecture=arch, seed=seed,
        )
    )


@pytest.fixture(scope="module")
def tiny_batch():
    return generate_split(TINY_TASK, "train", 2)


@pytest.mark.parametrize("arch", ["chunkwise", "transducer", "aligner"])
def test_end_to_end_gradients(arch, tiny_batch):
    model = tiny_model(arch)
    losses = {
        "chunkwise": lambda: chunkwise_loss(model, tiny_batch, 4).total,
        "transducer": lambda: transducer_loss(model, tiny_batch).total,
        "aligner": lambda: aligner_loss(model, tiny_batch).total,
    }
    # loss ~10 at eps 1e-5 leaves ~1e-10 of difference noise; judge entries below 1e-6 absolutely
    assert grad_check(losses[arch], model.parameters(), eps=1e-5, floor=1e-6) < 1e-4


def test_chunkwise_report_counts(tiny_batch):
    report = chunkwise_loss(tiny_model("chunkwise"), tiny_batch, 4)
    assert report.value == pytest.approx(report.components["label"] + report.components["eoc"], abs=1e-12)
    v = TINY_TASK.model_vocab_size
    expected = sum((len(u.tokens) + 1) * v + len(u.tokens) + 1 + -(-u.num_frames // 4) for u in tiny_batch)
    assert report.grid_entries["chunkwise"] == expected


def test_uniform_initial_loss_closed_form(tiny_batch):
    model = tiny_model("chunkwise")
    for k in ("W_label", "b_label", "w_gate", "b_gate"):
        model.params["joiner." + k].data[...] = 0.0
    report = chunkwise_loss(model, tiny_batch, 4)
    v = TINY_TASK.model_vocab_size
    expected = 0.0
    for u in tiny_batch:
        n_labels = len(u.tokens) + 1
        expected += n_labels * math.log(v) + (n_labels + -(-u.num_frames // 4)) * math.log(2)
    assert report.value == pytest.approx(expected / len(tiny_batch), abs=1e-10)


def test_single_chunk_degeneracy(rng):
    tokens = (3, 5, 2, 4)
    t_frames = 8
    feats = rng.normal(size=(t_frames * 2, 3))
    diag = Utterance("diag", feats, tokens, ForcedAlignment(tuple(range(1, len(tokens) + 1)), t_frames))
    model = tiny_model("chunkwise", seed=5)
    chunk = chunkwise_loss(model, [diag, diag], chunk_len=t_frames)
    align = aligner_loss(model, [diag, diag])
    assert chunk.components["label"] == align.components["label"]
