import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkaligner.model import Model, ModelConfig
from chunkaligner.synthdata import SynthTaskConfig, generate_dataset
from chunkaligner.train import (
    DivergenceError,
    Optimizer,
    TrainConfig,
    batch_loss,
    chunkwise_assignments,
    lr_at,
    train,
)
from chunkaligner.tensor import Tensor

TASK = SynthTaskConfig(vocab_size=4, feature_dim=3, min_duration=4, max_duration=8, min_tokens=2, max_tokens=4,
                       chunk_len=4, seed=2)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(TASK, sizes=(24, 6, 6))


def tiny_model(arch, seed=0):
    return Model(ModelConfig(feature_dim=3, vocab_size=TASK.model_vocab_size, encoder_dim=8, predictor_dim=8,
                             joiner_dim=8, ffn_dim=8, architecture=arch, seed=seed))


def tiny_train(arch, **kw):
    base = dict(architecture=arch, chunk_len=4, batch_size=4, steps=8, warmup_steps=2, eval_every=4,
                eval_utterances=6)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_warmup_is_linear(self):
        cfg = TrainConfig(warmup_steps=100, peak_lr=1e-3)
        assert lr_at(50, cfg) == pytest.approx(5e-4)
        assert lr_at(100, cfg) == pytest.approx(1e-3)

    def test_inverse_sqrt(self):
        cfg = TrainConfig(warmup_steps=100, peak_lr=1e-3, lr_decay="inverse_sqrt")
        assert lr_at(400, cfg) == pytest.approx(5e-4)

    def test_cosine_ends_at_zero(self):
        cfg = TrainConfig(warmup_steps=100, peak_lr=1e-3, steps=1100, lr_decay="cosine")
        assert lr_at(600, cfg) == pytest.approx(5e-4)
        assert lr_at(1100, cfg) == pytest.approx(0.0, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5000), st.sampled_from(["inverse_sqrt", "cosine"]))
    def test_bounded_by_peak(self, step, decay):
        cfg = TrainConfig(steps=3000, lr_decay=decay)
        assert 0.0 <= lr_at(step, cfg) <= cfg.peak_lr

    def test_unknown_decay(self):
        with pytest.raises(ValueError):
            Optimizer({}, TrainConfig(lr_decay="step"))


class TestOptimizer:
    def test_clipping_limits_update(self):
        p = {"w": Tensor(np.zeros(3))}
        cfg = TrainConfig(optimizer="momentum", momentum=0.0, grad_clip=1.0, warmup_steps=1, peak_lr=1.0)
        opt = Optimizer(p, cfg)
        norm = opt.step({p["w"]: np.array([30.0, 40.0, 0.0])})
        assert norm == pytest.approx(50.0)
        np.testing.assert_allclose(p["w"].data, [-0.6, -0.8, 0.0])

    def test_weight_decay_skips_vectors(self):
        p = {"W": Tensor(np.ones((2, 2))), "b": Tensor(np.ones(2))}
        cfg = TrainConfig(optimizer="momentum", weight_decay=0.5, warmup_steps=1, peak_lr=0.1)
        Optimizer(p, cfg).step({p["W"]: np.zeros((2, 2)), p["b"]: np.zeros(2)})
        np.testing.assert_allclose(p["W"].data, 0.95)
        np.testing.assert_allclose(p["b"].data, 1.0)

    def test_nonfinite_gradient(self):
        p = {"w": Tensor(np.zeros(2))}
        with pytest.raises(DivergenceError):
            Optimizer(p, TrainConfig()).step({p["w"]: np.array([np.nan, 0.0])})


@pytest.mark.parametrize("arch", ["chunkwise", "transducer", "aligner"])
def test_training_lowers_loss(arch, tiny_data):
    model = tiny_model(arch)
    batch = tiny_data["train"][:8]
    cfg = tiny_train(arch, steps=30, eval_every=1000, peak_lr=1e-2)
    before = batch_loss(model, batch, cfg).value
    train(model, batch, [], cfg)
    assert batch_loss(model, batch, cfg).value < before


def test_deterministic(tiny_data):
    a, b = tiny_model("chunkwise"), tiny_model("chunkwise")
    cfg = tiny_train("chunkwise", feature_noise=0.1)
    ra = train(a, tiny_data["train"], tiny_data["dev"], cfg)
    rb = train(b, tiny_data["train"], tiny_data["dev"], cfg)
    assert ra.history == [{**h, "wall": r["wall"]} for h, r in zip(rb.history, ra.history)]
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_restores_best_dev(tiny_data):
    model = tiny_model("chunkwise")
    cfg = tiny_train("chunkwise", eval_every=2)
    res = train(model, tiny_data["train"], tiny_data["dev"], cfg)
    assert res.best_dev_ter == min(h["dev_ter"] for h in res.history)
    assert len(res.history) == 4


def test_log_file(tiny_data, tmp_path):
    log = tmp_path / "log.jsonl"
    train(tiny_model("transducer"), tiny_data["train"], tiny_data["dev"], tiny_train("transducer"), log_path=log)
    lines = log.read_text().splitlines()
    assert len(lines) == 2 and '"dev_ter"' in lines[0]


def test_divergence_raised(tiny_data):
    model = tiny_model("chunkwise")
    model.params["joiner.b_label"].data[...] = np.nan
    with pytest.raises(FloatingPointError):  # DivergenceError or the tape's NonFiniteError
        train(model, tiny_data["train"], [], tiny_train("chunkwise"))


def test_architecture_mismatch(tiny_data):
    with pytest.raises(ValueError):
        train(tiny_model("transducer"), tiny_data["train"], [], tiny_train("chunkwise"))


def test_delay_moves_labels_later():
    sparse = dataclasses.replace(TASK, min_duration=8, max_duration=12)
    batch = generate_dataset(sparse, sizes=(12, 1, 1))["train"]
    base = [c.counts for _, c in chunkwise_assignments(batch, 4)]
    late = [c.counts for _, c in chunkwise_assignments(batch, 4, delay=3, repair=True)]
    assert base != late
    # a label can only move to the same or a later chunk, so prefix sums never grow
    for b, d in zip(base, late):
        assert all(x >= y for x, y in zip(np.cumsum(b), np.cumsum(d)))
    model = tiny_model("chunkwise")
    cfg = tiny_train("chunkwise", delay_frames=3, repair_spill=True)
    assert math.isfinite(batch_loss(model, batch[:4], cfg).value)
