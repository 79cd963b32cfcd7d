"""Batched training forward passes, optimizers and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
import dataclasses
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .alignment import append_eos, apply_delay, assign_to_chunks, build_joiner_pairs, num_chunks
from .decoding import ModelScorer, aligner_decode, chunkwise_greedy, transducer_greedy
from .losses import (
    LossReport,
    aligner_ce,
    chunkwise_label_ce,
    clipped_log,
    eoc_bce,
    total_chunkwise_loss,
    transducer_loss_batch,
)
from .model import EOS, SOS, Model, gate_head, hat_joiner_grid, joiner_space, label_head
from .synthdata import Utterance, token_error_rate
from .tensor import Tensor

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    """Optimization settings.

    ``weight_decay`` is decoupled and touches matrices only;
    ``feature_noise`` adds fresh Gaussian noise to each training batch.
    """

    architecture: str = "chunkwise"
    chunk_len: int = 8
    delay_frames: int = 0
    repair_spill: bool = False
    batch_size: int = 16
    steps: int = 4000
    warmup_steps: int = 300
    peak_lr: float = 3e-3
    lr_decay: str = "cosine"
    optimizer: str = "adam"
    momentum: float = 0.9
    grad_clip: float = 5.0
    weight_decay: float = 0.0
    feature_noise: float = 0.0
    eval_every: int = 500
    eval_utterances: int = 100
    tau: float = 0.5
    seed: int = 0


def pad_features(utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([u.num_raw_frames for u in utts])
    dim = utts[0].features.shape[1]
    out = np.zeros((len(utts), lengths.max(), dim))
    for i, u in enumerate(utts):
        out[i, : lengths[i]] = u.features
    return out, lengths


def pad_tokens(seqs: Sequence[Sequence[int]], fill: int = EOS) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _encode(model: Model, utts: Sequence[Utterance]) -> tuple[Tensor, np.ndarray]:
    feats, raw = pad_features(utts)
    h, lengths, _ = model.encode_batch(feats, raw)
    for u, t in zip(utts, lengths):
        if u.num_frames != t:
            raise ValueError(f"{u.id}: alignment covers {u.num_frames} frames, encoder gives {t}")
    return h, lengths


def chunkwise_assignments(utts: Sequence[Utterance], chunk_len: int, delay: int = 0, repair: bool = False):
    """(labels with ``<eos>``, chunk assignment) per utterance."""
    out = []
    for u in utts:
        a = append_eos(apply_delay(u.alignment, delay))
        out.append((list(u.tokens) + [EOS], assign_to_chunks(a, chunk_len, repair=repair)))
    return out


def chunkwise_loss(
    model: Model, utts: Sequence[Utterance], chunk_len: int, delay: int = 0, repair: bool = False
) -> LossReport:
    """Label CE on the ``U x V`` grid plus EOC BCE on the ``(U+N)`` grid, batch-averaged."""
    h_enc, _ = _encode(model, utts)
    bsz, t_max, de = h_enc.shape
    assigned = chunkwise_assignments(utts, chunk_len, delay, repair)
    pred_in = pad_tokens([[SOS] + labels for labels, _ in assigned])
    h_pred = model.predictor_sequence(pred_in)
    width = pred_in.shape[1]

    enc_idx, pred_idx, eoc_t, label_rows, label_t = [], [], [], [], []
    entries = {"chunkwise": 0, "transducer": 0}
    vocab = model.config.vocab_size
    for b, (labels, c) in enumerate(assigned):
        for pair in build_joiner_pairs(c, labels):
            if pair.kind == "label":
                label_rows.append(len(enc_idx))
                label_t.append(pair.target)
            eoc_t.append(1 if pair.kind == "eoc" else 0)
            enc_idx.append(b * t_max + pair.frame - 1)
            pred_idx.append(b * width + pair.pred_step - 1)
        u = len(labels)
        entries["chunkwise"] += u * vocab + u + c.num_chunks
        entries["transducer"] += c.num_frames * u * (vocab + 1)

    p = model.joiner
    he = T.take(T.reshape(h_enc, (bsz * t_max, de)), enc_idx)
    hp = T.take(T.reshape(h_pred, (bsz * width, h_pred.shape[2])), pred_idx)
    hj = joiner_space(he, hp, p)
    eoc = gate_head(hj, p)
    dists = label_head(T.take(hj, label_rows), p)
    label_loss = chunkwise_label_ce(dists, label_t) / bsz
    eoc_loss = eoc_bce(eoc, eoc_t) / bsz
    return total_chunkwise_loss(label_loss, eoc_loss, entries)


def transducer_loss(model: Model, utts: Sequence[Utterance]) -> LossReport:
    """Full-sum HAT loss over the ``T x (U+1)`` lattice, batch-averaged."""
    h_enc, lengths = _encode(model, utts)
    labels = [list(u.tokens) for u in utts]
    pred_in = pad_tokens([[SOS] + y for y in labels])
    h_pred = model.predictor_sequence(pred_in)
    out = hat_joiner_grid(h_enc, h_pred, model.joiner)
    bsz, t_max, u1 = out.gate.shape
    targets = pred_in[:, 1:]
    bi, ti, ui = np.meshgrid(np.arange(bsz), np.arange(t_max), np.arange(u1 - 1), indexing="ij")
    picked = out.label_dist[bi, ti, ui, targets[bi, ui]]
    keep = T.sub(1.0, out.gate[:, :, : u1 - 1])
    log_blank = clipped_log(out.gate)
    log_target = clipped_log(keep * picked)
    per_utt = transducer_loss_batch(log_blank, log_target, lengths, [len(y) for y in labels])
    loss = T.tsum(per_utt) / bsz
    vocab = model.config.vocab_size
    entries = {"transducer": int(sum(t * len(y) * (vocab + 1) for t, y in zip(lengths, labels)))}
    return LossReport(loss, {"transducer": loss.item()}, entries)


def aligner_loss(model: Model, utts: Sequence[Utterance]) -> LossReport:
    """Cross-entropy on the diagonal pairs (frame u, predictor step u), ``<eos>`` included."""
    h_enc, lengths = _encode(model, utts)
    bsz, t_max, de = h_enc.shape
    labels = [list(u.tokens) + [EOS] for u in utts]
    pred_in = pad_tokens([[SOS] + y for y in labels])
    h_pred = model.predictor_sequence(pred_in)
    width = pred_in.shape[1]
    enc_idx, pred_idx, targets = [], [], []
    for b, y in enumerate(labels):
        if lengths[b] < len(y):
            raise ValueError(f"Aligner needs T >= U (T={lengths[b]}, U={len(y)})")
        enc_idx += [b * t_max + j for j in range(len(y))]
        pred_idx += [b * width + j for j in range(len(y))]
        targets += y
    p = model.joiner
    he = T.take(T.reshape(h_enc, (bsz * t_max, de)), enc_idx)
    hp = T.take(T.reshape(h_pred, (bsz * width, h_pred.shape[2])), pred_idx)
    dists = label_head(joiner_space(he, hp, p), p)
    loss = aligner_ce(dists, targets, len(targets)) / bsz
    vocab = model.config.vocab_size
    return LossReport(loss, {"label": loss.item()}, {"aligner": len(targets) * vocab})


def batch_loss(model: Model, utts: Sequence[Utterance], cfg: TrainConfig) -> LossReport:
    if cfg.architecture == "chunkwise":
        return chunkwise_loss(model, utts, cfg.chunk_len, cfg.delay_frames, cfg.repair_spill)
    if cfg.architecture == "transducer":
        return transducer_loss(model, utts)
    if cfg.architecture == "aligner":
        return aligner_loss(model, utts)
    raise ValueError(f"unknown architecture {cfg.architecture!r}")


def usable(utts: Sequence[Utterance], cfg: TrainConfig) -> list[Utterance]:
    """Drop utterances the architecture cannot train on (Aligner: T < U+1)."""
    if cfg.architecture == "aligner":
        return [u for u in utts if u.num_frames >= len(u.tokens) + 1]
    return list(utts)


# ---------------------------------------------------------------- optimizers


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr``, then inverse-square-root or cosine decay.

    The cosine schedule reaches zero at ``cfg.steps``.
    """
    s = max(step, 1)
    w = max(cfg.warmup_steps, 1)
    if s < w:
        return cfg.peak_lr * s / w
    if cfg.lr_decay == "cosine":
        frac = min((s - w) / max(cfg.steps - w, 1), 1.0)
        return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.peak_lr * math.sqrt(w / s)


class Optimizer:
    """Adam or heavy-ball momentum over a parameter dict, with global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        if cfg.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
        if cfg.lr_decay not in ("inverse_sqrt", "cosine"):
            raise ValueError(f"unknown lr_decay {cfg.lr_decay!r}")
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: T.Gradients) -> float:
        cfg = self.cfg
        self.step_count += 1
        g = {k: grads[p] for k, p in self.params.items()}
        norm = math.sqrt(sum(float((x * x).sum()) for x in g.values()))
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient norm")
        scale = min(1.0, cfg.grad_clip / norm) if cfg.grad_clip and norm > 0 else 1.0
        lr = lr_at(self.step_count, cfg)
        for k, p in self.params.items():
            gk = g[k] * scale
            if cfg.optimizer == "adam":
                b1, b2 = 0.9, 0.98
                self.m[k] = b1 * self.m[k] + (1 - b1) * gk
                self.v[k] = b2 * self.v[k] + (1 - b2) * gk * gk
                mh = self.m[k] / (1 - b1**self.step_count)
                vh = self.v[k] / (1 - b2**self.step_count)
                p.data -= lr * mh / (np.sqrt(vh) + 1e-9)
            else:
                self.m[k] = cfg.momentum * self.m[k] + gk
                p.data -= lr * self.m[k]
            if cfg.weight_decay and p.data.ndim >= 2:
                p.data -= lr * cfg.weight_decay * p.data  # decoupled, matrices only
        return norm


# ---------------------------------------------------------------- decoding helpers


def decode_utterance(model: Model, utt: Utterance, cfg: TrainConfig, beam_size: int = 1):
    from .decoding import chunkwise_beam_search, transducer_beam

    h = model.encode(utt.features).h_enc.data
    scorer = ModelScorer(model, h)
    arch = model.config.architecture
    if arch == "chunkwise":
        if beam_size == 1:
            return chunkwise_greedy(scorer, cfg.chunk_len, cfg.tau)
        return chunkwise_beam_search(scorer, cfg.chunk_len, beam_size, cfg.tau)
    if arch == "transducer":
        return transducer_greedy(scorer) if beam_size == 1 else transducer_beam(scorer, beam_size)
    return aligner_decode(scorer, beam_size=beam_size)


def evaluate_ter(model: Model, utts: Sequence[Utterance], cfg: TrainConfig, beam_size: int = 1) -> float:
    hyps = [decode_utterance(model, u, cfg, beam_size).tokens for u in utts]
    return token_error_rate([list(u.tokens) for u in utts], hyps)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: Model
    best_dev_ter: float
    final_loss: float
    steps: int
    seconds: float
    history: list[dict]


def train(
    model: Model,
    train_utts: Sequence[Utterance],
    dev_utts: Sequence[Utterance],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place and restore the parameters with the best dev TER."""
    if model.config.architecture != cfg.architecture:
        raise ValueError("model and training architectures differ")
    rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    data = usable(train_utts, cfg)
    dev = usable(dev_utts, cfg)[: cfg.eval_utterances]
    if not data:
        raise ValueError("no usable training utterances")
    opt = Optimizer(model.params, cfg)
    history: list[dict] = []
    best = (math.inf, None)
    start = time.perf_counter()
    log_fh = open(log_path, "w") if log_path else None
    order = rng.permutation(len(data))
    cursor = 0
    loss_value = math.nan
    try:
        for step in range(1, cfg.steps + 1):
            if cursor + cfg.batch_size > len(order):
                order = rng.permutation(len(data))
                cursor = 0
            batch = [data[i] for i in order[cursor : cursor + cfg.batch_size]]
            cursor += cfg.batch_size
            if cfg.feature_noise:
                batch = [
                    dataclasses.replace(u, features=u.features + noise_rng.normal(0.0, cfg.feature_noise, u.features.shape))
                    for u in batch
                ]
            with T.Tape() as tape:
                report = batch_loss(model, batch, cfg)
            loss_value = report.value
            if not math.isfinite(loss_value):
                raise DivergenceError(f"loss became {loss_value} at step {step}")
            grads = T.backward(tape, report.total)
            norm = opt.step(grads)
            if step % cfg.eval_every == 0 or step == cfg.steps:
                record = {
                    "step": step,
                    **report.as_dict(),
                    "grad_norm": norm,
                    "lr": lr_at(step, cfg),
                    "wall": time.perf_counter() - start,
                }
                if dev:
                    ter = evaluate_ter(model, dev, cfg)
                    record["dev_ter"] = ter
                    if ter <= best[0]:
                        best = (ter, {k: p.data.copy() for k, p in model.params.items()})
                history.append(record)
                logger.info("step %d loss %.4f dev_ter %s", step, loss_value, record.get("dev_ter"))
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if on_log:
                    on_log(record)
    finally:
        if log_fh:
            log_fh.close()
    if best[1] is not None:
        for k, p in model.params.items():
            p.data[...] = best[1][k]
    return TrainResult(model, best[0], loss_value, cfg.steps, time.perf_counter() - start, history)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


__all__ = [
    "TrainConfig",
    "TrainResult",
    "DivergenceError",
    "chunkwise_loss",
    "transducer_loss",
    "aligner_loss",
    "batch_loss",
    "train",
    "evaluate_ter",
    "decode_utterance",
    "lr_at",
    "num_chunks",
]
