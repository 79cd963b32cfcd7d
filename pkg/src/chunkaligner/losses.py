"""Training objectives: Transducer full-sum, Aligner CE, chunkwise CE + EOC BCE."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .alignment import EocEntry
from .model import JoinerOutputs
from .tensor import Tensor

PROB_FLOOR = 1e-12


def clipped_log(p: Tensor, upper: float = 1.0) -> Tensor:
    return T.log(T.clip(p, PROB_FLOOR, upper))


# ---------------------------------------------------------------- cross-entropies


def label_ce(label_dists: Tensor, targets: Sequence[int]) -> Tensor:
    """-sum_u log p_u(y_u) over ``(U, V)`` distributions."""
    targets = np.asarray(targets, dtype=np.int64)
    if label_dists.ndim != 2 or label_dists.shape[0] != len(targets):
        raise T.ShapeError(f"{label_dists.shape} distributions for {len(targets)} targets")
    if len(targets) == 0:
        return Tensor(0.0)
    if targets.min() < 0 or targets.max() >= label_dists.shape[1]:
        raise ValueError("target token outside the vocabulary")
    picked = label_dists[np.arange(len(targets)), targets]
    return T.neg(T.tsum(clipped_log(picked)))


def chunkwise_label_ce(label_dists: Tensor, targets: Sequence[int]) -> Tensor:
    """Cross-entropy over the ``U x V`` chunkwise label grid."""
    return label_ce(label_dists, targets)


def aligner_ce(label_dists: Tensor, targets: Sequence[int], num_frames: int) -> Tensor:
    """Cross-entropy over the diagonal (frame u, predictor step u) pairs."""
    if num_frames < len(targets):
        raise ValueError(f"Aligner needs T >= U, got T={num_frames}, U={len(targets)}")
    return label_ce(label_dists, targets)


def eoc_bce(eoc_probs: Tensor, targets: Sequence[int] | Sequence[EocEntry]) -> Tensor:
    """Binary cross-entropy of EOC probabilities against 0/1 targets."""
    tgt = np.asarray([e.target if isinstance(e, EocEntry) else e for e in targets], dtype=np.float64)
    if eoc_probs.shape != tgt.shape:
        raise T.ShapeError(f"{eoc_probs.shape} EOC probabilities for {tgt.shape} targets")
    if tgt.size == 0:
        return Tensor(0.0)
    # t*p + (1-t)*(1-p) selects p or 1-p exactly for 0/1 targets
    q = eoc_probs * Tensor._wrap(2.0 * tgt - 1.0) + Tensor._wrap(1.0 - tgt)
    return T.neg(T.tsum(clipped_log(q, 1.0 - PROB_FLOOR)))


@dataclass
class LossReport:
    total: Tensor
    components: dict[str, float]
    grid_entries: dict[str, int] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()

    def as_dict(self) -> dict:
        return {"loss": self.value, **self.components, "grid_entries": dict(self.grid_entries)}


def total_chunkwise_loss(
    label_loss: Tensor, eoc_loss: Tensor, grid_entries: dict[str, int] | None = None
) -> LossReport:
    """Unweighted sum of the label CE and EOC BCE."""
    total = label_loss + eoc_loss
    comps = {"label": label_loss.item(), "eoc": eoc_loss.item()}
    return LossReport(total, comps, dict(grid_entries or {}))


# ---------------------------------------------------------------- transducer


@dataclass
class TransducerGrid:
    """Log-probabilities on the ``T x (U+1)`` lattice.

    ``log_blank`` is ``(T, U+1)``; ``log_label`` is ``(T, U+1, V)``.
    """

    log_blank: Tensor
    log_label: Tensor

    @property
    def num_frames(self) -> int:
        return self.log_blank.shape[0]

    @property
    def max_labels(self) -> int:
        return self.log_blank.shape[1] - 1

    def normalization_error(self) -> float:
        total = np.exp(self.log_blank.data) + np.exp(self.log_label.data).sum(axis=-1)
        return float(np.abs(total - 1.0).max())


def transducer_grid(out: JoinerOutputs) -> TransducerGrid:
    """Factor HAT outputs into blank and per-label log-probabilities."""
    gate = out.gate
    keep = T.sub(1.0, gate)
    shape = out.label_dist.shape
    scaled = out.label_dist * T.broadcast_to(T.reshape(keep, gate.shape + (1,)), shape)
    return TransducerGrid(clipped_log(gate), clipped_log(scaled))


def _alpha(lb: np.ndarray, ll: np.ndarray) -> np.ndarray:
    b, t_max, u1 = lb.shape
    alpha = np.full((b, t_max, u1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for d in range(1, t_max + u1 - 1):
        ts = np.arange(max(0, d - u1 + 1), min(d, t_max - 1) + 1)
        us = d - ts
        top = np.full((b, len(ts)), -np.inf)
        ok = ts >= 1
        top[:, ok] = alpha[:, ts[ok] - 1, us[ok]] + lb[:, ts[ok] - 1, us[ok]]
        left = np.full((b, len(ts)), -np.inf)
        ok = us >= 1
        left[:, ok] = alpha[:, ts[ok], us[ok] - 1] + ll[:, ts[ok], us[ok] - 1]
        alpha[:, ts, us] = np.logaddexp(top, left)
    return alpha


def _beta(lb: np.ndarray, ll: np.ndarray, t_lens: np.ndarray, u_lens: np.ndarray) -> np.ndarray:
    b, t_max, u1 = lb.shape
    tt = np.arange(t_max)[None, :, None]
    uu = np.arange(u1)[None, None, :]
    valid = (tt < t_lens[:, None, None]) & (uu <= u_lens[:, None, None])
    end = (tt == t_lens[:, None, None] - 1) & (uu == u_lens[:, None, None])
    beta = np.full((b, t_max, u1), -np.inf)
    for d in range(t_max + u1 - 2, -1, -1):
        ts = np.arange(max(0, d - u1 + 1), min(d, t_max - 1) + 1)
        us = d - ts
        down = np.full((b, len(ts)), -np.inf)
        ok = ts + 1 < t_max
        down[:, ok] = lb[:, ts[ok], us[ok]] + beta[:, ts[ok] + 1, us[ok]]
        right = np.full((b, len(ts)), -np.inf)
        ok = us + 1 < u1
        right[:, ok] = ll[:, ts[ok], us[ok]] + beta[:, ts[ok], us[ok] + 1]
        val = np.logaddexp(down, right)
        val = np.where(end[:, ts, us], lb[:, ts, us], val)
        beta[:, ts, us] = np.where(valid[:, ts, us], val, -np.inf)
    return beta


def transducer_loss_batch(
    log_blank: Tensor, log_target: Tensor, num_frames: Sequence[int], num_labels: Sequence[int]
) -> Tensor:
    """Per-utterance full-sum losses via the forward-backward recursion.

    ``log_blank`` is ``(B, T, U+1)``; ``log_target[b, t, u]`` is the log
    probability of emitting label ``y_{u+1}`` at lattice node ``(t, u)``,
    shape ``(B, T, U)``. Padding beyond each utterance's lengths is ignored.
    The gradient comes from the alpha-beta occupation probabilities.
    """
    lb, lt = log_blank.data, log_target.data
    bsz, t_max, u1 = lb.shape
    if lt.shape != (bsz, t_max, u1 - 1):
        raise T.ShapeError(f"log_target shape {lt.shape} does not match log_blank {lb.shape}")
    t_lens = np.asarray(num_frames, dtype=np.int64)
    u_lens = np.asarray(num_labels, dtype=np.int64)
    if (u_lens > u1 - 1).any() or (t_lens > t_max).any() or (t_lens < 1).any():
        raise ValueError("utterance lengths exceed the lattice")
    ll = np.concatenate([lt, np.zeros((bsz, t_max, 1))], axis=2)
    rows = np.arange(bsz)
    with np.errstate(invalid="ignore", over="ignore"):
        alpha = _alpha(lb, ll)
        log_p = alpha[rows, t_lens - 1, u_lens] + lb[rows, t_lens - 1, u_lens]

    def vjp(g):
        with np.errstate(invalid="ignore", over="ignore"):
            beta = _beta(lb, ll, t_lens, u_lens)
            nxt = np.full_like(beta, -np.inf)
            nxt[:, :-1, :] = beta[:, 1:, :]
            nxt[rows, t_lens - 1, u_lens] = 0.0
            lp = log_p[:, None, None]
            g_blank = -np.exp(alpha + lb + nxt - lp)
            right = np.full_like(beta, -np.inf)
            right[:, :, :-1] = beta[:, :, 1:]
            g_label = -np.exp(alpha + ll + right - lp)[:, :, :-1]
        scale = g[:, None, None]
        return np.nan_to_num(g_blank) * scale, np.nan_to_num(g_label) * scale

    return T.custom_op("transducer_full_sum", -log_p, (log_blank, log_target), vjp)


def _target_log_probs(grid: TransducerGrid, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    u = len(labels)
    t = grid.num_frames
    if u > grid.max_labels:
        raise ValueError(f"{u} labels exceed the lattice's {grid.max_labels}")
    if u == 0:
        return Tensor._wrap(np.zeros((t, 0)))
    tt, uu = np.meshgrid(np.arange(t), np.arange(u), indexing="ij")
    return grid.log_label[tt, uu, labels[uu]]


def transducer_full_sum(grid: TransducerGrid, labels: Sequence[int]) -> Tensor:
    """-log of the total probability of every monotone alignment of ``labels``."""
    u = len(labels)
    lb = grid.log_blank[:, : u + 1]
    lt = _target_log_probs(grid, labels)
    t = grid.num_frames
    loss = transducer_loss_batch(
        T.reshape(lb, (1, t, u + 1)), T.reshape(lt, (1, t, u)), [t], [u]
    )
    return T.reshape(loss, ())


def brute_force_transducer(grid: TransducerGrid, labels: Sequence[int]) -> float:
    """Exact loss by enumerating all alignment paths (T + U <= 12)."""
    t_len, u_len = grid.num_frames, len(labels)
    if t_len + u_len > 12:
        raise ValueError("instance too large for enumeration")
    if u_len > grid.max_labels:
        raise ValueError("more labels than the lattice holds")
    lb = grid.log_blank.data
    ll = grid.log_label.data
    steps = t_len + u_len - 1  # the final blank is fixed
    path_logs = []
    for label_steps in itertools.combinations(range(steps), u_len):
        chosen = set(label_steps)
        t = u = 0
        total = 0.0
        for s in range(steps):
            if s in chosen:
                total += ll[t, u, labels[u]]
                u += 1
            else:
                total += lb[t, u]
                t += 1
        total += lb[t, u]
        path_logs.append(total)
    m = max(path_logs)
    return -(m + math.log(math.fsum(math.exp(x - m) for x in path_logs)))
