"""Encoder, predictor and the three joiners (HAT, Aligner, Chunkwise Aligner)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

SOS = 0
EOS = 1
FIRST_TOKEN = 2

ARCHITECTURES = ("transducer", "aligner", "chunkwise")
JOINER_KEYS = ("W_enc", "W_pred", "b", "w_gate", "b_gate", "W_label", "b_label")
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    """Sizes and masking of a model.

    ``vocab_size`` counts every row of the embedding and output tables,
    ``<sos>`` (id 0) and ``<eos>`` (id 1) included. Streaming masks use
    ``current_chunk`` frames per encoder chunk plus ``history_frames`` frames
    of left context.

    ``relative_window > 0`` adds a learned per-head attention bias for each
    clipped relative offset in ``[-relative_window, relative_window]``;
    ``chunk_period > 0`` adds a learned embedding of ``t mod chunk_period``
    to the encoder input.
    """

    feature_dim: int = 8
    vocab_size: int = 18
    encoder_dim: int = 32
    predictor_dim: int = 32
    joiner_dim: int = 32
    encoder_layers: int = 2
    attention_heads: int = 2
    ffn_dim: int = 64
    frame_reduction: int = 4
    mask_mode: str = "offline"
    current_chunk: int = 8
    history_frames: int = 8
    relative_window: int = 0
    chunk_period: int = 0
    architecture: str = "chunkwise"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        dims = (
            self.feature_dim,
            self.encoder_dim,
            self.predictor_dim,
            self.joiner_dim,
            self.encoder_layers,
            self.attention_heads,
            self.ffn_dim,
            self.frame_reduction,
        )
        if min(dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.encoder_dim % self.attention_heads:
            raise ValueError("encoder_dim must be divisible by attention_heads")
        if self.mask_mode not in ("offline", "streaming"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.mask_mode == "streaming" and (self.current_chunk < 1 or self.history_frames < 0):
            raise ValueError("streaming mask needs current_chunk >= 1 and history_frames >= 0")
        if self.relative_window < 0 or self.chunk_period < 0:
            raise ValueError("relative_window and chunk_period must be >= 0")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")

    @property
    def has_gate(self) -> bool:
        return self.architecture != "aligner"


@dataclass
class EncoderOutput:
    h_enc: Tensor
    attention: list[Tensor] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.h_enc.shape[-2]


@dataclass
class JoinerOutputs:
    """``gate`` is the blank (HAT) or end-of-chunk probability; ``None`` for the Aligner."""

    label_dist: Tensor
    gate: Tensor | None = None


# ---------------------------------------------------------------- masks


def attention_mask(
    num_frames: int,
    mode: str = "offline",
    current_chunk: int = 1,
    history_frames: int = 0,
    lengths=None,
) -> np.ndarray:
    """Boolean ``allowed[query, key]`` matrix (batched when ``lengths`` given).

    In streaming mode a query in chunk ``c`` (``current_chunk`` frames per
    chunk) sees frames ``c*current_chunk - history_frames`` through the last
    frame of its own chunk. Padding keys are hidden except from themselves so
    that no row is ever empty.
    """
    idx = np.arange(num_frames)
    if mode == "offline":
        allowed = np.ones((num_frames, num_frames), dtype=bool)
    elif mode == "streaming":
        start = (idx // current_chunk) * current_chunk
        lo = start - history_frames
        hi = start + current_chunk - 1
        allowed = (idx[None, :] >= lo[:, None]) & (idx[None, :] <= hi[:, None])
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    if lengths is None:
        return allowed
    lengths = np.asarray(lengths)
    real = idx[None, :] < lengths[:, None]
    batch = allowed[None] & real[:, None, :]
    batch |= np.eye(num_frames, dtype=bool)[None]
    return batch


def sinusoidal_positions(num_frames: int, dim: int) -> np.ndarray:
    pos = np.arange(num_frames)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    out = np.zeros((num_frames, dim))
    out[:, 0::2] = np.sin(pos * rate)
    out[:, 1::2] = np.cos(pos * rate)[:, : dim // 2]
    return out


# ---------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Uniform(-a, a) with a = 1/sqrt(fan_in); layer-norm gains start at 1."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}

    def uni(name, shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-a, a, size=shape), name=name)

    def const(name, shape, value):
        params[name] = Tensor(np.full(shape, value), name=name)

    d_in = cfg.feature_dim * cfg.frame_reduction
    de, dp, dj, v = cfg.encoder_dim, cfg.predictor_dim, cfg.joiner_dim, cfg.vocab_size
    uni("embed.W", (d_in, de), d_in)
    uni("embed.b", (de,), d_in)
    for i in range(cfg.encoder_layers):
        p = f"enc{i}."
        const(p + "ln1.g", (de,), 1.0)
        const(p + "ln1.b", (de,), 0.0)
        for m in ("Wq", "Wk", "Wv", "Wo"):
            uni(p + m, (de, de), de)
        const(p + "ln2.g", (de,), 1.0)
        const(p + "ln2.b", (de,), 0.0)
        uni(p + "W1", (de, cfg.ffn_dim), de)
        uni(p + "b1", (cfg.ffn_dim,), de)
        uni(p + "W2", (cfg.ffn_dim, de), cfg.ffn_dim)
        uni(p + "b2", (de,), cfg.ffn_dim)
    const("enc.ln.g", (de,), 1.0)
    const("enc.ln.b", (de,), 0.0)

    uni("pred.embed", (v, dp), dp)
    uni("pred.W_x", (dp, dp), dp)
    uni("pred.W_h", (dp, dp), dp)
    uni("pred.b", (dp,), dp)

    uni("joiner.W_enc", (de, dj), de)
    uni("joiner.W_pred", (dp, dj), dp)
    uni("joiner.b", (dj,), de + dp)
    if cfg.has_gate:
        uni("joiner.w_gate", (dj,), dj)
        uni("joiner.b_gate", (), dj)
    uni("joiner.W_label", (dj, v), dj)
    uni("joiner.b_label", (v,), dj)

    # optional position parameters come last so enabling them leaves the rest unchanged
    if cfg.relative_window:
        for i in range(cfg.encoder_layers):
            const(f"enc{i}.rel", (cfg.attention_heads, 2 * cfg.relative_window + 1), 0.0)
    if cfg.chunk_period:
        uni("embed.chunk_pos", (cfg.chunk_period, de), de)
    return params


def joiner_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """The joiner subset, keyed by short names (``W_enc``, ``w_gate``, ...)."""
    return {k: params["joiner." + k] for k in JOINER_KEYS if "joiner." + k in params}


def param_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------- joiners


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = T.matmul(x, w)
    return y + T.broadcast_to(b, y.shape)


def _check_joiner_dims(h_enc: Tensor, h_pred: Tensor, p: dict[str, Tensor]) -> None:
    if h_enc.shape[-1] != p["W_enc"].shape[0] or h_pred.shape[-1] != p["W_pred"].shape[0]:
        raise T.ShapeError(
            f"joiner expects encoder dim {p['W_enc'].shape[0]} and predictor dim "
            f"{p['W_pred'].shape[0]}, got {h_enc.shape[-1]} and {h_pred.shape[-1]}"
        )
    if h_enc.shape[:-1] != h_pred.shape[:-1]:
        raise T.ShapeError("joiner inputs must share leading dimensions")


def joiner_space(h_enc: Tensor, h_pred: Tensor, p: dict[str, Tensor]) -> Tensor:
    """tanh(W_enc h_enc + W_pred h_pred + b), shared by all three joiners."""
    _check_joiner_dims(h_enc, h_pred, p)
    z = T.matmul(h_enc, p["W_enc"]) + T.matmul(h_pred, p["W_pred"])
    return T.tanh(z + T.broadcast_to(p["b"], z.shape))


def gate_head(h_joiner: Tensor, p: dict[str, Tensor]) -> Tensor:
    w = p["w_gate"]
    logit = T.matmul(h_joiner, T.reshape(w, (w.shape[0], 1)))
    logit = T.reshape(logit, logit.shape[:-1])
    return T.sigmoid(logit + T.broadcast_to(p["b_gate"], logit.shape))


def label_head(h_joiner: Tensor, p: dict[str, Tensor]) -> Tensor:
    return T.softmax(_linear(h_joiner, p["W_label"], p["b_label"]))


def hat_joiner(h_enc: Tensor, h_pred: Tensor, p: dict[str, Tensor]) -> JoinerOutputs:
    """Blank probability plus a separate label softmax.

    The full output distribution over blank and labels is
    ``[gate, (1 - gate) * label_dist]``; see :func:`hat_distribution`.
    """
    h = joiner_space(h_enc, h_pred, p)
    return JoinerOutputs(label_dist=label_head(h, p), gate=gate_head(h, p))


def aligner_joiner(h_enc_u: Tensor, h_pred_u: Tensor, p: dict[str, Tensor]) -> JoinerOutputs:
    h = joiner_space(h_enc_u, h_pred_u, p)
    return JoinerOutputs(label_dist=label_head(h, p))


def chunkwise_joiner(h_enc: Tensor, h_pred: Tensor, p: dict[str, Tensor]) -> JoinerOutputs:
    """Same map and parameter shapes as :func:`hat_joiner`; the gate is end-of-chunk.

    The caller selects the encoder frame ``(n-1)*L_c + u_n`` for the
    ``u_n``-th label of chunk ``n``.
    """
    h = joiner_space(h_enc, h_pred, p)
    return JoinerOutputs(label_dist=label_head(h, p), gate=gate_head(h, p))


def hat_distribution(out: JoinerOutputs) -> Tensor:
    """Concatenate ``[gate, (1 - gate) * label_dist]`` along the last axis."""
    gate = out.gate
    keep = T.sub(1.0, gate)
    shape = out.label_dist.shape
    scaled = out.label_dist * T.broadcast_to(T.reshape(keep, gate.shape + (1,)), shape)
    return T.concat([T.reshape(gate, gate.shape + (1,)), scaled], axis=-1)


def hat_joiner_grid(h_enc: Tensor, h_pred: Tensor, p: dict[str, Tensor]) -> JoinerOutputs:
    """Evaluate the HAT joiner on every (frame, predictor step) pair.

    ``h_enc`` is ``(B, T, D')`` and ``h_pred`` is ``(B, U1, D'')``; outputs are
    ``(B, T, U1)`` gates and ``(B, T, U1, V)`` label distributions.
    """
    b, t, _ = h_enc.shape
    u1 = h_pred.shape[1]
    dj = p["b"].shape[0]
    e = T.reshape(T.matmul(h_enc, p["W_enc"]), (b, t, 1, dj))
    q = T.reshape(T.matmul(h_pred, p["W_pred"]), (b, 1, u1, dj))
    shape = (b, t, u1, dj)
    z = T.broadcast_to(e, shape) + T.broadcast_to(q, shape)
    h = T.tanh(z + T.broadcast_to(p["b"], shape))
    return JoinerOutputs(label_dist=label_head(h, p), gate=gate_head(h, p))


# ---------------------------------------------------------------- model


class Model:
    """Parameters plus the differentiable forward functions.

    Methods accept a batch (leading axis) unless noted; tensors created
    inside an active :class:`~chunkaligner.tensor.Tape` are recorded.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def joiner(self) -> dict[str, Tensor]:
        return joiner_params(self.params)

    # encoder -------------------------------------------------------

    def stack_frames(self, features: np.ndarray, raw_lengths) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        r = cfg.frame_reduction
        feats = np.asarray(features, dtype=np.float64)
        b, t_raw, d = feats.shape
        if d != cfg.feature_dim:
            raise T.ShapeError(f"expected feature dim {cfg.feature_dim}, got {d}")
        lengths = np.asarray(raw_lengths) // r
        if lengths.min() < 1:
            raise ValueError(f"utterance shorter than frame_reduction={r}")
        t = t_raw // r
        return feats[:, : t * r].reshape(b, t, r * d), lengths

    def encode_batch(self, features: np.ndarray, raw_lengths, keep_attention: bool = False):
        """Encode padded ``(B, T_raw, D_in)`` features.

        Returns ``(H, lengths, attention)`` with ``H`` of shape ``(B, T, D')``
        and ``attention`` a per-layer list of ``(B, heads, T, T)`` weights
        (empty unless requested).
        """
        cfg = self.config
        p = self.params
        stacked, lengths = self.stack_frames(features, raw_lengths)
        b, t, _ = stacked.shape
        de, nh = cfg.encoder_dim, cfg.attention_heads
        dh = de // nh
        x = _linear(Tensor._wrap(stacked), p["embed.W"], p["embed.b"])
        x = x + Tensor._wrap(np.broadcast_to(sinusoidal_positions(t, de), (b, t, de)).copy())
        if cfg.chunk_period:
            x = x + T.broadcast_to(T.take(p["embed.chunk_pos"], np.arange(t) % cfg.chunk_period), (b, t, de))
        mask = attention_mask(t, cfg.mask_mode, cfg.current_chunk, cfg.history_frames, lengths)
        mask = mask[:, None]
        rel_idx = None
        if cfg.relative_window:
            offsets = np.arange(t)[None, :] - np.arange(t)[:, None]
            rel_idx = np.clip(offsets, -cfg.relative_window, cfg.relative_window) + cfg.relative_window
        attn = []
        for i in range(cfg.encoder_layers):
            pre = f"enc{i}."
            y = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

            def heads(m):
                z = T.reshape(T.matmul(y, p[pre + m]), (b, t, nh, dh))
                return T.transpose(z, (0, 2, 1, 3))

            bias = None if rel_idx is None else T.take(p[pre + "rel"], rel_idx, axis=1)
            ctx, w = T.attention(heads("Wq"), heads("Wk"), heads("Wv"), mask, bias=bias)
            if keep_attention:
                attn.append(w)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, de))
            x = x + T.matmul(ctx, p[pre + "Wo"])
            y = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            y = _linear(T.relu(_linear(y, p[pre + "W1"], p[pre + "b1"])), p[pre + "W2"], p[pre + "b2"])
            x = x + y
        x = T.layer_norm(x, p["enc.ln.g"], p["enc.ln.b"])
        return x, lengths, attn

    def encode(self, features, keep_attention: bool = False) -> EncoderOutput:
        """Encode one ``(T_raw, D_in)`` utterance into ``(T, D')`` frames, T = T_raw // r."""
        feats = features.data if isinstance(features, Tensor) else np.asarray(features, float)
        if feats.shape[0] < self.config.frame_reduction:
            raise ValueError(
                f"T_raw={feats.shape[0]} is shorter than frame_reduction={self.config.frame_reduction}"
            )
        h, _, attn = self.encode_batch(feats[None], [feats.shape[0]], keep_attention)
        t, d = h.shape[1:]
        return EncoderOutput(T.reshape(h, (t, d)), [T.Tensor._wrap(w.data[0]) for w in attn])

    # predictor -----------------------------------------------------

    def initial_state(self) -> Tensor:
        return Tensor._wrap(np.zeros(self.config.predictor_dim))

    def predictor_step(self, token: int, state: Tensor) -> tuple[Tensor, Tensor]:
        """One Elman-RNN step; the output doubles as the next state."""
        if not 0 <= int(token) < self.config.vocab_size:
            raise ValueError(f"unknown token id {token}")
        p = self.params
        x = T.matmul(T.take(p["pred.embed"], [int(token)]), p["pred.W_x"])
        x = T.reshape(x, (self.config.predictor_dim,))
        z = x + T.matmul(state, p["pred.W_h"]) + p["pred.b"]
        h = T.tanh(z)
        return h, h

    def predictor_sequence(self, tokens: np.ndarray) -> Tensor:
        """Run the predictor over padded ``(B, L)`` token ids.

        Output ``[:, i]`` is the state after consuming ``tokens[:, :i+1]``; feed
        ``[<sos>, y_1, ..., y_U]`` to obtain ``h_pred_1 .. h_pred_{U+1}``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("unknown token id in predictor input")
        p = self.params
        b, length = tokens.shape
        dp = self.config.predictor_dim
        x = _linear(T.take(p["pred.embed"], tokens), p["pred.W_x"], p["pred.b"])
        h = None
        outs = []
        for i in range(length):
            z = x[:, i]
            if h is not None:
                z = z + T.matmul(h, p["pred.W_h"])
            h = T.tanh(z)
            outs.append(h)
        return T.stack(outs, axis=1) if outs else Tensor._wrap(np.zeros((b, 0, dp)))

    # checkpoints ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Single ``.npz`` file: config JSON plus little-endian float64 tensors."""
        arrays = {name: t.data.astype("<f8") for name, t in self.params.items()}
        header = {"format": CHECKPOINT_FORMAT, "config": asdict(self.config)}
        arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> Model:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {header.get('format')}")
            params = {
                k: Tensor(z[k].astype(np.float64), name=k) for k in z.files if k != "__header__"
            }
        config = ModelConfig(**header["config"])
        expected = init_params(config)
        if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
            raise ValueError("checkpoint parameters do not match its config")
        return cls(config, {k: params[k] for k in expected})
