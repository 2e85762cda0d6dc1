"""Attention decoder used as a rescorer, plus its small additional encoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..nncore import (
    AttentionParams,
    LstmParams,
    ShapeError,
    Tensor,
    attend,
    concat,
    embedding,
    init_uniform,
    log_softmax,
    lstm_cell_forward,
    lstm_step,
    matmul,
    parameter,
    pick,
    project_source,
    stack,
)
from ..nncore.autodiff import _log_softmax_np, tsum

MASK_NEG = -1e30


@dataclass
class LasConfig:
    source_dim: int
    vocab_size: int  # first-pass vocab; the decoder adds one end/start symbol at index vocab_size
    enc_layers: int = 2
    enc_hidden: int = 64
    enc_proj: int = 32
    embed_dim: int = 32
    dec_layers: int = 1
    dec_hidden: int = 64
    dec_proj: int = 32
    num_heads: int = 2
    d_k: int = 16
    d_v: int = 16
    context_dim: int = 32
    seed: int = 0

    @property
    def eos_id(self) -> int:
        return self.vocab_size

    @property
    def num_outputs(self) -> int:
        return self.vocab_size + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LasParams:
    config: LasConfig
    encoder: list = field(default_factory=list)
    embed: Tensor = None
    decoder: list = field(default_factory=list)
    attention: AttentionParams = None
    out_w: Tensor = None
    out_b: Tensor = None

    @classmethod
    def init(cls, config: LasConfig, seed: int | None = None) -> "LasParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        enc, d = [], config.source_dim
        for _ in range(config.enc_layers):
            enc.append(LstmParams.init(rng, d, config.enc_hidden, config.enc_proj))
            d = config.enc_proj
        dec, d = [], config.embed_dim + config.context_dim
        for _ in range(config.dec_layers):
            dec.append(LstmParams.init(rng, d, config.dec_hidden, config.dec_proj))
            d = config.dec_proj
        att = AttentionParams.init(rng, config.dec_proj, config.enc_proj, config.num_heads, config.d_k, config.d_v,
                                   config.context_dim)
        k = config.dec_proj + config.context_dim
        return cls(
            config=config,
            encoder=enc,
            embed=parameter(rng.uniform(-1.0, 1.0, size=(config.num_outputs, config.embed_dim))),
            decoder=dec,
            attention=att,
            out_w=parameter(init_uniform(rng, (k, config.num_outputs), k)),
            out_b=parameter(np.zeros(config.num_outputs)),
        )


# ---------------------------------------------------------------------------
# additional encoder and attention-source cache
# ---------------------------------------------------------------------------
class AdditionalEncoderStream:
    """Causal frame-by-frame run of the additional encoder."""

    def __init__(self, params: LasParams):
        self.params = params
        self._states = [(np.zeros(lp.hidden_dim), np.zeros(lp.projection_dim)) for lp in params.encoder]

    def push(self, e_s_frame) -> np.ndarray:
        x = np.asarray(e_s_frame, dtype=np.float64)
        if x.shape != (self.params.config.source_dim,):
            raise ShapeError(f"expected a frame of dim {self.params.config.source_dim}, got {x.shape}")
        for li, lp in enumerate(self.params.encoder):
            c, h = self._states[li]
            c, h, _ = lstm_cell_forward(x, c, h, lp.w_x.data, lp.w_h.data, lp.b.data, lp.w_proj.data)
            self._states[li] = (c, h)
            x = h
        return x


def additional_encode(params: LasParams, e_s) -> np.ndarray:
    """(T, source_dim) shared-encoder output -> (T, enc_proj)."""
    e_s = np.asarray(e_s, dtype=np.float64)
    if e_s.ndim != 2 or e_s.shape[0] == 0:
        raise ValueError("additional_encode needs a non-empty (T, D) sequence")
    if e_s.shape[1] != params.config.source_dim:
        raise ShapeError(f"expected source dim {params.config.source_dim}, got {e_s.shape[1]}")
    stream = AdditionalEncoderStream(params)
    return np.stack([stream.push(f) for f in e_s])


def additional_encode_tensor(params: LasParams, e_s: Tensor) -> Tensor:
    """Batched graph version: (B, T, source_dim) -> (B, T, enc_proj)."""
    h = e_s
    for lp in params.encoder:
        state = lp.initial_state(h.shape[0])
        outs = []
        for t in range(h.shape[1]):
            state, y = lstm_step(state, h[:, t, :], lp)
            outs.append(y)
        h = stack(outs, axis=1)
    return h


class AttentionSourceCache:
    """Per-head attention keys (H, S, d_k) and values (H, S, d_v); append-only."""

    def __init__(self, params: AttentionParams):
        self._w_k = params.w_k.data
        self._w_v = params.w_v.data
        self.num_heads = params.num_heads
        self.d_k, self.d_v = params.d_k, params.d_v
        self._k: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self._arrays = None

    @property
    def length(self) -> int:
        return len(self._k)

    def append(self, e_a_rows) -> None:
        rows = np.atleast_2d(np.asarray(e_a_rows, dtype=np.float64))
        if rows.shape[0] == 0:
            return
        if rows.shape[1] != self._w_k.shape[0]:
            raise ShapeError(f"expected e_a dim {self._w_k.shape[0]}, got {rows.shape[1]}")
        k = (rows @ self._w_k).reshape(rows.shape[0], self.num_heads, self.d_k)
        v = (rows @ self._w_v).reshape(rows.shape[0], self.num_heads, self.d_v)
        self._k.extend(k)
        self._v.extend(v)
        self._arrays = None

    @property
    def keys(self) -> np.ndarray:
        return self._materialize()[0]

    @property
    def values(self) -> np.ndarray:
        return self._materialize()[1]

    def _materialize(self):
        if self._arrays is None:
            if not self._k:
                self._arrays = (np.zeros((self.num_heads, 0, self.d_k)), np.zeros((self.num_heads, 0, self.d_v)))
            else:
                self._arrays = (np.stack(self._k, axis=1), np.stack(self._v, axis=1))
        return self._arrays


def build_attention_cache(e_a_stream, params: LasParams) -> AttentionSourceCache:
    cache = AttentionSourceCache(params.attention)
    for frame in e_a_stream:
        cache.append(frame)
    return cache


def cache_from_shared(params: LasParams, e_s) -> AttentionSourceCache:
    """Additional encoder + key/value projection, streamed frame by frame."""
    stream = AdditionalEncoderStream(params)
    cache = AttentionSourceCache(params.attention)
    for f in np.asarray(e_s, dtype=np.float64):
        cache.append(stream.push(f))
    return cache


# ---------------------------------------------------------------------------
# decoder steps (numpy)
# ---------------------------------------------------------------------------
@dataclass
class DecoderState:
    """Batched decoder state: per-layer (c, h) rows and the previous context rows."""

    layers: list
    context: np.ndarray

    @property
    def batch(self) -> int:
        return self.context.shape[0]

    def repeat(self, n: int) -> "DecoderState":
        return DecoderState([(np.repeat(c, n, 0), np.repeat(h, n, 0)) for c, h in self.layers],
                            np.repeat(self.context, n, 0))

    def row(self, i: int) -> "DecoderState":
        return DecoderState([(c[i : i + 1], h[i : i + 1]) for c, h in self.layers], self.context[i : i + 1])


def initial_decoder_state(params: LasParams, batch: int = 1) -> DecoderState:
    cfg = params.config
    return DecoderState(
        [(np.zeros((batch, lp.hidden_dim)), np.zeros((batch, lp.projection_dim))) for lp in params.decoder],
        np.zeros((batch, cfg.context_dim)),
    )


def _attend_np(query: np.ndarray, cache: AttentionSourceCache, att: AttentionParams) -> np.ndarray:
    b = query.shape[0]
    q = (query @ att.w_q.data).reshape(b, att.num_heads, 1, att.d_k)
    scores = np.matmul(q, np.swapaxes(cache.keys, -1, -2)[None]) * (1.0 / np.sqrt(att.d_k))
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    ctx = np.matmul(w, cache.values[None]).reshape(b, att.num_heads * att.d_v)
    return ctx @ att.w_o.data


def teacher_force_step(state: DecoderState, prev_token, cache: AttentionSourceCache,
                       params: LasParams) -> tuple[DecoderState, np.ndarray]:
    """One decoder step fed ``prev_token`` (scalar or one per state row).

    Returns the new state and (B, |V|+1) log-probabilities of the next token.
    """
    if cache.length == 0:
        raise ValueError("attention cache is empty")
    tok = np.broadcast_to(np.asarray(prev_token, dtype=np.int64), (state.batch,))
    x = np.concatenate([params.embed.data[tok], state.context], axis=-1)
    layers = []
    for lp, (c, h) in zip(params.decoder, state.layers):
        c, h, _ = lstm_cell_forward(x, c, h, lp.w_x.data, lp.w_h.data, lp.b.data, lp.w_proj.data)
        layers.append((c, h))
        x = h
    ctx = _attend_np(x, cache, params.attention)
    logits = np.concatenate([x, ctx], axis=-1) @ params.out_w.data + params.out_b.data
    return DecoderState(layers, ctx), _log_softmax_np(logits, axis=-1)


def sequence_logprob(params: LasParams, cache: AttentionSourceCache, tokens, with_eos: bool = True) -> float:
    """Teacher-forced log P(tokens [+ end] | source), accumulated step by step."""
    eos = params.config.eos_id
    state = initial_decoder_state(params)
    state, lp = teacher_force_step(state, eos, cache, params)
    total = 0.0
    for tok in tokens:
        total += float(lp[0, tok])
        state, lp = teacher_force_step(state, tok, cache, params)
    if with_eos:
        total += float(lp[0, eos])
    return total


# ---------------------------------------------------------------------------
# graph path for training
# ---------------------------------------------------------------------------
@dataclass
class LasBatch:
    e_s: np.ndarray  # (B, Tmax, source_dim)
    mask: np.ndarray  # (B, Tmax) additive
    inputs: np.ndarray  # (B, Umax+1) decoder inputs, start symbol first
    targets: np.ndarray  # (B, Umax+1) tokens then end symbol
    weights: np.ndarray  # (B, Umax+1) 1 on real targets

    @property
    def size(self) -> int:
        return self.e_s.shape[0]


def make_las_batch(e_s_list, token_lists, config: LasConfig) -> LasBatch:
    b = len(e_s_list)
    if b == 0:
        raise ValueError("empty batch")
    tmax = max(len(e) for e in e_s_list)
    umax = max(len(t) for t in token_lists)
    e_s = np.zeros((b, tmax, config.source_dim))
    mask = np.full((b, tmax), MASK_NEG)
    eos = config.eos_id
    inputs = np.full((b, umax + 1), eos, dtype=np.int64)
    targets = np.full((b, umax + 1), eos, dtype=np.int64)
    weights = np.zeros((b, umax + 1))
    for i, (e, toks) in enumerate(zip(e_s_list, token_lists)):
        e = np.asarray(e, dtype=np.float64)
        if len(e) == 0:
            raise ValueError("empty source sequence")
        e_s[i, : len(e)] = e
        mask[i, : len(e)] = 0.0
        toks = list(toks)
        inputs[i, 1 : len(toks) + 1] = toks
        targets[i, : len(toks)] = toks
        weights[i, : len(toks) + 1] = 1.0
    return LasBatch(e_s, mask, inputs, targets, weights)


def sequence_logprobs_tensor(params: LasParams, batch: LasBatch) -> Tensor:
    """Per-sequence teacher-forced log-probs (B,) including the end symbol."""
    e_a = additional_encode_tensor(params, Tensor(batch.e_s))
    kh, vh = project_source(e_a, e_a, params.attention)
    b, steps = batch.inputs.shape
    states = [lp.initial_state(b) for lp in params.decoder]
    ctx = Tensor(np.zeros((b, params.config.context_dim)))
    picked = []
    for u in range(steps):
        x = concat([embedding(params.embed, batch.inputs[:, u]), ctx], axis=-1)
        for li, lp in enumerate(params.decoder):
            states[li], x = lstm_step(states[li], x, lp)
        ctx = attend(x, kh, vh, params.attention, mask=batch.mask)
        logits = matmul(concat([x, ctx], axis=-1), params.out_w) + params.out_b
        picked.append(pick(log_softmax(logits, axis=-1), batch.targets[:, u]))
    lp = stack(picked, axis=1) * batch.weights
    return tsum(lp, axis=1)


def las_ce_loss(params: LasParams, batch: LasBatch) -> Tensor:
    """Summed cross-entropy over the batch (end symbol included)."""
    return -tsum(sequence_logprobs_tensor(params, batch))
