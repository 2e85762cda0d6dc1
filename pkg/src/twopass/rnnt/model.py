"""Shared encoder, prediction network and joint network of the first pass."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..nncore import (
    LstmParams,
    ShapeError,
    Tensor,
    concat,
    embedding,
    init_uniform,
    log_softmax,
    lstm_cell_forward,
    lstm_step,
    matmul,
    no_grad,
    parameter,
    reshape,
    stack,
    tanh,
)
from ..nncore.autodiff import _log_softmax_np
from .endpointer import EndpointerPenaltyConfig, eos_penalty_offsets
from .loss import RnnTLogProbLattice, rnnt_loss_tensor


@dataclass
class RnnTConfig:
    input_dim: int
    vocab_size: int
    blank_id: int = 0
    eos_id: int = 1
    enc_layers: int = 2
    enc_hidden: int = 64
    enc_proj: int = 32
    time_reduction_factor: int = 1
    time_reduction_after: int = 2
    pred_layers: int = 1
    pred_embed: int = 32
    pred_hidden: int = 64
    pred_proj: int = 32
    joint_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.time_reduction_factor < 1:
            raise ValueError("time_reduction_factor must be >= 1")
        if self.time_reduction_factor > 1 and not 1 <= self.time_reduction_after < self.enc_layers:
            raise ValueError("time reduction must sit between two encoder layers")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RnnTParams:
    config: RnnTConfig
    encoder: list = field(default_factory=list)
    embed: Tensor = None
    prediction: list = field(default_factory=list)
    joint_enc: Tensor = None
    joint_pred: Tensor = None
    joint_b: Tensor = None
    out_w: Tensor = None
    out_b: Tensor = None

    @classmethod
    def init(cls, config: RnnTConfig, seed: int | None = None) -> "RnnTParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        enc = []
        d = config.input_dim
        for layer in range(config.enc_layers):
            enc.append(LstmParams.init(rng, d, config.enc_hidden, config.enc_proj))
            d = config.enc_proj
            if config.time_reduction_factor > 1 and layer + 1 == config.time_reduction_after:
                d *= config.time_reduction_factor
        pred = []
        d = config.pred_embed
        for _ in range(config.pred_layers):
            pred.append(LstmParams.init(rng, d, config.pred_hidden, config.pred_proj))
            d = config.pred_proj
        j, v = config.joint_dim, config.vocab_size
        return cls(
            config=config,
            encoder=enc,
            embed=parameter(rng.uniform(-1.0, 1.0, size=(v, config.pred_embed))),
            prediction=pred,
            joint_enc=parameter(init_uniform(rng, (config.enc_proj, j), config.enc_proj)),
            joint_pred=parameter(init_uniform(rng, (config.pred_proj, j), config.pred_proj)),
            joint_b=parameter(np.zeros(j)),
            out_w=parameter(init_uniform(rng, (j, v), j)),
            out_b=parameter(np.zeros(v)),
        )

    @property
    def encoder_dim(self) -> int:
        return self.config.enc_proj


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------
def _reduce_time(x: Tensor, factor: int) -> Tensor:
    b, t, p = x.shape
    pad = (-t) % factor
    if pad:
        x = concat([x, Tensor(np.zeros((b, pad, p)))], axis=1)
    return reshape(x, (b, (t + pad) // factor, factor * p))


def encode(params: RnnTParams, x) -> Tensor:
    """Whole-sequence (batched) encoder pass: (B, T, D) -> (B, T', P)."""
    cfg = params.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != cfg.input_dim:
        raise ShapeError(f"encoder expects input dim {cfg.input_dim}, got {x.shape[-1]}")
    h = x
    for layer, lp in enumerate(params.encoder):
        state = lp.initial_state(h.shape[0])
        outs = []
        for t in range(h.shape[1]):
            state, y = lstm_step(state, h[:, t, :], lp)
            outs.append(y)
        h = stack(outs, axis=1)
        if cfg.time_reduction_factor > 1 and layer + 1 == cfg.time_reduction_after:
            h = _reduce_time(h, cfg.time_reduction_factor)
    return h


class EncoderStream:
    """Frame-at-a-time encoder. Outputs depend only on frames seen so far."""

    def __init__(self, params: RnnTParams):
        self.params = params
        cfg = params.config
        self._states = [
            (np.zeros(lp.hidden_dim), np.zeros(lp.projection_dim)) for lp in params.encoder
        ]
        self._split = cfg.time_reduction_after if cfg.time_reduction_factor > 1 else len(params.encoder)
        self._buffer: list[np.ndarray] = []

    def _run(self, x: np.ndarray, layers) -> np.ndarray:
        for li in layers:
            lp = self.params.encoder[li]
            c, h = self._states[li]
            c, h, _ = lstm_cell_forward(x, c, h, lp.w_x.data, lp.w_h.data, lp.b.data, lp.w_proj.data)
            self._states[li] = (c, h)
            x = h
        return x

    def push(self, frame) -> list[np.ndarray]:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.params.config.input_dim,):
            raise ShapeError(f"frame must have shape ({self.params.config.input_dim},)")
        n = len(self.params.encoder)
        y = self._run(frame, range(self._split))
        if self._split == n:
            return [y]
        self._buffer.append(y)
        if len(self._buffer) < self.params.config.time_reduction_factor:
            return []
        z = np.concatenate(self._buffer)
        self._buffer = []
        return [self._run(z, range(self._split, n))]

    def flush(self) -> list[np.ndarray]:
        if not self._buffer:
            return []
        f = self.params.config.time_reduction_factor
        pad = [np.zeros_like(self._buffer[0])] * (f - len(self._buffer))
        z = np.concatenate(self._buffer + pad)
        self._buffer = []
        return [self._run(z, range(self._split, len(self.params.encoder)))]


def encode_stream(params: RnnTParams, frames, flush: bool = True):
    """Yield encoder outputs incrementally as input frames arrive."""
    enc = EncoderStream(params)
    for f in frames:
        yield from enc.push(f)
    if flush:
        yield from enc.flush()


def encode_array(params: RnnTParams, frames) -> np.ndarray:
    out = list(encode_stream(params, np.asarray(frames)))
    return np.stack(out) if out else np.zeros((0, params.encoder_dim))


def encoder_frames(num_inputs: int, config: RnnTConfig) -> int:
    return int(math.ceil(num_inputs / max(config.time_reduction_factor, 1)))


# ---------------------------------------------------------------------------
# prediction + joint
# ---------------------------------------------------------------------------
def predict(params: RnnTParams, labels: np.ndarray) -> Tensor:
    """Prediction-network outputs for label histories: (B, U) -> (B, U+1, P).

    Position ``u`` holds the output after consuming blank (start) + labels[:u].
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    b = labels.shape[0]
    inputs = np.concatenate([np.full((b, 1), params.config.blank_id), labels], axis=1)
    h = embedding(params.embed, inputs)
    for lp in params.prediction:
        state = lp.initial_state(b)
        outs = []
        for u in range(h.shape[1]):
            state, y = lstm_step(state, h[:, u, :], lp)
            outs.append(y)
        h = stack(outs, axis=1)
    return h


def joint_log_probs(params: RnnTParams, enc: Tensor, pred: Tensor) -> Tensor:
    """(B, T, Pe) x (B, U+1, Pp) -> (B, U+1, T, V) joint log-probabilities."""
    ep = matmul(enc, params.joint_enc)
    pp = matmul(pred, params.joint_pred)
    b, t, j = ep.shape
    u1 = pp.shape[1]
    h = tanh(reshape(pp, (b, u1, 1, j)) + reshape(ep, (b, 1, t, j)) + params.joint_b)
    return log_softmax(matmul(h, params.out_w) + params.out_b, axis=-1)


def compute_lattice(params: RnnTParams, e_s, labels) -> RnnTLogProbLattice:
    """Per-cell joint log-softmax given encoder frames and label history."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    v = params.config.vocab_size
    if len(labels) and (labels.min() < 0 or labels.max() >= v):
        raise ValueError("label out of vocab")
    with no_grad():
        enc = Tensor(np.asarray(e_s, dtype=np.float64)[None])
        pred = predict(params, labels[None, :])
        grid = joint_log_probs(params, enc, pred).data[0]
    return RnnTLogProbLattice(grid, params.config.blank_id)


# numpy fast paths used by beam search
def pred_step_np(params: RnnTParams, states, tokens):
    """Advance prediction-network states (list per layer of (c, h), batched) by ``tokens``."""
    x = params.embed.data[np.asarray(tokens, dtype=np.int64)]
    new = []
    for lp, (c, h) in zip(params.prediction, states):
        c, h, _ = lstm_cell_forward(x, c, h, lp.w_x.data, lp.w_h.data, lp.b.data, lp.w_proj.data)
        new.append((c, h))
        x = h
    return new, x


def initial_pred_states(params: RnnTParams, batch: int):
    return [(np.zeros((batch, lp.hidden_dim)), np.zeros((batch, lp.projection_dim))) for lp in params.prediction]


def joint_np(params: RnnTParams, enc_proj_row: np.ndarray, pred_proj: np.ndarray) -> np.ndarray:
    h = np.tanh(pred_proj + enc_proj_row + params.joint_b.data)
    return _log_softmax_np(h @ params.out_w.data + params.out_b.data, axis=-1)


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------
@dataclass
class TransducerBatch:
    x: np.ndarray  # (B, Tmax, D)
    t_lens: np.ndarray  # encoder frames per item (after time reduction)
    labels: np.ndarray  # (B, Umax) padded with eos/0
    u_lens: np.ndarray
    t_eos: np.ndarray  # encoder-frame index of speech end
    with_eos: np.ndarray  # bool, </s> appended


def make_batch(inputs, tokens, domains, t_eos_frames, config: RnnTConfig, ep_cfg: EndpointerPenaltyConfig) -> TransducerBatch:
    b = len(inputs)
    tmax = max(x.shape[0] for x in inputs)
    x = np.zeros((b, tmax, config.input_dim))
    labs = []
    with_eos = np.zeros(b, dtype=bool)
    for i, inp in enumerate(inputs):
        x[i, : inp.shape[0]] = inp
        lab = list(tokens[i])
        if ep_cfg.enabled_for(domains[i]):
            lab.append(config.eos_id)
            with_eos[i] = True
        labs.append(lab)
    umax = max(len(lab) for lab in labs)
    labels = np.zeros((b, umax), dtype=np.int64)
    for i, lab in enumerate(labs):
        labels[i, : len(lab)] = lab
    r = max(config.time_reduction_factor, 1)
    t_lens = np.array([encoder_frames(inp.shape[0], config) for inp in inputs])
    t_eos = np.array([int(math.ceil(t / r)) for t in t_eos_frames])
    return TransducerBatch(x, t_lens, labels, np.array([len(lab) for lab in labs]), t_eos, with_eos)


def batch_loss(params: RnnTParams, batch: TransducerBatch, ep_cfg: EndpointerPenaltyConfig) -> Tensor:
    """Summed training loss: joint lattice, optional ``</s>`` penalty, forward-backward."""
    cfg = params.config
    enc = encode(params, Tensor(batch.x))
    pred = predict(params, batch.labels)
    grid = joint_log_probs(params, enc, pred)
    offsets = {}
    if ep_cfg.alpha_early > 0 or ep_cfg.alpha_late > 0:
        for i in range(len(batch.t_lens)):
            if batch.with_eos[i]:
                offsets[i] = eos_penalty_offsets(
                    int(batch.t_lens[i]), int(batch.u_lens[i]), cfg.vocab_size, cfg.eos_id, int(batch.t_eos[i]), ep_cfg
                )
    return rnnt_loss_tensor(grid, batch.labels, batch.t_lens, batch.u_lens, cfg.blank_id, offsets or None)


def rnnt_training_loss(params: RnnTParams, inputs: np.ndarray, tokens, domain_id: int, t_eos_frame: int,
                       ep_cfg: EndpointerPenaltyConfig) -> Tensor:
    """Single-utterance loss: compute lattice -> apply penalty -> transducer loss."""
    batch = make_batch([np.asarray(inputs)], [tokens], [domain_id], [t_eos_frame], params.config, ep_cfg)
    return batch_loss(params, batch, ep_cfg)
