"""LSTM cells with output projection, multi-head attention and parameter trees."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    _sigmoid,
    _unbroadcast,
    as_tensor,
    concat,
    make_op,
    matmul,
    parameter,
    reshape,
    softmax,
    stack,
    transpose,
)


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    r = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-r, r, size=shape)


# ---------------------------------------------------------------------------
# parameter trees
# ---------------------------------------------------------------------------
def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor reachable from ``obj``.

    Walks dataclass fields and lists in declaration order, so names are stable.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def state_dict(obj) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named_parameters(obj)}


def load_state_dict(obj, state: dict[str, np.ndarray]) -> None:
    named = dict(named_parameters(obj))
    missing = set(named) - set(state)
    if missing:
        raise KeyError(f"missing tensors: {sorted(missing)}")
    for name, t in named.items():
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise ShapeError(f"{name}: expected {t.shape}, got {arr.shape}")
        t.data = arr.copy()


def zero_grads(obj) -> None:
    for t in parameters(obj):
        t.grad = None


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------
@dataclass
class LstmParams:
    """Unidirectional LSTM cell with a projection on the output.

    Gate columns are ordered (input, forget, output, candidate). The
    recurrent input is the projected output, as in LSTMP.
    """

    w_x: Tensor  # (input_dim, 4H)
    w_h: Tensor  # (P, 4H)
    b: Tensor  # (4H,)
    w_proj: Tensor  # (H, P)

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_proj.shape[0]

    @property
    def projection_dim(self) -> int:
        return self.w_proj.shape[1]

    @classmethod
    def init(cls, rng, input_dim: int, hidden_dim: int, projection_dim: int) -> "LstmParams":
        if projection_dim > hidden_dim:
            raise ShapeError("projection_dim must not exceed hidden_dim")
        h = hidden_dim
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        return cls(
            w_x=parameter(init_uniform(rng, (input_dim, 4 * h), input_dim)),
            w_h=parameter(init_uniform(rng, (projection_dim, 4 * h), projection_dim)),
            b=parameter(b),
            w_proj=parameter(init_uniform(rng, (h, projection_dim), h)),
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, projection_dim: int) -> "LstmParams":
        h = hidden_dim
        return cls(
            w_x=parameter(np.zeros((input_dim, 4 * h))),
            w_h=parameter(np.zeros((projection_dim, 4 * h))),
            b=parameter(np.zeros(4 * h)),
            w_proj=parameter(np.zeros((h, projection_dim))),
        )

    def initial_state(self, batch: int | None = None):
        shape_c = (self.hidden_dim,) if batch is None else (batch, self.hidden_dim)
        shape_h = (self.projection_dim,) if batch is None else (batch, self.projection_dim)
        return Tensor(np.zeros(shape_c)), Tensor(np.zeros(shape_h))


def lstm_cell_forward(x, c, h, w_x, w_h, b, w_proj):
    """Plain-numpy LSTMP step; returns (c_new, h_new, cache)."""
    z = x @ w_x + h @ w_h + b
    hd = w_proj.shape[0]
    gates = _sigmoid(z[..., : 3 * hd])
    i = gates[..., :hd]
    f = gates[..., hd : 2 * hd]
    o = gates[..., 2 * hd :]
    g = np.tanh(z[..., 3 * hd :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    m = o * tc
    h_new = m @ w_proj
    return c_new, h_new, (i, f, o, g, tc, m)


def lstm_step(state, x, params: LstmParams):
    """One LSTM step. ``state`` is (cell, hidden); returns (state', output).

    The output equals the new (projected) hidden state. Works on a single
    vector or a batch of row vectors. Implemented as one fused graph node
    with a hand-derived backward pass.
    """
    c, h = (as_tensor(s) for s in state)
    x = as_tensor(x)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"lstm input dim {x.shape[-1]} != {params.input_dim}")
    if c.shape[-1] != params.hidden_dim or h.shape[-1] != params.projection_dim:
        raise ShapeError("lstm state dims do not match params")
    wx, wh, b, wp = params.w_x, params.w_h, params.b, params.w_proj
    xd, cd, hd_ = x.data, c.data, h.data
    c_new, h_new, cache = lstm_cell_forward(xd, cd, hd_, wx.data, wh.data, b.data, wp.data)
    hdim = params.hidden_dim
    packed = np.concatenate([c_new, h_new], axis=-1)

    def backward(gp):
        i, f, o, g, tc, m = cache
        g_c = gp[..., :hdim]
        g_h = gp[..., hdim:]
        dm = g_h @ wp.data.T
        m2 = m.reshape(-1, hdim)
        dwp = m2.T @ g_h.reshape(-1, g_h.shape[-1])
        do = dm * tc
        dc_new = g_c + dm * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc_new * g * i * (1.0 - i),
                dc_new * cd * f * (1.0 - f),
                do * o * (1.0 - o),
                dc_new * i * (1.0 - g * g),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, dz.shape[-1])
        dx = dz @ wx.data.T
        dh = dz @ wh.data.T
        dc = dc_new * f
        dwx = xd.reshape(-1, xd.shape[-1]).T @ dz2
        dwh = hd_.reshape(-1, hd_.shape[-1]).T @ dz2
        db = dz2.sum(axis=0)
        return (
            _unbroadcast(dx, xd.shape),
            _unbroadcast(dc, cd.shape),
            _unbroadcast(dh, hd_.shape),
            dwx,
            dwh,
            db,
            dwp,
        )

    out = make_op(packed, (x, c, h, wx, wh, b, wp), backward)
    if not out.requires_grad:
        new_c, new_h = Tensor(c_new), Tensor(h_new)
    else:
        new_c, new_h = out[..., :hdim], out[..., hdim:]
    return (new_c, new_h), new_h


def lstm_sequence(params_stack: list[LstmParams], inputs: Tensor, states=None):
    """Run a stack of LSTM layers over ``inputs`` of shape (B, T, D).

    Returns the (B, T, P) top-layer output and the final per-layer states.
    """
    batch, steps = inputs.shape[0], inputs.shape[1]
    layer_in = inputs
    finals = []
    for li, params in enumerate(params_stack):
        state = params.initial_state(batch) if states is None else states[li]
        outs = []
        for t in range(steps):
            state, y = lstm_step(state, layer_in[:, t, :], params)
            outs.append(y)
        finals.append(state)
        layer_in = stack(outs, axis=1)
    return layer_in, finals


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------
@dataclass
class AttentionParams:
    """Per-head query/key/value projections (stored head-major) and output projection."""

    w_q: Tensor  # (query_dim, heads * d_k)
    w_k: Tensor  # (source_dim, heads * d_k)
    w_v: Tensor  # (source_dim, heads * d_v)
    w_o: Tensor  # (heads * d_v, out_dim)
    num_heads: int = 1

    def __post_init__(self):
        if self.num_heads < 1:
            raise ShapeError("num_heads must be positive")
        if self.w_q.shape[1] % self.num_heads or self.w_v.shape[1] % self.num_heads:
            raise ShapeError("projection width must be divisible by num_heads")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.num_heads

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1] // self.num_heads

    @classmethod
    def init(cls, rng, query_dim, source_dim, num_heads, d_k, d_v, out_dim) -> "AttentionParams":
        return cls(
            w_q=parameter(init_uniform(rng, (query_dim, num_heads * d_k), query_dim)),
            w_k=parameter(init_uniform(rng, (source_dim, num_heads * d_k), source_dim)),
            w_v=parameter(init_uniform(rng, (source_dim, num_heads * d_v), source_dim)),
            w_o=parameter(init_uniform(rng, (num_heads * d_v, out_dim), num_heads * d_v)),
            num_heads=num_heads,
        )


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(..., S, H*d) -> (..., H, S, d)."""
    *lead, s, width = x.shape
    y = reshape(x, (*lead, s, num_heads, width // num_heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(y, axes)


def attend(query: Tensor, keys_h: Tensor, values_h: Tensor, params: AttentionParams, mask=None) -> Tensor:
    """Attention against pre-projected per-head keys/values.

    query: (B, query_dim) or (query_dim,); keys_h: (..., H, S, d_k);
    values_h: (..., H, S, d_v). ``mask`` (B, S) is additive (0 or large negative).
    """
    query = as_tensor(query)
    if keys_h.shape[-2] == 0:
        raise ValueError("attention over an empty source")
    single = query.ndim == 1
    q = query if not single else reshape(query, (1, query.shape[0]))
    b = q.shape[0]
    nh, dk = params.num_heads, params.d_k
    qh = reshape(matmul(q, params.w_q), (b, nh, 1, dk))
    scores = matmul(qh, transpose(keys_h, _swap_last(keys_h.ndim))) * (1.0 / np.sqrt(dk))
    if mask is not None:
        scores = scores + np.asarray(mask)[:, None, None, :]
    weights = softmax(scores, axis=-1)  # (B, H, 1, S)
    ctx = matmul(weights, values_h)  # (B, H, 1, d_v)
    ctx = reshape(ctx, (b, nh * params.d_v))
    out = matmul(ctx, params.w_o)
    if single:
        out = reshape(out, (out.shape[-1],))
    return out


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def project_source(keys: Tensor, values: Tensor, params: AttentionParams):
    keys, values = as_tensor(keys), as_tensor(values)
    kh = split_heads(matmul(keys, params.w_k), params.num_heads)
    vh = split_heads(matmul(values, params.w_v), params.num_heads)
    return kh, vh


def multi_head_attention(query, keys, values, params: AttentionParams) -> Tensor:
    """Scaled dot-product attention with ``params.num_heads`` heads.

    keys/values: (S, source_dim) shared by all queries, or (B, S, source_dim).
    The per-head contexts are concatenated and output-projected.
    """
    keys, values = as_tensor(keys), as_tensor(values)
    if keys.shape[-2] == 0 or values.shape[-2] == 0:
        raise ValueError("attention over an empty source")
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError("keys and values must have equal source length")
    kh, vh = project_source(keys, values, params)
    return attend(query, kh, vh, params)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


__all__ = [
    "AttentionParams",
    "LstmParams",
    "attend",
    "concat",
    "init_uniform",
    "linear",
    "load_state_dict",
    "lstm_cell_forward",
    "lstm_sequence",
    "lstm_step",
    "multi_head_attention",
    "named_parameters",
    "parameters",
    "project_source",
    "split_heads",
    "state_dict",
    "zero_grads",
]
