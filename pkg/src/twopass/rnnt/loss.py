"""Transducer loss by log-space forward-backward over the (U+1) x T grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nncore import Tensor, make_op


class InfeasibleAlignmentError(ValueError):
    """No monotonic alignment exists for the given lattice and labels."""


@dataclass
class RnnTLogProbLattice:
    """``grid[u, t]`` holds joint log-probs after ``u`` labels at frame ``t``."""

    grid: np.ndarray  # (U+1, T, V)
    blank_id: int = 0

    @property
    def num_labels(self) -> int:
        return self.grid.shape[0] - 1

    @property
    def num_frames(self) -> int:
        return self.grid.shape[1]


def _scan(c: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Solve a[0] = c[0], a[t] = logaddexp(a[t-1] + step[t], c[t])."""
    if np.all(np.isfinite(step[1:])):
        s = np.concatenate([[0.0], np.cumsum(step[1:])])
        with np.errstate(invalid="ignore"):
            return s + np.logaddexp.accumulate(c - s)
    out = np.empty_like(c)
    out[0] = c[0]
    for t in range(1, len(c)):
        out[t] = np.logaddexp(out[t - 1] + step[t], c[t])
    return out


def _check(grid: np.ndarray, labels: np.ndarray, blank_id: int):
    if grid.ndim != 3:
        raise ValueError("lattice grid must be (U+1, T, V)")
    u1, t, v = grid.shape
    if t < 1:
        raise InfeasibleAlignmentError("no frames: no alignment exists")
    if len(labels) != u1 - 1:
        raise ValueError(f"lattice has {u1 - 1} label rows but {len(labels)} labels given")
    if len(labels) and (labels.min() < 0 or labels.max() >= v):
        raise ValueError("label out of vocab")
    if np.any(labels == blank_id):
        raise ValueError("labels must not contain blank")


def forward_backward(grid: np.ndarray, labels, blank_id: int = 0):
    """Return (log P(labels|x), alpha, beta)."""
    labels = np.asarray(labels, dtype=np.int64)
    _check(grid, labels, blank_id)
    u1, T, _ = grid.shape
    U = u1 - 1
    blank = grid[:, :, blank_id]
    emit = grid[np.arange(U)[:, None], np.arange(T)[None, :], labels[:, None]] if U else np.zeros((0, T))

    alpha = np.empty((u1, T))
    start = np.full(T, -np.inf)
    start[0] = 0.0
    for u in range(u1):
        c = start if u == 0 else alpha[u - 1] + emit[u - 1]
        step = np.concatenate([[0.0], blank[u, :-1]])
        alpha[u] = _scan(c, step)
    log_p = alpha[U, T - 1] + blank[U, T - 1]

    beta = np.empty((u1, T))
    for u in range(U, -1, -1):
        if u == U:
            d = np.full(T, -np.inf)
            d[T - 1] = blank[U, T - 1]
        else:
            d = beta[u + 1] + emit[u]
        rb = blank[u, ::-1]
        beta[u] = _scan(d[::-1], rb)[::-1]
    if not np.isfinite(log_p):
        raise InfeasibleAlignmentError("all alignments have zero probability")
    return log_p, alpha, beta


def rnnt_loss(lattice: RnnTLogProbLattice, labels) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the grid.

    Alignments are monotonic paths where blank advances ``t`` and label
    ``labels[u]`` advances ``u``; a path exits through blank at
    ``(t=T-1, u=U)``.
    """
    grid = np.asarray(lattice.grid, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    log_p, alpha, beta = forward_backward(grid, labels, lattice.blank_id)
    u1, T, _ = grid.shape
    U = u1 - 1
    blank = grid[:, :, lattice.blank_id]

    beta_next = np.full((u1, T), -np.inf)
    beta_next[:, :-1] = beta[:, 1:]
    beta_next[U, T - 1] = 0.0
    grad = np.zeros_like(grid)
    grad[:, :, lattice.blank_id] = -np.exp(alpha + blank + beta_next - log_p)
    if U:
        emit = grid[np.arange(U)[:, None], np.arange(T)[None, :], labels[:, None]]
        g_emit = -np.exp(alpha[:U] + emit + beta[1:] - log_p)
        grad[np.arange(U)[:, None], np.arange(T)[None, :], labels[:, None]] += g_emit
    return float(-log_p), grad


def rnnt_loss_tensor(grid: Tensor, labels, t_lens, u_lens, blank_id: int = 0, offsets=None) -> Tensor:
    """Summed transducer loss over a padded batch, as a graph node.

    grid: (B, Umax+1, Tmax, V) log-probs. ``offsets`` optionally maps a batch
    index to an additive (U+1, T, V) array applied before the DP (constant
    w.r.t. parameters, so the gradient passes through unchanged).
    """
    data = grid.data
    total = 0.0
    gbuf = np.zeros_like(data)
    for b in range(data.shape[0]):
        T, U = int(t_lens[b]), int(u_lens[b])
        g = data[b, : U + 1, :T]
        if offsets is not None and b in offsets:
            g = g + offsets[b]
        loss, grad = rnnt_loss(RnnTLogProbLattice(g, blank_id), np.asarray(labels[b][:U]))
        total += loss
        gbuf[b, : U + 1, :T] = grad
    return make_op(np.asarray(total), (grid,), lambda gout: (gbuf * gout,))
