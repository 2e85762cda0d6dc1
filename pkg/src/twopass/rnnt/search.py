"""Frame-synchronous transducer beam search with ``</s>``-triggered mic closing."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..lattice import PrefixTreeLattice
from .model import RnnTParams, initial_pred_states, joint_np, pred_step_np

Seq = tuple


@dataclass
class DecodeResult:
    lattice: PrefixTreeLattice
    mic_close_frame: int | None
    trace: list = field(default_factory=list)  # top hypothesis after each frame
    hypotheses: list = field(default_factory=list)  # (tokens, score), best first
    frames_consumed: int = 0
    stopped_by: str | None = None  # "eos", "external" or None

    @property
    def best(self) -> tuple:
        return self.hypotheses[0][0] if self.hypotheses else ()


class _PredCache:
    """Prediction-network output (projected into joint space) per label prefix."""

    def __init__(self, params: RnnTParams):
        self.params = params
        states, out = pred_step_np(params, initial_pred_states(params, 1), [params.config.blank_id])
        self.states = {(): [(c[0], h[0]) for c, h in states]}
        self.proj = {(): out[0] @ params.joint_pred.data}

    def ensure(self, seqs: Iterable[Seq]) -> None:
        todo = [s for s in seqs if s not in self.proj]
        if not todo:
            return
        parents = [s[:-1] for s in todo]
        self.ensure(parents)
        n_layers = len(self.params.prediction)
        states = [
            (np.stack([self.states[p][li][0] for p in parents]), np.stack([self.states[p][li][1] for p in parents]))
            for li in range(n_layers)
        ]
        new, out = pred_step_np(self.params, states, [s[-1] for s in todo])
        proj = out @ self.params.joint_pred.data
        for k, s in enumerate(todo):
            self.states[s] = [(c[k], h[k]) for c, h in new]
            self.proj[s] = proj[k]


def _ranked(hyps: dict) -> list:
    return sorted(hyps.items(), key=lambda kv: (-kv[1][0], kv[0]))


def _prune(hyps: dict, beam: int) -> dict:
    if len(hyps) <= beam:
        return hyps
    return dict(_ranked(hyps)[:beam])


def streaming_beam_search(
    e_s: Iterable,
    params: RnnTParams,
    beam_size: int = 8,
    max_symbols_per_frame: int = 4,
    eos_decode_penalty: float = 0.0,
    stop_frame: int | None = None,
    utt_id: str = "",
    vocab_hash: str = "",
) -> DecodeResult:
    """Decode an encoder-output stream.

    Each hypothesis may emit up to ``max_symbols_per_frame`` labels per frame
    before the blank that moves it to the next frame. Hypotheses with the
    same label sequence are merged by log-add. ``eos_decode_penalty`` is
    subtracted from log P(</s>) before pruning; once ``</s>`` ends the best
    hypothesis, the microphone closes at that frame and decoding stops.
    ``stop_frame`` models an external end-of-query decision.
    """
    if beam_size < 1 or max_symbols_per_frame < 1:
        raise ValueError("beam_size and max_symbols_per_frame must be >= 1")
    cfg = params.config
    blank, eos = cfg.blank_id, cfg.eos_id
    v = cfg.vocab_size
    cache = _PredCache(params)
    w_enc = params.joint_enc.data

    hyps: dict = {(): (0.0, ())}
    trace = []
    close = None
    stopped_by = None
    t = -1
    for t, frame in enumerate(e_s):
        ep = np.asarray(frame, dtype=np.float64) @ w_enc
        active = hyps
        nxt: dict = {}
        for k in range(max_symbols_per_frame + 1):
            if not active:
                break
            seqs = sorted(active)
            cache.ensure(seqs)
            lp = joint_np(params, ep, np.stack([cache.proj[s] for s in seqs]))
            expanded: dict = {}
            for i, seq in enumerate(seqs):
                score, toks = active[seq]
                sb = score + lp[i, blank]
                prev = nxt.get(seq)
                if prev is None:
                    nxt[seq] = (sb, toks)
                else:
                    nxt[seq] = (np.logaddexp(prev[0], sb), prev[1] if prev[0] >= sb else toks)
                if k == max_symbols_per_frame or (seq and seq[-1] == eos):
                    continue
                row = lp[i].copy()
                row[blank] = -np.inf
                row[eos] = row[eos] - eos_decode_penalty
                if beam_size < v - 1:
                    cand = np.argpartition(-row, beam_size)[:beam_size]
                else:
                    cand = range(v)
                for c in cand:
                    s = row[c]
                    if s == -np.inf or np.isnan(s):
                        continue
                    expanded[seq + (int(c),)] = (score + s, toks + (float(s),))
            active = _prune(expanded, beam_size)
            if active and len(nxt) >= beam_size:
                floor = _ranked(nxt)[beam_size - 1][1][0]
                active = {s: x for s, x in active.items() if x[0] > floor}
        hyps = _prune(nxt, beam_size)
        top = _ranked(hyps)[0][0]
        trace.append(top)
        if top and top[-1] == eos:
            close = t
            stopped_by = "eos"
            break
        if stop_frame is not None and t >= stop_frame:
            stopped_by = "external"
            break

    ranked = _ranked(hyps)
    lattice = PrefixTreeLattice.from_beam_hypotheses(
        [(seq, list(toks), score) for seq, (score, toks) in ranked], utt_id=utt_id, vocab_hash=vocab_hash
    )
    return DecodeResult(
        lattice=lattice,
        mic_close_frame=close,
        trace=trace,
        hypotheses=[(seq, score) for seq, (score, _) in ranked],
        frames_consumed=t + 1,
        stopped_by=stopped_by,
    )
