"""Depth-first lattice rescoring with the attention decoder."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..harness.metrics import percentile
from ..lattice import PrefixTreeLattice
from .model import AttentionSourceCache, DecoderState, LasParams, initial_decoder_state, teacher_force_step


def _expand(state: DecoderState, tokens: list[int], cache, params, batched: bool):
    """Advance one parent state by each child token; returns [(state, logp_row)]."""
    if batched:
        st, lp = teacher_force_step(state.repeat(len(tokens)), np.asarray(tokens), cache, params)
        return [(st.row(i), lp[i]) for i in range(len(tokens))]
    out = []
    for tok in tokens:
        st, lp = teacher_force_step(state, tok, cache, params)
        out.append((st, lp[0]))
    return out


def rescore_lattice(lattice: PrefixTreeLattice, cache: AttentionSourceCache, params: LasParams,
                    batched: bool = True) -> PrefixTreeLattice:
    """Return a copy of ``lattice`` with second-pass scores on every arc and terminal.

    Each node's outgoing arcs read their score from the single next-token
    distribution computed at that node; a terminal also reads the end
    symbol. Children are visited depth-first in token-id order. With
    ``batched`` the child decoder steps of a branch run as one batch.
    """
    out = copy.deepcopy(lattice)
    eos = params.config.eos_id
    state, lp = teacher_force_step(initial_decoder_state(params), eos, cache, params)
    stack = [(out.root, state, lp[0])]
    while stack:
        node, state, logp = stack.pop()
        if node in out.terminals:
            out.terminals[node].final_las = float(logp[eos])
        kids = sorted(out.children[node].items())
        if not kids:
            continue
        for tok, a in kids:
            out.arcs[a].las_logp = float(logp[tok])
        expanded = _expand(state, [tok for tok, _ in kids], cache, params, batched)
        for (tok, a), (st, lp_row) in reversed(list(zip(kids, expanded))):
            stack.append((out.arcs[a].dst, st, lp_row))
    return out


@dataclass
class BenchStats:
    p50_ms: float
    p90_ms: float
    times_ms: list = field(default_factory=list)


def bench_rescore(items: Sequence[tuple[PrefixTreeLattice, AttentionSourceCache]], params: LasParams,
                  batched: bool = True, repetitions: int = 1) -> BenchStats:
    """Wall time of :func:`rescore_lattice` alone (caches are prebuilt), per utterance.

    Each utterance's time is the median over ``repetitions`` runs.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if not items:
        raise ValueError("nothing to benchmark")
    times = []
    for lat, cache in items:
        cache.keys  # materialise outside the timed region
        runs = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            rescore_lattice(lat, cache, params, batched=batched)
            runs.append((time.perf_counter() - t0) * 1000.0)
        times.append(float(np.median(runs)))
    return BenchStats(percentile(times, 50), percentile(times, 90), times)
