"""Word error rate, latency percentiles and endpoint latency."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..frontend import normalize_transcript


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int, int]:
    """Levenshtein distance with unit costs as ``(distance, S, I, D)``.

    Among equal-cost alignments the backtrace prefers substitution (or
    match), then deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(d[n, m]), int(s), int(ins), int(dels)


@dataclass
class EvalRecord:
    uid: str
    ref: tuple
    hyp: tuple
    speech_end_ms: float
    mic_close_frame: int | None = None
    ep_latency_ms: float | None = None
    subs: int = 0
    ins: int = 0
    dels: int = 0

    def __post_init__(self):
        if (self.mic_close_frame is None) != (self.ep_latency_ms is None):
            raise ValueError("ep_latency_ms must be present exactly when mic_close_frame is")

    @property
    def errors(self) -> int:
        return self.subs + self.ins + self.dels

    @property
    def early_cutoff(self) -> bool:
        return self.ep_latency_ms is not None and self.ep_latency_ms < 0


def make_record(uid: str, ref: Sequence[str], hyp: Sequence[str], speech_end_ms: float,
                mic_close_frame: int | None = None, frame_ms: float = 30.0,
                spelling: Mapping[str, str] | None = None) -> EvalRecord:
    """Score one utterance; both sides are spelling-normalised first."""
    spelling = spelling or {}
    r = tuple(normalize_transcript(ref, spelling))
    h = tuple(normalize_transcript(hyp, spelling))
    _, s, i, d = edit_distance(r, h)
    lat = None if mic_close_frame is None else ep_latency(mic_close_frame, speech_end_ms, frame_ms)
    return EvalRecord(uid, r, h, speech_end_ms, mic_close_frame, lat, s, i, d)


def wer(records: Iterable[EvalRecord]) -> float:
    records = list(records)
    total = sum(len(r.ref) for r in records)
    if total == 0:
        raise ValueError("WER needs a non-empty reference")
    return 100.0 * sum(r.errors for r in records) / total


def error_counts(records: Iterable[EvalRecord]) -> tuple[int, int, int, int]:
    """(substitutions, insertions, deletions, reference words)."""
    s = i = d = n = 0
    for r in records:
        s, i, d, n = s + r.subs, i + r.ins, d + r.dels, n + len(r.ref)
    return s, i, d, n


def percentile(values: Iterable[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (1-based)."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ValueError("percentile of an empty list")
    if not 0 <= p <= 100:
        raise ValueError("p must lie in [0, 100]")
    rank = max(1, math.ceil(round(p / 100.0 * len(vals), 9)))
    return vals[rank - 1]


def ep_latency(mic_close_frame: int, speech_end_ms: float, frame_duration_ms: float = 30.0) -> float:
    """Mic-close time minus speech end; negative means the user was cut off."""
    return mic_close_frame * frame_duration_ms - speech_end_ms
