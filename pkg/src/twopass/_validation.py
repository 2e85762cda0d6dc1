"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numbers
from typing import Sequence

from .frontend import Utterance


def check_utterances(X, name: str = "X") -> list[Utterance]:
    """A non-empty sequence of :class:`Utterance` objects, as a list."""
    if isinstance(X, Utterance):
        raise TypeError(f"{name} must be a sequence of utterances, not a single utterance")
    if not isinstance(X, Sequence) or isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be a sequence of Utterance objects")
    X = list(X)
    if not X:
        raise ValueError(f"{name} is empty")
    bad = [i for i, u in enumerate(X) if not isinstance(u, Utterance)]
    if bad:
        raise TypeError(f"{name}[{bad[0]}] is {type(X[bad[0]]).__name__}, expected Utterance")
    return X


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_unit_interval(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_positive(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not float(value) > 0.0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return float(value)
