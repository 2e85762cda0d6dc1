"""Energy-threshold voice-activity endpointer (the fixed-silence EOQ baseline)."""
from __future__ import annotations

import math

import numpy as np

from ..frontend import FeatureSequence


def frame_energy(frames) -> np.ndarray:
    """Mean squared value per raw frame."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.mean(frames * frames, axis=1)


def vad_endpoint(features: FeatureSequence, energy_threshold: float = 0.4,
                 silence_interval_ms: float = 300.0) -> float | None:
    """Time (ms) at which speech has been seen and then ``silence_interval_ms`` of silence.

    Raw frame ``i`` spans [i*hop, (i+1)*hop); the close time is the end of
    the frame that completes the silence interval. ``None`` if that never
    happens (including utterances with no speech at all).
    """
    if silence_interval_ms <= 0:
        raise ValueError("silence_interval_ms must be positive")
    hop = features.hop_ms
    need = int(math.ceil(round(silence_interval_ms / hop, 9)))
    speech_seen = False
    run = 0
    for i, e in enumerate(frame_energy(features.frames)):
        if e >= energy_threshold:
            speech_seen, run = True, 0
        elif speech_seen:
            run += 1
            if run >= need:
                return (i + 1) * hop
    return None


def close_frame_for_ms(close_ms: float, frame_ms: float) -> int:
    """First decoder frame index whose start is at or after ``close_ms``."""
    return int(math.ceil(round(close_ms / frame_ms, 9)))


def combine_close_frames(*frames: int | None) -> int | None:
    """Earliest of the available close decisions."""
    present = [f for f in frames if f is not None]
    return min(present) if present else None
