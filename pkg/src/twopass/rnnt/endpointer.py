"""Early/late penalties on the end-of-query token during transducer training."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .loss import RnnTLogProbLattice


@dataclass(frozen=True)
class EndpointerPenaltyConfig:
    """Scales and grace period for the ``</s>`` timing penalty.

    An empty ``enabled_domains`` turns off both the penalty and the ``</s>``
    training target for every domain.
    """

    alpha_early: float = 0.0
    alpha_late: float = 0.0
    t_buffer: int = 0
    enabled_domains: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.alpha_early < 0 or self.alpha_late < 0 or self.t_buffer < 0:
            raise ValueError("penalty scales and t_buffer must be non-negative")
        object.__setattr__(self, "enabled_domains", frozenset(self.enabled_domains))

    def enabled_for(self, domain_id: int) -> bool:
        return domain_id in self.enabled_domains

    def penalty(self, t, t_eos: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        early = np.maximum(0.0, self.alpha_early * (t_eos - t))
        late = np.maximum(0.0, self.alpha_late * (t - t_eos - self.t_buffer))
        return early + late


def eos_penalty_offsets(num_frames: int, num_labels: int, vocab_size: int, eos_id: int, t_eos: int,
                        cfg: EndpointerPenaltyConfig) -> np.ndarray:
    """Additive (U+1, T, V) array: minus the penalty at the ``</s>`` entry of row U-1."""
    off = np.zeros((num_labels + 1, num_frames, vocab_size))
    off[num_labels - 1, :, eos_id] = -cfg.penalty(np.arange(num_frames), t_eos)
    return off


def apply_eos_penalty(lattice: RnnTLogProbLattice, labels, t_eos: int, cfg: EndpointerPenaltyConfig,
                      eos_id: int) -> RnnTLogProbLattice:
    """Subtract the timing penalty from log P(</s>) in the last label row.

    Rows are not renormalised. Every other entry is left bit-identical.
    """
    labels = list(labels)
    if not labels or labels[-1] != eos_id:
        raise ValueError("labels must end with the end-of-query token")
    grid = np.array(lattice.grid, dtype=np.float64, copy=True)
    u = len(labels) - 1
    grid[u, :, eos_id] = grid[u, :, eos_id] - cfg.penalty(np.arange(grid.shape[1]), t_eos)
    return RnnTLogProbLattice(grid, lattice.blank_id)
