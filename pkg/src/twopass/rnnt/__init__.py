"""First pass: transducer model, loss, endpointer penalty and streaming search."""
from ..vocab import Vocab
from .endpointer import EndpointerPenaltyConfig, apply_eos_penalty, eos_penalty_offsets
from .loss import InfeasibleAlignmentError, RnnTLogProbLattice, forward_backward, rnnt_loss, rnnt_loss_tensor
from .model import (
    EncoderStream,
    RnnTConfig,
    RnnTParams,
    TransducerBatch,
    batch_loss,
    compute_lattice,
    encode,
    encode_array,
    encode_stream,
    joint_log_probs,
    make_batch,
    predict,
    rnnt_training_loss,
)
from .search import DecodeResult, streaming_beam_search

__all__ = [
    "DecodeResult",
    "EncoderStream",
    "EndpointerPenaltyConfig",
    "InfeasibleAlignmentError",
    "RnnTConfig",
    "RnnTLogProbLattice",
    "RnnTParams",
    "TransducerBatch",
    "Vocab",
    "apply_eos_penalty",
    "batch_loss",
    "compute_lattice",
    "encode",
    "encode_array",
    "encode_stream",
    "eos_penalty_offsets",
    "forward_backward",
    "joint_log_probs",
    "make_batch",
    "predict",
    "rnnt_loss",
    "rnnt_loss_tensor",
    "rnnt_training_loss",
    "streaming_beam_search",
]
