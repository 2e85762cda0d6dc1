"""Second pass: additional encoder, attention-source cache, teacher-forced decoder, lattice rescoring."""
from .model import (
    AdditionalEncoderStream,
    AttentionSourceCache,
    DecoderState,
    LasBatch,
    LasConfig,
    LasParams,
    additional_encode,
    additional_encode_tensor,
    build_attention_cache,
    cache_from_shared,
    initial_decoder_state,
    las_ce_loss,
    make_las_batch,
    sequence_logprob,
    sequence_logprobs_tensor,
    teacher_force_step,
)
from .rescore import BenchStats, bench_rescore, rescore_lattice

__all__ = [
    "AdditionalEncoderStream",
    "AttentionSourceCache",
    "BenchStats",
    "DecoderState",
    "LasBatch",
    "LasConfig",
    "LasParams",
    "additional_encode",
    "additional_encode_tensor",
    "bench_rescore",
    "build_attention_cache",
    "cache_from_shared",
    "initial_decoder_state",
    "las_ce_loss",
    "make_las_batch",
    "rescore_lattice",
    "sequence_logprob",
    "sequence_logprobs_tensor",
    "teacher_force_step",
]
