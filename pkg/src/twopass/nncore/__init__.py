"""Minimal differentiable compute core."""
from .autodiff import (
    GraphStateError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    embedding,
    exp,
    is_grad_enabled,
    log,
    log_softmax,
    logsumexp,
    make_op,
    matmul,
    mul,
    no_grad,
    parameter,
    pick,
    reshape,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
)
from .gradcheck import gradient_check
from .layers import (
    AttentionParams,
    LstmParams,
    attend,
    init_uniform,
    linear,
    load_state_dict,
    lstm_cell_forward,
    lstm_sequence,
    lstm_step,
    multi_head_attention,
    named_parameters,
    parameters,
    project_source,
    split_heads,
    state_dict,
    zero_grads,
)

__all__ = [name for name in dir() if not name.startswith("_")]
