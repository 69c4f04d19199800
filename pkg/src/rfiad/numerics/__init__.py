from .optim import AdamState, LbfgsConfig, LbfgsResult, adam_step, lbfgs_minimize
from .tensor import (
    ContractError,
    DomainError,
    NonFiniteError,
    NumericsError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    cosine_matrix,
    cosine_similarity,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    no_tape,
    norm,
    normalize_rows,
    reshape,
    softmax,
    sqrt,
    stack,
    tanh,
    transpose,
)

__all__ = [
    "AdamState", "LbfgsConfig", "LbfgsResult", "adam_step", "lbfgs_minimize",
    "ContractError", "DomainError", "NonFiniteError", "NumericsError", "Tape", "Tensor",
    "as_tensor", "backward", "concat", "cosine_matrix", "cosine_similarity", "exp", "gelu",
    "l2_normalize", "layer_norm", "matmul", "no_tape", "norm", "normalize_rows", "reshape",
    "softmax", "sqrt", "stack", "tanh", "transpose",
]
