"""Structured convolutions: sum-pool decomposition, cost model and toy training."""

from ._structconv import (
    ConstraintError,
    DecomposedConv,
    DecomposedLinear,
    DivergenceError,
    Error,
    FormatError,
    ParseError,
    ResidualError,
    ShapeError,
    analyze,
    conv,
    decompose_conv,
    decompose_linear,
    random_tensor,
    reconstruct,
    run_cli,
    sr_grad,
    sr_loss,
    structure_matrix,
    structure_residual,
    sum_pool3d,
)

__version__ = "0.1.0"
