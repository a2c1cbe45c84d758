from .gradcheck import finite_diff_gradcheck, gradcheck_params
from .optim import OptimizerState, TrainingError, adam_step
from .tensor import (
    DimensionError,
    GradientError,
    SelectionLog,
    Tensor,
    adaptive_avg_pool_1d,
    add,
    as_tensor,
    concat,
    conv3x3,
    default_dtype,
    divide,
    exp,
    frozen_selections,
    get_default_dtype,
    gradients,
    index_select,
    l2_norm,
    layer_norm,
    log,
    log_softmax_rows,
    masked_zero,
    matmul,
    max_over,
    multiply,
    no_grad,
    parameter,
    pooling_bins,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    select,
    sigmoid,
    softmax_rows,
    sqrt,
    subtract,
    tanh,
    transpose,
    zeros,
)
