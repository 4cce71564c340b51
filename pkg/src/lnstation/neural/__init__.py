from .autodiff import (
    Tensor,
    activation_trace,
    add,
    backward,
    clip,
    concat,
    conv3d,
    global_avg_pool,
    graph_mix,
    linear,
    log,
    matmul,
    mul,
    mul_array,
    power,
    relu,
    reshape,
    row,
    row_softmax,
    scale,
    shift,
    sigmoid,
    stack_rows,
    tmean,
    transpose,
    tsum,
)
from .checkpoint import checkpoint_hash, file_sha256, load_arrays, save_arrays
from .gradcheck import GradCheckReport, finite_diff_check
from .loss import EPS, focal_loss
from .optim import ParameterSet, TrainConfig, effective_lr, sgd_step

__all__ = [
    "EPS",
    "GradCheckReport",
    "ParameterSet",
    "Tensor",
    "TrainConfig",
    "activation_trace",
    "add",
    "backward",
    "checkpoint_hash",
    "clip",
    "concat",
    "conv3d",
    "effective_lr",
    "file_sha256",
    "finite_diff_check",
    "focal_loss",
    "global_avg_pool",
    "graph_mix",
    "linear",
    "load_arrays",
    "log",
    "matmul",
    "mul",
    "mul_array",
    "power",
    "relu",
    "reshape",
    "row",
    "row_softmax",
    "save_arrays",
    "scale",
    "sgd_step",
    "shift",
    "sigmoid",
    "stack_rows",
    "tmean",
    "transpose",
    "tsum",
]
