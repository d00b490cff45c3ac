"""Float64 tensors, reverse-mode tape, layers, optimizer, checkpoints."""
from mprlab.numcore.checkpoint import load_checkpoint, read_sidecar, save_checkpoint, write_sidecar
from mprlab.numcore.init import orthogonal_init, zero_init
from mprlab.numcore.nn import MLP, EnsembleLinear, EnsembleMLP, LayerNorm, Linear, Module
from mprlab.numcore.optim import AdamW
from mprlab.numcore.tensor import (
    Tape,
    Tensor,
    add,
    concat,
    exp,
    gather_rows,
    gelu,
    layernorm,
    log,
    matmul,
    mean,
    mse,
    mul,
    relu,
    softmax,
    sum,
    tanh,
)

__all__ = [
    "AdamW", "EnsembleLinear", "EnsembleMLP", "LayerNorm", "Linear", "MLP", "Module", "Tape", "Tensor",
    "add", "concat", "exp", "gather_rows", "gelu", "layernorm", "load_checkpoint",
    "log", "matmul", "mean", "mse", "mul", "orthogonal_init", "read_sidecar", "relu",
    "save_checkpoint", "softmax", "sum", "tanh", "write_sidecar", "zero_init",
]
