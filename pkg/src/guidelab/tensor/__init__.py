"""Numpy tensor engine with reverse-mode autodiff, layers' kernels and optimizers."""
from . import ops
from .ops import (DegenerateError, LabelError, apply_elementwise, avg_pool2d, batch_norm,
                  bce_with_logits, conv2d, elman_scan, embedding, layer_norm, linear, matmul,
                  mse_loss, relu, sigmoid, softmax, softmax_cross_entropy, tanh)
from .optim import OptimizerState, clip_grad_norm, optimizer_step
from .rng import RngState, randn
from .tensor import (GradError, NonFiniteError, ShapeError, Tensor, as_tensor, backward,
                     finite_checks, is_grad_enabled, no_grad, zero_grads)

__all__ = [
    "ops", "Tensor", "as_tensor", "backward", "zero_grads", "no_grad", "finite_checks",
    "is_grad_enabled", "GradError", "NonFiniteError", "ShapeError", "DegenerateError",
    "LabelError", "RngState", "randn", "OptimizerState", "optimizer_step", "clip_grad_norm",
    "matmul", "linear", "conv2d", "avg_pool2d", "batch_norm", "layer_norm", "relu", "tanh",
    "sigmoid", "softmax", "softmax_cross_entropy", "bce_with_logits", "mse_loss", "embedding",
    "elman_scan", "apply_elementwise",
]
