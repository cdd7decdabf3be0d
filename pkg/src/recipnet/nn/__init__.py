"""Minimal autodiff kernel and the CNN path loss regressor."""
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ConvBlock, ModelConfig, ModelParams, forward, init_params, loss_and_grads
from .ops import conv2d, global_avg_pool, linear, maxpool2d, mse_loss, relu
from .optim import OptimState, adam_step
from .tensor import GraphError, NonFiniteError, Tensor, backward

__all__ = [
    "ConvBlock", "GraphError", "ModelConfig", "ModelParams", "NonFiniteError", "OptimState",
    "Tensor", "adam_step", "backward", "conv2d", "forward", "global_avg_pool", "init_params",
    "linear", "load_checkpoint", "loss_and_grads", "maxpool2d", "mse_loss", "relu",
    "save_checkpoint",
]
