"""Minimal float64 autodiff engine, layers, optimizer and checkpoints."""
from v2xpre.nn.layers import Affine, Conv2d, Linear, Module, Parameter
from v2xpre.nn.optim import adamw_step, cosine_lr
from v2xpre.nn.tensor import NonFiniteError, ShapeError, Tensor, backward, no_grad
