from .tensor import (
    OPS, ShapeError, Tensor, add, as_tensor, backward, bilinear_sample, clip, concat, conv2d, cos, div, exp,
    forward_op, gather_rows, getitem, grad_enabled, layer_norm, log, matmul, mul, no_grad, power, reduce_mean,
    reduce_sum, relu, reshape, sigmoid, sin, smooth_l1, softmax, sqrt, sub, transpose, upsample_nearest,
)
from .optim import AdamW, NonFiniteGradient, OptimizerState, adamw_step
from .module import Module, Param, uniform_init
