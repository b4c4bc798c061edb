"""Numpy tensors with reverse-mode autodiff, the differentiable ops and Adam."""
from last.tensor.autograd import Parameter, Tape, Tensor, as_tensor, backward, is_grad_enabled, no_grad
from last.tensor.optim import AdamState, adam_step
from last.tensor.gradcheck import gradcheck
from last.tensor import functional
