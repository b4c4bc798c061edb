"""Bias terms (including layer-norm shifts and the patch bias) and the head are trained."""
from .common import frozen_block_activations, head_activations, head_params, image_elements


def verify_parameters(arch, model):
    return True


def bias_count(arch):
    d, h = arch.width, arch.hidden_width
    # q, k, v, out, fc2 biases, two layer-norm shifts, fc1 bias
    return d + arch.depth * (7 * d + h)


def trainable_params(arch, model):
    return bias_count(arch) + head_params(arch.width, model.num_classes)


def frozen_params(arch, model):
    return arch.param_count - bias_count(arch)


def activation_elements(arch, model, seq_len):
    blocks = arch.depth * frozen_block_activations(seq_len, arch.width, arch.heads, arch.hidden_width)
    return blocks + head_activations(arch.width, model.num_classes)


def input_elements(arch, model, seq_len):
    return image_elements(arch)
