"""
Low-rank updates of W_Q and W_V inside every backbone block.

The adapters sit on the backbone's forward path, so every block behind the
first adapter has to keep its activations for the backward pass.
"""
from last.errors import ConfigurationError

from .common import head_activations, head_params, image_elements


def verify_parameters(arch, model):
    if not 1 <= model.lora_rank < arch.width:
        raise ConfigurationError("lora_rank must be in [1, %i), got %r" % (arch.width, model.lora_rank))
    return True


def trainable_params(arch, model):
    per_block = 2 * (2 * arch.width * model.lora_rank)
    return arch.depth * per_block + head_params(arch.width, model.num_classes)


def frozen_params(arch, model):
    return arch.param_count


def _block(seq_len, arch, rank, first):
    L, d, h = seq_len, arch.width, arch.hidden_width
    adapters = L * d + 2 * L * rank
    attention = arch.heads * L * L + L * d
    mlp = L * d + L + L * h
    if first:
        # input needs no gradient: only k is kept from the scores product
        return adapters + attention + L * d + mlp
    return adapters + attention + L * d + L + 2 * L * d + mlp


def activation_elements(arch, model, seq_len):
    total = _block(seq_len, arch, model.lora_rank, first=True)
    total += (arch.depth - 1) * _block(seq_len, arch, model.lora_rank, first=False)
    return total + head_activations(arch.width, model.num_classes)


def input_elements(arch, model, seq_len):
    return image_elements(arch)
