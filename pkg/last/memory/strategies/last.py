"""
Low-rank attention side-network on backbone taps.

Backbone internals never enter the backward pass; only side-network
modules and the head keep activations. The taps themselves are inputs.
"""
from last.errors import ConfigurationError
from last.side_tuning.side_network import SideConfig, side_param_count

from .common import ffn_module_activations, head_activations, image_elements, lsa_module_activations


def side_config(arch, model):
    if model.side is not None:
        return model.side
    return SideConfig.recommended(arch, num_classes=model.num_classes)


def verify_parameters(arch, model):
    side = side_config(arch, model)
    if side.width != arch.width or side.depth != arch.depth:
        raise ConfigurationError(
            "side-network built for d=%i, N=%i; backbone has d=%i, N=%i"
            % (side.width, side.depth, arch.width, arch.depth)
        )
    return True


def trainable_params(arch, model):
    return side_param_count(side_config(arch, model))


def frozen_params(arch, model):
    return arch.param_count if model.live else 0


def activation_elements(arch, model, seq_len):
    side = side_config(arch, model)
    total = 0
    # the first module reads z_0 (or z_0 + z_1), which needs no gradient
    needs_grad = False
    for _ in range(side.block_count * side.stack):
        if side.has_attention:
            total += lsa_module_activations(seq_len, side.width, side.rank, side.n_head, needs_grad)
            needs_grad = True
        if side.has_ffn:
            total += ffn_module_activations(seq_len, side.width, side.ffn_hidden, needs_grad)
            needs_grad = True
    return total + head_activations(side.width, side.num_classes)


def input_elements(arch, model, seq_len):
    side = side_config(arch, model)
    taps = side.tap_count * seq_len * arch.width
    if model.live:
        return taps + image_elements(arch)
    return taps
