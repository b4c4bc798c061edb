"""Deep prompts: ``prompt_tokens`` trainable tokens enter every block; the backbone is frozen."""
from last.errors import ConfigurationError

from .common import frozen_block_activations, head_activations, head_params, image_elements


def verify_parameters(arch, model):
    if model.prompt_tokens < 1:
        raise ConfigurationError("prompt strategy needs prompt_tokens >= 1, got %r" % (model.prompt_tokens,))
    return True


def trainable_params(arch, model):
    return arch.depth * model.prompt_tokens * arch.width + head_params(arch.width, model.num_classes)


def frozen_params(arch, model):
    return arch.param_count


def activation_elements(arch, model, seq_len):
    extended = seq_len + model.prompt_tokens
    blocks = arch.depth * frozen_block_activations(extended, arch.width, arch.heads, arch.hidden_width)
    return blocks + head_activations(arch.width, model.num_classes)


def input_elements(arch, model, seq_len):
    return image_elements(arch)
