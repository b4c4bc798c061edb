"""Every backbone weight and the head are trained."""
from .common import head_activations, head_params, image_elements, patch_count, vit_block_activations


def verify_parameters(arch, model):
    return True


def trainable_params(arch, model):
    return arch.param_count + head_params(arch.width, model.num_classes)


def frozen_params(arch, model):
    return 0


def activation_elements(arch, model, seq_len):
    # the patch projection keeps the unfolded patches
    patches = patch_count(arch, seq_len) * arch.patch_dim
    blocks = arch.depth * vit_block_activations(seq_len, arch.width, arch.heads, arch.hidden_width)
    return patches + blocks + head_activations(arch.width, model.num_classes)


def input_elements(arch, model, seq_len):
    return image_elements(arch)
