"""Only the head is trained, on the class token of the last tap."""
from .common import head_activations, head_params, image_elements


def verify_parameters(arch, model):
    return True


def trainable_params(arch, model):
    return head_params(arch.width, model.num_classes)


def frozen_params(arch, model):
    return arch.param_count if model.live else 0


def activation_elements(arch, model, seq_len):
    return head_activations(arch.width, model.num_classes, input_needs_grad=False)


def input_elements(arch, model, seq_len):
    if model.live:
        return image_elements(arch) + seq_len * arch.width
    return seq_len * arch.width
