"""
Ladder side-tuning: a narrow transformer of width d/reduction runs next to
the frozen backbone, fed by a downsampler per tap and read out through an
upsampler.
"""
from last.errors import ConfigurationError

from .common import head_activations, head_params, image_elements, vit_block_activations


def side_width(arch, model):
    return arch.width // model.reduction


def verify_parameters(arch, model):
    if model.reduction < 1 or arch.width % model.reduction:
        raise ConfigurationError("reduction %r does not divide width %i" % (model.reduction, arch.width))
    if side_width(arch, model) % arch.heads:
        raise ConfigurationError(
            "side width %i is not divisible by %i heads" % (side_width(arch, model), arch.heads)
        )
    return True


def _side_block_params(width):
    hidden = 4 * width
    return 4 * (width * width + width) + 2 * width * hidden + hidden + width + 4 * width


def trainable_params(arch, model):
    d, ds = arch.width, side_width(arch, model)
    downsamplers = (arch.depth + 1) * (d * ds + ds)
    upsampler = ds * d + d
    blocks = arch.depth * _side_block_params(ds)
    return downsamplers + blocks + upsampler + head_params(d, model.num_classes)


def frozen_params(arch, model):
    return arch.param_count


def activation_elements(arch, model, seq_len):
    d, ds = arch.width, side_width(arch, model)
    # every downsampler keeps the backbone tap it projects
    taps = (arch.depth + 1) * seq_len * d
    blocks = arch.depth * vit_block_activations(seq_len, ds, arch.heads, 4 * ds)
    upsampler = seq_len * ds
    return taps + blocks + upsampler + head_activations(d, model.num_classes)


def input_elements(arch, model, seq_len):
    return image_elements(arch)
