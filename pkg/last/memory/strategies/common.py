"""
Per-sample element counts shared by the strategies.

The counts follow the retention rules of the autodiff tape: a matmul keeps
each operand whose partner needs a gradient, layer_norm keeps the normalized
input (x or gamma needs a gradient) and 1/std per token (x needs a
gradient), gelu keeps its input, softmax its output and cross_entropy its
probabilities. Parameters are never counted.
"""


def head_params(width, num_classes):
    return 2 * width + width * num_classes + num_classes


def head_activations(width, num_classes, input_needs_grad=True):
    """LayerNorm + linear on the class token, then cross-entropy."""
    return 2 * width + (1 if input_needs_grad else 0) + num_classes


def image_elements(arch):
    return arch.channels * arch.image_size * arch.image_size


def patch_count(arch, seq_len):
    return seq_len - arch.num_registers


def backbone_params(arch):
    return arch.param_count


def vit_block_activations(seq_len, width, heads, hidden):
    """A pre-LN block where every weight and the input need gradients."""
    L, d = seq_len, width
    # xhat, LN output, q, k, v, merged heads; 1/std; softmax
    attention = 6 * L * d + L + heads * L * L
    # xhat, LN output, fc1 output, GELU output; 1/std
    mlp = 2 * L * d + 2 * L * hidden + L
    return attention + mlp


def frozen_block_activations(seq_len, width, heads, hidden):
    """A pre-LN block with frozen weights whose input needs a gradient.

    Only the two layer norms, q, k and v of the attention products, the
    softmax output and the GELU input are kept.
    """
    L, d = seq_len, width
    return 5 * L * d + 2 * L + heads * L * L + L * hidden


def lsa_module_activations(seq_len, width, rank, n_head, input_needs_grad=True):
    L, d = seq_len, width
    return 2 * L * d + (L if input_needs_grad else 0) + 4 * L * rank + n_head * L * L


def ffn_module_activations(seq_len, width, hidden, input_needs_grad=True):
    L, d = seq_len, width
    return 2 * L * d + (L if input_needs_grad else 0) + 2 * L * hidden
