"""
Differentiable operations.

Each op computes its forward value with numpy and registers a backward
closure through :func:`last.tensor.autograd.record`. What an op lists as
retained is what the memory model counts:

* matmul keeps each operand whose partner needs a gradient,
* layer_norm keeps the normalized input (x or gamma needs a gradient) and the
  inverse standard deviation (x needs a gradient),
* gelu keeps its input, softmax its output, cross_entropy its probabilities,
* elementwise additions, scaling by constants, reshapes and indexing keep nothing.
"""
import math

import numpy as np
from scipy import special

from last.errors import ShapeError
from last.tensor.autograd import Tensor, as_tensor, record

LAYER_NORM_EPS = 1e-6


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_scalar(value):
    return isinstance(value, (int, float, np.floating, np.integer))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape_a, shape_b = a.shape, b.shape

    def _backward(grad):
        return _unbroadcast(grad, shape_a), _unbroadcast(grad, shape_b)

    return record(a.data + b.data, (a, b), _backward, op="add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape_a, shape_b = a.shape, b.shape

    def _backward(grad):
        return _unbroadcast(grad, shape_a), -_unbroadcast(grad, shape_b)

    return record(a.data - b.data, (a, b), _backward, op="sub")


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)

    def _backward(grad):
        return (grad * factor,)

    return record(a.data * factor, (a,), _backward, op="scale")


def mul(a, b):
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    shape_a, shape_b = a.shape, b.shape

    def _backward(grad):
        grad_a = _unbroadcast(grad * b.data, shape_a) if a.requires_grad else None
        grad_b = _unbroadcast(grad * a.data, shape_b) if b.requires_grad else None
        return grad_a, grad_b

    retained = (b if a.requires_grad else None, a if b.requires_grad else None)
    return record(a.data * b.data, (a, b), _backward, retained=retained, op="mul")


def matmul(a, b):
    """Batched matrix product ``a[..., M, K] @ b[..., K, P]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul dimension mismatch: %s @ %s" % (a.shape, b.shape))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul batch dimensions do not broadcast: %s @ %s" % (a.shape, b.shape))
    shape_a, shape_b = a.shape, b.shape

    def _backward(grad):
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = _unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), shape_a)
        if b.requires_grad:
            grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), shape_b)
        return grad_a, grad_b

    retained = (b if a.requires_grad else None, a if b.requires_grad else None)
    return record(out, (a, b), _backward, retained=retained, op="matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def reshape(a, shape):
    a = as_tensor(a)
    original = a.shape

    def _backward(grad):
        return (grad.reshape(original),)

    return record(a.data.reshape(shape), (a,), _backward, op="reshape")


def swapaxes(a, axis1, axis2):
    a = as_tensor(a)

    def _backward(grad):
        return (np.swapaxes(grad, axis1, axis2),)

    return record(np.swapaxes(a.data, axis1, axis2), (a,), _backward, op="swapaxes")


def index(a, key):
    """Basic (slice/integer) indexing; the class token is read this way."""
    a = as_tensor(a)
    shape = a.shape

    def _backward(grad):
        full = np.zeros(shape)
        full[key] = grad
        return (full,)

    return record(a.data[key], (a,), _backward, op="index")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("cannot concatenate shapes %s" % [t.shape for t in tensors])
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return record(out, tuple(tensors), _backward, op="concat")


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def _backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)

    return record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward, op="sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_lastdim(x):
    """Softmax over the last axis with max subtraction."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / np.sum(exps, axis=-1, keepdims=True)

    def _backward(grad):
        return (out * (grad - np.sum(grad * out, axis=-1, keepdims=True)),)

    return record(out, (x,), _backward, retained=(out,), op="softmax")


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Per-token normalisation over the last axis, eps inside the square root."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            "layer_norm affine shapes %s/%s do not match width %i" % (gamma.shape, beta.shape, width)
        )
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    variance = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(variance + eps)
    normalized = centered * rstd
    out = normalized * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def _backward(grad):
        grad_x = grad_gamma = grad_beta = None
        if gamma.requires_grad:
            grad_gamma = np.sum(grad * normalized, axis=lead)
        if beta.requires_grad:
            grad_beta = np.sum(grad, axis=lead)
        if x.requires_grad:
            g = grad * gamma.data
            grad_x = rstd * (
                g
                - np.mean(g, axis=-1, keepdims=True)
                - normalized * np.mean(g * normalized, axis=-1, keepdims=True)
            )
        return grad_x, grad_gamma, grad_beta

    retained = (
        normalized if (x.requires_grad or gamma.requires_grad) else None,
        rstd if x.requires_grad else None,
    )
    return record(out, (x, gamma, beta), _backward, retained=retained, op="layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf form of the Gaussian CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def _backward(grad):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (grad * (cdf + x.data * pdf),)

    return record(out, (x,), _backward, retained=(x,), op="gelu")


def split_heads(t, n_heads):
    """[..., L, n*w] -> [..., n, L, w]"""
    *lead, length, width = t.shape
    if width % n_heads:
        raise ShapeError("width %i is not divisible into %i heads" % (width, n_heads))
    return swapaxes(reshape(t, tuple(lead) + (length, n_heads, width // n_heads)), -2, -3)


def merge_heads(t):
    """[..., n, L, w] -> [..., L, n*w]"""
    *lead, n_heads, length, width = t.shape
    return reshape(swapaxes(t, -2, -3), tuple(lead) + (length, n_heads * width))


def multi_head_attention(q, k, v, n_heads):
    """Scaled dot-product attention over ``n_heads`` heads, heads merged on return.

    The scale is ``1/sqrt(head width)``.
    """
    head_width = q.shape[-1] // n_heads
    qh, kh, vh = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    scores = scale(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(head_width))
    weights = softmax_lastdim(scores)
    return merge_heads(matmul(weights, vh))


def per_sample_cross_entropy(logits, labels):
    """Plain numpy ``-log softmax(logits)[label]`` per row, no graph."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    lse = special.logsumexp(logits, axis=-1)
    return lse - logits[np.arange(len(labels)), labels]


def cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the batch (log-sum-exp form).

    ``logits`` is [C] with an integer label, or [B, C] with B labels.
    """
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels))
    squeeze = logits.ndim == 1
    data = logits.data[None, :] if squeeze else logits.data
    if data.ndim != 2 or labels.shape != (data.shape[0],):
        raise ShapeError("cross_entropy expects [B, C] logits and B labels, got %s and %s" % (logits.shape, labels.shape))
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers, got dtype %s" % labels.dtype)
    num_classes = data.shape[1]
    bad = (labels < 0) | (labels >= num_classes)
    if np.any(bad):
        raise ValueError("invalid label %i for %i classes" % (labels[bad][0], num_classes))

    batch = data.shape[0]
    rows = np.arange(batch)
    lse = special.logsumexp(data, axis=-1, keepdims=True)
    probs = np.exp(data - lse)
    loss = np.mean(lse[:, 0] - data[rows, labels])

    def _backward(grad):
        delta = probs.copy()
        delta[rows, labels] -= 1.0
        delta *= grad / batch
        return (delta[0] if squeeze else delta,)

    return record(np.asarray(loss), (logits,), _backward, retained=(probs,), op="cross_entropy")
