"""Central finite-difference check of the analytic gradients."""
import numpy as np

from last.tensor.autograd import backward, no_grad


def numerical_gradient(fn, param, h=1e-5):
    """Central differences of the scalar ``fn()`` with respect to every entry of ``param``."""
    original = param.data
    work = original.copy()
    param.data = work
    grad = np.zeros_like(original)
    try:
        with no_grad():
            for index in np.ndindex(*original.shape):
                saved = work[index]
                work[index] = saved + h
                plus = fn().item()
                work[index] = saved - h
                minus = fn().item()
                work[index] = saved
                grad[index] = (plus - minus) / (2.0 * h)
    finally:
        param.data = original
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(fn, params, h=1e-5):
    """Compare backward() against central differences.

    ``fn`` rebuilds the scalar loss from scratch on every call. Returns a
    dict mapping each parameter name (or position) to its relative error.
    """
    params = list(params)
    for param in params:
        param.grad = None
    backward(fn())
    errors = dict()
    for position, param in enumerate(params):
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = numerical_gradient(fn, param, h=h)
        key = param.name if param.name is not None else position
        errors[key] = relative_error(analytic, numeric)
    return errors
