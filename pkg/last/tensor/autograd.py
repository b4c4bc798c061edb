"""
Reverse-mode automatic differentiation over numpy arrays.

Every differentiable op builds its output through :func:`record`, handing over
a closure that maps the output gradient to one gradient per parent and the
buffers it keeps alive for that closure. :func:`backward` walks the graph once,
then releases it; the :class:`Tape` it returns reports what was retained.
"""
import contextlib
import threading

import numpy as np

from last.errors import GraphError

_grad_mode = threading.local()


def is_grad_enabled():
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """Dense float array with optional participation in the autodiff graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self._requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._retained = ()
        self._released = False
        self.op = None

    @property
    def requires_grad(self):
        return self._requires_grad

    @property
    def is_leaf(self):
        return not self._parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self):
        label = " name=%s" % self.name if self.name else ""
        return "Tensor(shape=%s, requires_grad=%s%s)" % (self.shape, self.requires_grad, label)

    def __len__(self):
        return len(self.data)

    # Arithmetic is implemented in last.tensor.functional; the dunders below
    # only forward to it.
    def __add__(self, other):
        from last.tensor import functional

        return functional.add(self, other)

    def __radd__(self, other):
        from last.tensor import functional

        return functional.add(other, self)

    def __sub__(self, other):
        from last.tensor import functional

        return functional.sub(self, other)

    def __rsub__(self, other):
        from last.tensor import functional

        return functional.sub(other, self)

    def __mul__(self, other):
        from last.tensor import functional

        return functional.mul(self, other)

    def __rmul__(self, other):
        from last.tensor import functional

        return functional.mul(other, self)

    def __neg__(self):
        from last.tensor import functional

        return functional.mul(self, -1.0)

    def __matmul__(self, other):
        from last.tensor import functional

        return functional.matmul(self, other)

    def __getitem__(self, index):
        from last.tensor import functional

        return functional.index(self, index)

    def reshape(self, *shape):
        from last.tensor import functional

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return functional.reshape(self, shape)

    def swapaxes(self, axis1, axis2):
        from last.tensor import functional

        return functional.swapaxes(self, axis1, axis2)

    def sum(self, axis=None, keepdims=False):
        from last.tensor import functional

        return functional.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from last.tensor import functional

        return functional.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named leaf tensor owned by a model; frozen parameters never receive gradients."""

    def __init__(self, data, name, frozen=False):
        super().__init__(data, name=name)
        self._frozen = bool(frozen)

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, value):
        self._frozen = bool(value)
        if self._frozen:
            self.grad = None

    @property
    def requires_grad(self):
        return not self._frozen

    def __repr__(self):
        return "Parameter(%s, shape=%s, frozen=%s)" % (self.name, self.shape, self.frozen)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record(data, parents, backward_fn, retained=(), op=None):
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    ``retained`` lists the arrays or tensors the closure keeps for the backward
    pass; Parameters are skipped since they exist independently of the graph.
    """
    out = Tensor(data)
    out.op = op
    if not is_grad_enabled() or not any(parent.requires_grad for parent in parents):
        return out
    out._requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward_fn
    kept = list()
    for item in retained:
        if item is None or isinstance(item, Parameter):
            continue
        kept.append(item.data if isinstance(item, Tensor) else item)
    out._retained = tuple(kept)
    return out


def _owner(array):
    while isinstance(array.base, np.ndarray):
        array = array.base
    return array


def _topological_order(root):
    order = list()
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class Tape:
    """The recorded graph behind a scalar loss and the buffers it retains.

    A buffer is counted once per underlying allocation: views of an array
    that is already retained add nothing.
    """

    def __init__(self, loss):
        self.loss = loss
        self.nodes = _topological_order(loss)
        owners = dict()
        for node in self.nodes:
            for array in node._retained:
                owner = _owner(array)
                owners[id(owner)] = owner
        self._owners = list(owners.values())
        self.retained_count = len(self._owners)
        self.retained_elements = int(sum(owner.size for owner in self._owners))

    def __repr__(self):
        return "Tape(nodes=%i, retained=%i buffers / %i elements)" % (
            len(self.nodes),
            self.retained_count,
            self.retained_elements,
        )

    def leaves(self):
        return [node for node in self.nodes if node.is_leaf]


def _accumulate(grads, node, grad):
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + grad
    else:
        grads[key] = grad


def backward(loss):
    """Populate ``.grad`` of every trainable leaf reachable from ``loss``.

    The graph is released afterwards; a second call on the same loss raises
    GraphError. Returns the :class:`Tape` describing the pass.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor, got %s" % type(loss).__name__)
    if loss._released:
        raise GraphError("backward was already called on this graph; run the forward pass again")
    if loss.size != 1:
        raise GraphError("backward needs a scalar loss, got shape %s" % (loss.shape,))
    if not loss.requires_grad or loss.is_leaf:
        raise GraphError("loss is not part of a recorded computation graph")

    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._backward(grad)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is not None and parent.requires_grad:
                _accumulate(grads, parent, parent_grad)

    for node in tape.nodes:
        if not node.is_leaf:
            node._backward = None
            node._retained = ()
            node._released = True
    return tape
