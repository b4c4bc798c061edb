import numpy as np

from last.errors import GraphError


class AdamState:
    """First/second moment buffers and step counter for a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first_moment = dict()
        self.second_moment = dict()
        for param in self.params:
            self.first_moment[id(param)] = np.zeros_like(param.data)
            self.second_moment[id(param)] = np.zeros_like(param.data)

    @property
    def state_elements(self):
        """Scalars held in moment buffers for parameters that are currently trainable."""
        return int(sum(2 * p.size for p in self.params if p.requires_grad))

    def __repr__(self):
        return "AdamState(params=%i, step=%i, lr=%g)" % (len(self.params), self.step, self.lr)


def adam_step(params, state):
    """One bias-corrected Adam update; gradients are cleared afterwards.

    Frozen parameters are skipped. A trainable parameter without a gradient
    raises GraphError before anything is modified.
    """
    params = list(params)
    trainable = [p for p in params if p.requires_grad]
    for param in trainable:
        if param.grad is None:
            raise GraphError("parameter %s has no gradient; call backward before adam_step" % param.name)
        if id(param) not in state.first_moment:
            raise GraphError("parameter %s is not tracked by this optimizer state" % param.name)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for param in trainable:
        m = state.first_moment[id(param)]
        v = state.second_moment[id(param)]
        m *= state.beta1
        m += (1.0 - state.beta1) * param.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * param.grad * param.grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    for param in params:
        param.grad = None
