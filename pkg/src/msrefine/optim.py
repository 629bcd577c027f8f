"""Adam over an explicit list of leaf tensors."""

import numpy as np

from .errors import NonFiniteError


class Adam:
    """Plain Adam with bias correction; updates parameters in place.

    >>> opt = Adam([z], lr=0.002)
    >>> opt.zero_grad(); loss.backward(); opt.step()
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient; call backward() first")
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"parameter {i} has a non-finite gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "betas": (self.beta1, self.beta2),
            "eps": self.eps,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state):
        if len(state["m"]) != len(self.params):
            raise ValueError("state has a different number of parameters")
        for p, m in zip(self.params, state["m"]):
            if m.shape != p.data.shape:
                raise ValueError(f"moment shape {m.shape} != parameter shape {p.data.shape}")
        self.t = int(state["t"])
        self.lr = state["lr"]
        self.beta1, self.beta2 = state["betas"]
        self.eps = state["eps"]
        self.m = [np.array(a, copy=True) for a in state["m"]]
        self.v = [np.array(a, copy=True) for a in state["v"]]
