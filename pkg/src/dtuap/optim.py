"""Plain numpy optimizers operating in place on ``Tensor.data``."""

import numpy as np


class SGD:
    """Mini-batch SGD with heavy-ball momentum and optional L2 weight decay."""

    def __init__(self, params, lr=0.05, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= np.asarray(self.lr, dtype=p.dtype) * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam on a single array, bias-corrected. Returns the updated array."""

    def __init__(self, shape, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0

    def step(self, x, grad):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return (x - update).astype(x.dtype, copy=False)
