"""AdamW with decoupled weight decay and exponential per-epoch learning-rate decay."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


class AdamW:
    """Adaptive-moment optimizer; weight decay is applied to the parameter
    directly rather than through the gradient.

    Update per parameter p with gradient g at step t:

        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

    ``end_epoch`` multiplies the learning rate by ``lr_decay`` so the
    rate decreases exponentially over epochs and never increases.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.05, lr_decay=0.98):
        if isinstance(params, dict):
            self.names = list(params.keys())
            self.params = list(params.values())
        else:
            self.params = list(params)
            self.names = [f"p{i}" for i in range(len(self.params))]
        if not all(isinstance(p, Tensor) for p in self.params):
            raise TypeError("params must be Tensors")
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        if weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if not 0.0 < lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {lr_decay}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_decay = float(lr_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """Apply one update to every parameter that carries a gradient."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            self.m[i] = m
            self.v[i] = v
            m_hat = m / bc1
            v_hat = v / bc2
            # replace, never mutate: recorded tapes hold references to the old array
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                         + self.weight_decay * p.data)

    def end_epoch(self):
        self.lr *= self.lr_decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    # -- checkpoint support ------------------------------------------------

    def state_arrays(self):
        """Moment accumulators as named arrays for serialization."""
        out = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = v
        return out

    def state_meta(self):
        return {"step_count": self.step_count, "lr": self.lr}

    def load_state(self, arrays, meta):
        for i, name in enumerate(self.names):
            m = arrays[f"opt.m.{name}"]
            v = arrays[f"opt.v.{name}"]
            if m.shape != self.params[i].data.shape or v.shape != self.params[i].data.shape:
                raise ShapeError(f"optimizer state shape mismatch for {name}")
            self.m[i] = m.astype(self.params[i].dtype)
            self.v[i] = v.astype(self.params[i].dtype)
        self.step_count = int(meta["step_count"])
        self.lr = float(meta["lr"])
