"""Adam with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import TensorError


class MissingGradient(TensorError):
    """A parameter reached the optimizer without a populated gradient."""


def cosine_lr(step, total, lr_max, lr_min=0.0):
    """Cosine annealing from lr_max at step 0 to lr_min at step == total."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total)) / 2.0


class Adam:
    """Bias-corrected Adam; weight decay is applied to the value, not the
    gradient, before the moment update (decoupled decay).

    Gradients are left untouched; the caller clears them between steps.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr=None):
        """One update over all parameters at the given (or stored) rate."""
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradient(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        """Moment buffers and counters for exact training resumption."""
        return {
            "step_count": self.step_count,
            "lr": self.lr,
            "betas": (self.beta1, self.beta2),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        if set(state["m"]) != set(self.m):
            raise ValueError("optimizer state parameter names do not match")
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        self.beta1, self.beta2 = (float(b) for b in state["betas"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)
