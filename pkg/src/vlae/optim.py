"""Gradient-based optimizers over Parameter lists, plus Polyak shadows."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter

__all__ = ["Adamax", "Adam", "make_optimizer"]


class _MomentOptimizer(object):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad ** 2))
        return float(np.sqrt(total))

    def state_arrays(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, blobs: dict) -> None:
        self.t = int(blobs["t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(blobs[f"m{i}"], dtype=np.float64).copy()
            self.v[i] = np.asarray(blobs[f"v{i}"], dtype=np.float64).copy()


class Adamax(_MomentOptimizer):
    """Adam variant with an infinity-norm second moment."""

    def step(self):
        self.t += 1
        corr = 1.0 - self.beta1 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = np.maximum(self.beta2 * self.v[i], np.abs(g))
            p.data -= (self.lr / corr) * self.m[i] / (self.v[i] + self.eps)


class Adam(_MomentOptimizer):
    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g ** 2
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def make_optimizer(kind: str, params, lr: float) -> _MomentOptimizer:
    if kind == "adamax":
        return Adamax(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")
