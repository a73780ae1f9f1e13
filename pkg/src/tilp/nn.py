"""Minimal dense networks with hand-written backprop, plus Adam.

Parameters are flat lists ``[W1, b1, W2, b2, ...]`` with ``W`` shaped
``(fan_in, fan_out)``. Hidden layers use tanh; the last layer is either tanh or
linear.
"""

from __future__ import annotations

import numpy as np

from .core import RngStream


def init_mlp(sizes, rng: RngStream, out_scale: float = 1.0) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases; ``out_scale`` shrinks the last layer."""
    g = rng.generator()
    params = []
    for j, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        w = g.uniform(-lim, lim, (fan_in, fan_out))
        if j == len(sizes) - 2:
            w = w * out_scale
        params += [w, np.zeros(fan_out)]
    return params


def mlp_forward(params, x, linear_out: bool = True):
    """Run the net; returns ``(y, cache)`` where the cache holds every layer output."""
    acts = [np.asarray(x, dtype=float)]
    n_layers = len(params) // 2
    for j in range(n_layers):
        z = acts[-1] @ params[2 * j] + params[2 * j + 1]
        acts.append(z if (linear_out and j == n_layers - 1) else np.tanh(z))
    return acts[-1], acts


def mlp_backward(params, acts, dy, linear_out: bool = True):
    """Gradients of a scalar objective given ``dy = d obj / d y``; returns ``(grads, dx)``."""
    n_layers = len(params) // 2
    grads: list[np.ndarray] = [None] * len(params)  # type: ignore[list-item]
    d = np.asarray(dy, dtype=float)
    for j in reversed(range(n_layers)):
        if not (linear_out and j == n_layers - 1):
            d = d * (1.0 - acts[j + 1] ** 2)
        grads[2 * j] = acts[j].T @ d
        grads[2 * j + 1] = d.sum(axis=0)
        d = d @ params[2 * j].T
    return grads, d


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


class Adam:
    """Adam over a flat parameter list; ``step`` returns fresh arrays."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> list[np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out
