"""Small numpy network: two tanh layers, a linear belief layer, a linear head.

    x -> tanh(W1 x + b1) -> tanh(W2 . + b2) -> belief = W3 . + b3 -> head = Wh belief + bh

Gradients are hand-derived; ``tests/test_nn.py`` checks them against
central finite differences.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericDivergence

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3", "Wh", "bh")


class Network:
    def __init__(self, n_in: int, hidden: int, d_b: int, n_out: int, seed: int = 0):
        rng = np.random.default_rng(seed)

        def dense(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        self.params = {
            "W1": dense(n_in, hidden), "b1": np.zeros(hidden),
            "W2": dense(hidden, hidden), "b2": np.zeros(hidden),
            "W3": dense(hidden, d_b), "b3": np.zeros(d_b),
            "Wh": dense(d_b, n_out), "bh": np.zeros(n_out),
        }

    @property
    def shapes(self):
        return {k: self.params[k].shape for k in PARAM_ORDER}

    def belief(self, X):
        p = self.params
        h1 = np.tanh(X @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        return h2 @ p["W3"] + p["b3"]

    def forward(self, X):
        B = self.belief(X)
        return B @ self.params["Wh"] + self.params["bh"]

    def loss_and_grads(self, X, Y):
        """Mean over rows of the squared error summed over output columns."""
        p = self.params
        n = len(X)
        h1 = np.tanh(X @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        B = h2 @ p["W3"] + p["b3"]
        out = B @ p["Wh"] + p["bh"]
        err = out - Y
        loss = float(np.sum(err * err) / n)
        d_out = 2.0 * err / n
        g = {"Wh": B.T @ d_out, "bh": d_out.sum(0)}
        dB = d_out @ p["Wh"].T
        g["W3"] = h2.T @ dB
        g["b3"] = dB.sum(0)
        dz2 = (dB @ p["W3"].T) * (1.0 - h2 * h2)
        g["W2"] = h1.T @ dz2
        g["b2"] = dz2.sum(0)
        dz1 = (dz2 @ p["W2"].T) * (1.0 - h1 * h1)
        g["W1"] = X.T @ dz1
        g["b1"] = dz1.sum(0)
        return loss, g

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        pos = 0
        for k in PARAM_ORDER:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            if pos + size > len(vec):
                raise ValueError("parameter vector too short")
            self.params[k] = vec[pos:pos + size].reshape(shape).copy()
            pos += size
        if pos != len(vec):
            raise ValueError("parameter vector too long")


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit(net: Network, X, Y, epochs: int, batch_size: int, lr: float, seed: int,
        max_steps: int | None = None) -> float:
    """Mini-batch Adam on the squared error; returns the final full-data loss.

    ``max_steps`` caps the number of gradient updates independently of the
    epoch count, which keeps desk-scale runs within a time budget.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(net.params, lr=lr)
    n = len(X)
    bs = min(batch_size, n)
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = net.loss_and_grads(X[idx], Y[idx])
            if not math.isfinite(loss):
                raise NumericDivergence(f"training loss diverged at epoch {epoch}")
            opt.step(net.params, grads)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        if max_steps is not None and steps >= max_steps:
            break
    final = float(np.mean(np.sum((net.forward(X) - Y) ** 2, axis=1)))
    if not math.isfinite(final):
        raise NumericDivergence(f"training loss diverged at epoch {epochs - 1}")
    return final


class Standardizer:
    """Column-wise affine normalisation ``(x - mean) / scale``."""

    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-8, scale, 1.0)
        return cls(X.mean(axis=0), scale)

    def __call__(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def inverse(self, Z):
        return np.asarray(Z, dtype=float) * self.scale + self.mean
