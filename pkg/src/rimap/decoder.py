"""Single-hidden-layer SDF decoder with a hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StaleCacheError
from .optim import adam_step

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class ForwardCache:
    version: int
    inputs: np.ndarray
    pre: np.ndarray  # hidden pre-activations
    hidden: np.ndarray


class Decoder:
    """sdf = W2 . relu(W1 x + b1) + b2, no output activation."""

    def __init__(self, in_dim: int, hidden_dim: int = 32, seed: int = 0, dtype=np.float32):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        a1 = in_dim ** -0.5
        a2 = hidden_dim ** -0.5
        self.W1 = rng.uniform(-a1, a1, size=(hidden_dim, in_dim)).astype(self.dtype)
        self.b1 = np.zeros(hidden_dim, self.dtype)
        self.W2 = rng.uniform(-a2, a2, size=hidden_dim).astype(self.dtype)
        self.b2 = np.zeros((), self.dtype)
        self.frozen = False
        self.step_count = 0
        self.version = 0
        self.grads = {n: np.zeros_like(getattr(self, n)) for n in PARAM_NAMES}
        self.adam_m = {n: np.zeros_like(getattr(self, n)) for n in PARAM_NAMES}
        self.adam_v = {n: np.zeros_like(getattr(self, n)) for n in PARAM_NAMES}

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def forward(self, features):
        x = np.asarray(features, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"decoder expects (N, {self.in_dim}) features, got {x.shape}")
        pre = x @ self.W1.T + self.b1
        hidden = np.maximum(pre, 0)
        sdf = hidden @ self.W2 + self.b2
        return sdf, ForwardCache(self.version, x, pre, hidden)

    def __call__(self, features):
        return self.forward(features)[0]

    def backward(self, cache: ForwardCache, upstream) -> np.ndarray:
        """Accumulate parameter gradients (unless frozen); return d(loss)/d(input)."""
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the last parameter update")
        g = np.asarray(upstream, dtype=self.dtype).reshape(-1)
        if g.shape[0] != cache.inputs.shape[0]:
            raise ShapeError("upstream gradient batch size does not match the forward batch")
        d_hidden = g[:, None] * self.W2[None, :]
        # subgradient 1 at exactly zero: with zero features and zero biases every
        # pre-activation starts at 0, and a 0 derivative there would never train
        d_pre = np.where(cache.pre >= 0, d_hidden, 0)
        if not self.frozen:
            self.grads["W2"] += cache.hidden.T @ g
            self.grads["b2"] += g.sum()
            self.grads["W1"] += d_pre.T @ cache.inputs
            self.grads["b1"] += d_pre.sum(axis=0)
        return d_pre @ self.W1

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def adam_update(self, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        if self.frozen:
            self.zero_grad()
            return
        self.step_count += 1
        for name in PARAM_NAMES:
            p = getattr(self, name)
            if p.ndim == 0:
                # 0-d arrays: operate on a 1-element view so the update stays in place
                p = p.reshape(1)
                adam_step(p, self.grads[name].reshape(1), self.adam_m[name].reshape(1),
                          self.adam_v[name].reshape(1), self.step_count, lr, beta1, beta2, eps)
            else:
                adam_step(p, self.grads[name], self.adam_m[name], self.adam_v[name],
                          self.step_count, lr, beta1, beta2, eps)
        self.version += 1
        self.zero_grad()

    def freeze(self) -> None:
        self.frozen = True
        self.zero_grad()

    def is_frozen(self) -> bool:
        return self.frozen


def init_decoder(seed: int, in_dim: int = 24, hidden_dim: int = 32, dtype=np.float32) -> Decoder:
    return Decoder(in_dim, hidden_dim, seed=seed, dtype=dtype)
