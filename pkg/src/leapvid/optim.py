"""Adam optimizer over named parameter collections."""
from __future__ import annotations

import numpy as np

from .autodiff import Value

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class Adam:
    """Adam with fixed moment decay rates; only the learning rate is tunable.

    Parameters without a gradient after backward are left untouched, which
    keeps detached pathways (e.g. an ablated action branch) frozen.
    """

    def __init__(self, params: dict[str, Value], lr: float = 1e-3, clip_norm: float | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.lr = float(lr)
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        scale = 1.0
        if self.clip_norm is not None:
            total = sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                        for p in self.params.values() if p.grad is not None)
            norm = np.sqrt(total)
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-12)
        c1 = 1.0 - BETA1 ** self.t
        c2 = 1.0 - BETA2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m, v = self.m[k], self.v[k]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + EPS)).astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"adam.step": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            state[f"adam.m.{k}"] = self.m[k]
            state[f"adam.v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.t = int(state["adam.step"][0])
        for k, p in self.params.items():
            self.m[k] = np.asarray(state[f"adam.m.{k}"], dtype=p.data.dtype).reshape(p.shape).copy()
            self.v[k] = np.asarray(state[f"adam.v.{k}"], dtype=p.data.dtype).reshape(p.shape).copy()
