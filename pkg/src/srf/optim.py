"""Adam optimiser with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Update ``params`` (name -> array) in place from ``grads``.

    Missing moments are created as zeros shaped like the parameter.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Adam over a name -> Tensor mapping."""

    def __init__(self, params: dict, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(arrays, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for n in self.state.m:
            out[f"adam.m.{n}"] = self.state.m[n]
            out[f"adam.v.{n}"] = self.state.v[n]
        return out

    def load_state_arrays(self, arrays: dict, step: int) -> None:
        self.state = AdamState(step=step)
        for key, arr in arrays.items():
            kind, name = key[len("adam."):].split(".", 1)
            target = self.state.m if kind == "m" else self.state.v
            target[name] = np.array(arr, copy=True)


def grad_is_finite(params: dict) -> bool:
    return all(p.grad is None or np.isfinite(p.grad).all() for p in params.values())
