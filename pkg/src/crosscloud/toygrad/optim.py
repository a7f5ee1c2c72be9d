from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient in {', '.join(self.names)}; step rejected")


@dataclass
class OptimizerState:
    """Adam with linear warmup to ``peak_lr`` then linear decay to 0 at ``decay_steps``."""

    peak_lr: float = 1e-3
    warmup_steps: int = 0
    decay_steps: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, t: int) -> float:
        """Learning rate used for update number ``t`` (1-based)."""
        if self.warmup_steps and t < self.warmup_steps:
            return self.peak_lr * t / self.warmup_steps
        if self.decay_steps is None or self.decay_steps <= self.warmup_steps:
            return self.peak_lr
        left = (self.decay_steps - t) / (self.decay_steps - self.warmup_steps)
        return self.peak_lr * max(0.0, left)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array(float(self.step))}
        for k, a in self.m.items():
            out[f"adam.m.{k}"] = a.copy()
        for k, a in self.v.items():
            out[f"adam.v.{k}"] = a.copy()
        return out

    def load_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.step = int(tensors["adam.step"])
        self.m = {k[len("adam.m."):]: np.array(a) for k, a in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(a) for k, a in tensors.items() if k.startswith("adam.v.")}


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              frozen: frozenset | set = frozenset()) -> float:
    """Apply one bias-corrected Adam update in place; returns the learning rate used.

    ``grads`` must cover exactly the non-frozen entries of ``params``.
    """
    trainable = set(params) - set(frozen)
    if set(grads) != trainable:
        extra = sorted(set(grads) - trainable)
        missing = sorted(trainable - set(grads))
        raise ValueError(f"gradient/parameter mismatch: extra {extra[:3]}, missing {missing[:3]}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(sorted(bad))
    t = state.step + 1
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k in sorted(trainable):
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return lr
