"""Layers with hand-written backward passes.

Each module caches what its backward pass needs during ``forward`` and adds
parameter gradients into ``self.grads``.  Frozen tensors never receive a
gradient; their entry in ``grads`` stays zero.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

NEG_INF = -1e30


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def _acc(self, name: str, g: np.ndarray) -> None:
        if name not in self.frozen:
            self.grads[name] += g

    def trains(self, name: str) -> bool:
        return name not in self.frozen

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name, p in mod.params.items():
                yield prefix + name, p

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self, trainable_only: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.named_modules():
            for name, g in mod.grads.items():
                if trainable_only and name in mod.frozen:
                    continue
                out[prefix + name] = g
        return out

    def frozen_names(self) -> set[str]:
        return {prefix + n for prefix, mod in self.named_modules() for n in mod.frozen}

    def freeze(self) -> "Module":
        for _, mod in self.named_modules():
            mod.frozen = set(mod.params)
        return self

    def zero_grad(self) -> None:
        for _, mod in self.named_modules():
            for g in mod.grads.values():
                g.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)[:5]}")
        for k, p in own.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} != expected {p.shape}")
            p[...] = v


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 1.0):
        super().__init__()
        self.W = self.param("W", rng.normal(0.0, std, (num, dim)))

    def forward(self, ids: np.ndarray) -> np.ndarray:
        self._ids = ids
        return self.W[ids]

    def backward(self, dy: np.ndarray) -> None:
        if self.trains("W"):
            np.add.at(self.grads["W"], self._ids.reshape(-1), dy.reshape(-1, dy.shape[-1]))


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        w = np.zeros((din, dout)) if zero else rng.normal(0.0, 1.0 / math.sqrt(din), (din, dout))
        self.W = self.param("W", w)
        self.b = self.param("b", np.zeros(dout))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.W + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self.frozen != {"W", "b"}:
            x2 = self._x.reshape(-1, self._x.shape[-1])
            d2 = dy.reshape(-1, dy.shape[-1])
            self._acc("W", x2.T @ d2)
            self._acc("b", d2.sum(axis=0))
        return dy @ self.W.T


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = self.param("g", np.ones(dim))
        self.b = self.param("b", np.zeros(dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        self._xhat, self._inv = xc * inv, inv
        return self._xhat * self.g + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._xhat, self._inv
        if self.frozen != {"g", "b"}:
            lead = tuple(range(dy.ndim - 1))
            self._acc("g", (dy * xhat).sum(axis=lead))
            self._acc("b", dy.sum(axis=lead))
        dxhat = dy * self.g
        n = dy.shape[-1]
        return inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )


_GELU_C = math.sqrt(2.0 / math.pi)


class GeLU(Module):
    """tanh approximation of GeLU."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
        return 0.5 * x * (1.0 + self._t)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, t = self._x, self._t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


class SingleHeadCrossAttention(Module):
    """softmax(Q K^T / sqrt(d)) V followed by an output projection.

    ``forward(xq, xkv)`` returns (B, Lq, d); pass the same array twice for
    self-attention.  ``zero_out`` starts the output projection at zero.
    """

    def __init__(self, dim: int, rng: np.random.Generator, zero_out: bool = False):
        super().__init__()
        self.q = self.add("q", Dense(dim, dim, rng))
        self.k = self.add("k", Dense(dim, dim, rng))
        self.v = self.add("v", Dense(dim, dim, rng))
        self.o = self.add("o", Dense(dim, dim, rng, zero=zero_out))
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, xq: np.ndarray, xkv: np.ndarray, kv_mask: Optional[np.ndarray] = None) -> np.ndarray:
        Q = self.q.forward(xq)
        K = self.k.forward(xkv)
        V = self.v.forward(xkv)
        S = np.einsum("bqd,bkd->bqk", Q, K) * self.scale
        if kv_mask is not None:
            S = np.where(kv_mask[:, None, :], S, NEG_INF)
        A = softmax(S)
        self._Q, self._K, self._V, self._A = Q, K, V, A
        return self.o.forward(np.einsum("bqk,bkd->bqd", A, V))

    @property
    def attention(self) -> np.ndarray:
        return self._A

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dC = self.o.backward(dy)
        A = self._A
        dA = np.einsum("bqd,bkd->bqk", dC, self._V)
        dV = np.einsum("bqk,bqd->bkd", A, dC)
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * self.scale
        dQ = np.einsum("bqk,bkd->bqd", dS, self._K)
        dK = np.einsum("bqk,bqd->bkd", dS, self._Q)
        dxq = self.q.backward(dQ)
        dxkv = self.k.backward(dK) + self.v.backward(dV)
        return dxq, dxkv


class FeedForward(Module):
    """Pre-norm residual block: x + W2 gelu(W1 LN(x)).  Adapters zero-init W2."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, zero_out: bool = False):
        super().__init__()
        self.ln = self.add("ln", LayerNorm(dim))
        self.fc1 = self.add("fc1", Dense(dim, hidden, rng))
        self.act = self.add("act", GeLU())
        self.fc2 = self.add("fc2", Dense(hidden, dim, rng, zero=zero_out))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x + self.fc2.forward(self.act.forward(self.fc1.forward(self.ln.forward(x))))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy + self.ln.backward(self.fc1.backward(self.act.backward(self.fc2.backward(dy))))


class SelfAttentionBlock(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.ln = self.add("ln", LayerNorm(dim))
        self.attn = self.add("attn", SingleHeadCrossAttention(dim, rng))

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.ln.forward(x)
        return x + self.attn.forward(h, h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dq, dkv = self.attn.backward(dy)
        return dy + self.ln.backward(dq + dkv)


class TransformerBlock(Module):
    """Self-attention then feed-forward; used for backbones and the ELECTRA trunks."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.sa = self.add("sa", SelfAttentionBlock(dim, rng))
        self.ff = self.add("ff", FeedForward(dim, hidden, rng))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.ff.forward(self.sa.forward(x))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.sa.backward(self.ff.backward(dy))


class DecoderAdapter(Module):
    """h + CrossAttn(LN(h), H_enc) then a feed-forward adapter; both outputs zero-init."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.ln = self.add("ln", LayerNorm(dim))
        self.xattn = self.add("xattn", SingleHeadCrossAttention(dim, rng, zero_out=True))
        self.ff = self.add("ff", FeedForward(dim, hidden, rng, zero_out=True))

    def forward(self, h: np.ndarray, enc: np.ndarray) -> np.ndarray:
        return self.ff.forward(h + self.xattn.forward(self.ln.forward(h), enc))

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.ff.backward(dy)
        dq, denc = self.xattn.backward(d)
        return d + self.ln.backward(dq), denc
