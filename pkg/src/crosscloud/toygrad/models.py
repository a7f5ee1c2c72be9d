"""Toy models: ELECTRA-style generator/discriminator and the adapter encoder/decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    Dense,
    DecoderAdapter,
    Embedding,
    FeedForward,
    LayerNorm,
    Module,
    TransformerBlock,
)

MAX_VOCAB = 64
MAX_DIM = 64
MAX_LAYERS = 4


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    dim: int = 32
    hidden: int = 64
    layers: int = 1
    max_len: int = 16

    def __post_init__(self):
        if not 2 <= self.vocab <= MAX_VOCAB + 1:
            raise ValueError(f"vocab {self.vocab} outside toy range [2, {MAX_VOCAB + 1}]")
        if not 1 <= self.dim <= MAX_DIM:
            raise ValueError(f"dim {self.dim} outside toy range [1, {MAX_DIM}]")
        if not 1 <= self.layers <= MAX_LAYERS:
            raise ValueError(f"layers {self.layers} outside toy range [1, {MAX_LAYERS}]")

    def describe(self, kind: str) -> dict:
        return {"kind": kind, **asdict(self)}


class _Embeddings(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.tok = self.add("tok", Embedding(cfg.vocab, cfg.dim, rng))
        self.pos = self.add("pos", Embedding(cfg.max_len, cfg.dim, rng))

    def forward(self, ids: np.ndarray) -> np.ndarray:
        L = ids.shape[1]
        return self.tok.forward(ids) + self.pos.forward(np.broadcast_to(np.arange(L), ids.shape))

    def backward(self, dy: np.ndarray) -> None:
        self.tok.backward(dy)
        self.pos.backward(dy)


class _Trunk(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.emb = self.add("emb", _Embeddings(cfg, rng))
        self.blocks = [self.add(f"block{i}", TransformerBlock(cfg.dim, cfg.hidden, rng)) for i in range(cfg.layers)]
        self.ln_f = self.add("ln_f", LayerNorm(cfg.dim))

    def forward(self, ids):
        h = self.emb.forward(ids)
        for b in self.blocks:
            h = b.forward(h)
        return self.ln_f.forward(h)

    def backward(self, dh):
        dh = self.ln_f.backward(dh)
        for b in reversed(self.blocks):
            dh = b.backward(dh)
        self.emb.backward(dh)


class Generator(Module):
    """Masked-LM generator: ids -> logits over the vocabulary."""

    kind = "generator"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x6E])
        self.trunk = self.add("trunk", _Trunk(cfg, rng))
        self.head = self.add("head", Dense(cfg.dim, cfg.vocab, rng))
        self.last_probs = None  # softmax of the last forward, reused for sampling

    def forward(self, ids: np.ndarray) -> np.ndarray:
        return self.head.forward(self.trunk.forward(ids))

    def backward(self, dlogits: np.ndarray) -> None:
        self.trunk.backward(self.head.backward(dlogits))

    def topology(self) -> dict:
        return self.cfg.describe(self.kind)


class Discriminator(Module):
    """Shared trunk with a replaced-token head (one logit per position) and a vocabulary head."""

    kind = "discriminator"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xD1])
        self.trunk = self.add("trunk", _Trunk(cfg, rng))
        self.rtd = self.add("rtd", Dense(cfg.dim, 1, rng))
        self.lm = self.add("lm", Dense(cfg.dim, cfg.vocab, rng))

    def forward(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.trunk.forward(ids)
        return self.rtd.forward(h)[..., 0], self.lm.forward(h)

    def backward(self, drtd: np.ndarray, dlm: np.ndarray) -> None:
        dh = self.rtd.backward(drtd[..., None]) + self.lm.backward(dlm)
        self.trunk.backward(dh)

    def topology(self) -> dict:
        return self.cfg.describe(self.kind)


class AdapterEncoder(Module):
    """Frozen backbone blocks, each followed by a trainable feed-forward adapter.

    H_{l+1} = AENC(PLM(H_l)); the adapters start as identities.
    """

    kind = "adapter-encoder"

    def __init__(self, cfg: ModelConfig, seed: int = 0, adapter_hidden: int | None = None):
        super().__init__()
        self.cfg = cfg
        hidden = adapter_hidden or cfg.hidden
        rng = np.random.default_rng([seed, 0xE0])
        self.emb = self.add("emb", _Embeddings(cfg, rng))
        self.plm = [self.add(f"plm{i}", TransformerBlock(cfg.dim, cfg.hidden, rng)) for i in range(cfg.layers)]
        arng = np.random.default_rng([seed, 0xEA])
        self.adapters = [self.add(f"aenc{i}", FeedForward(cfg.dim, hidden, arng, zero_out=True)) for i in range(cfg.layers)]
        self.emb.freeze()
        for b in self.plm:
            b.freeze()

    def forward(self, ids: np.ndarray) -> np.ndarray:
        h = self.emb.forward(ids)
        for plm, ad in zip(self.plm, self.adapters):
            h = ad.forward(plm.forward(h))
        return h

    def backward(self, dH: np.ndarray) -> None:
        # nothing below the first adapter trains, so backprop stops there
        for i in reversed(range(len(self.adapters))):
            dH = self.adapters[i].backward(dH)
            if i:
                dH = self.plm[i].backward(dH)

    def backbone_forward(self, ids: np.ndarray) -> np.ndarray:
        h = self.emb.forward(ids)
        for plm in self.plm:
            h = plm.forward(h)
        return h

    def topology(self) -> dict:
        return self.cfg.describe(self.kind)


class AdapterDecoder(Module):
    """Frozen target-side backbone with cross-attention adapters and a trainable output head.

    H^D_{l+1} = ADEC(PLM(H^D_l), H^E, H^E).  The decoder reads an all-[MASK]
    target and predicts every target token in one pass.
    """

    kind = "adapter-decoder"

    def __init__(self, cfg: ModelConfig, seed: int = 0, adapter_hidden: int | None = None):
        super().__init__()
        self.cfg = cfg
        hidden = adapter_hidden or cfg.hidden
        rng = np.random.default_rng([seed, 0xDE])
        self.emb = self.add("emb", _Embeddings(cfg, rng))
        self.plm = [self.add(f"plm{i}", TransformerBlock(cfg.dim, cfg.hidden, rng)) for i in range(cfg.layers)]
        arng = np.random.default_rng([seed, 0xDA])
        self.adapters = [self.add(f"adec{i}", DecoderAdapter(cfg.dim, hidden, arng)) for i in range(cfg.layers)]
        self.ln_f = self.add("ln_f", LayerNorm(cfg.dim))
        self.head = self.add("head", Dense(cfg.dim, cfg.vocab, arng))
        self.emb.freeze()
        for b in self.plm:
            b.freeze()

    def forward(self, ids: np.ndarray, enc: np.ndarray) -> np.ndarray:
        if enc.ndim != 3 or enc.shape[0] != ids.shape[0] or enc.shape[2] != self.cfg.dim:
            raise ValueError(
                f"encoder states {enc.shape} do not match batch {ids.shape[0]} x dim {self.cfg.dim}"
            )
        h = self.emb.forward(ids)
        for plm, ad in zip(self.plm, self.adapters):
            h = ad.forward(plm.forward(h), enc)
        return self.head.forward(self.ln_f.forward(h))

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Backpropagate and return the gradient with respect to the encoder states."""
        dh = self.ln_f.backward(self.head.backward(dlogits))
        denc = 0.0
        for i in reversed(range(len(self.adapters))):
            dh, de = self.adapters[i].backward(dh)
            denc = denc + de
            if i:
                dh = self.plm[i].backward(dh)
        return denc

    def topology(self) -> dict:
        return self.cfg.describe(self.kind)
