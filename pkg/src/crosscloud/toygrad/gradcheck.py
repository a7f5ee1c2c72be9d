"""Central-difference checks for every layer, model and loss.

A case exposes the tensors to perturb (parameters and float inputs, all
mutated in place), a scalar ``loss()`` and the analytic ``grads()`` for the
same keys.  Layers are reduced to a scalar with a fixed random projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import TokenBatch, mask_batch
from .layers import (
    DecoderAdapter,
    Dense,
    Embedding,
    FeedForward,
    GeLU,
    LayerNorm,
    SelfAttentionBlock,
    SingleHeadCrossAttention,
    TransformerBlock,
)
from .losses import clm_loss, discriminator_loss, generator_loss, translation_loss
from .models import AdapterDecoder, AdapterEncoder, Discriminator, Generator, ModelConfig

EPS = 1e-5
TOLERANCE = 1e-4
# denominator floor: gradients this small (e.g. the attention key bias, exactly 0)
# are compared on an absolute scale
FLOOR = 1e-5


@dataclass
class Case:
    name: str
    tensors: dict
    loss: Callable[[], float]
    grads: Callable[[], dict]


def rel_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def check_case(case: Case, rng: np.random.Generator, samples: int = 6, eps: float = EPS) -> float:
    """Worst relative error over up to ``samples`` coordinates of each tensor."""
    analytic = {k: np.array(v, copy=True) for k, v in case.grads().items()}
    worst = 0.0
    for key, x in case.tensors.items():
        flat = x.reshape(-1)
        picks = rng.choice(flat.size, min(samples, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            up = case.loss()
            flat[i] = old - eps
            down = case.loss()
            flat[i] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, float(rel_error(analytic[key].reshape(-1)[i], num)))
    return worst


# ---------------------------------------------------------------- layer cases


def _layer_case(name, layer, inputs: dict, run, rng) -> Case:
    """``run(layer, inputs)`` returns the output; backward gets the projection."""
    out = run(layer, inputs)
    c = rng.normal(size=out.shape)
    tensors = {f"param:{k}": v for k, v in layer.parameters().items()}
    tensors.update({f"input:{k}": v for k, v in inputs.items() if v.dtype.kind == "f"})

    def loss():
        return float(np.sum(c * run(layer, inputs)))

    def grads():
        layer.zero_grad()
        run(layer, inputs)
        back = layer.backward(c)
        g = {f"param:{k}": v for k, v in layer.gradients(trainable_only=False).items()}
        float_keys = [k for k, v in inputs.items() if v.dtype.kind == "f"]
        if back is not None:
            back = back if isinstance(back, tuple) else (back,)
            g.update({f"input:{k}": d for k, d in zip(float_keys, back)})
        return g

    return Case(name, tensors, loss, grads)


def _dims(rng):
    return int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(3, 7)), int(rng.integers(3, 9))


def _embedding(rng):
    B, L, d, _ = _dims(rng)
    V = int(rng.integers(3, 9))
    ids = rng.integers(0, V, (B, L))
    return _layer_case("Embedding", Embedding(V, d, rng), {"ids": ids}, lambda m, x: m.forward(x["ids"]), rng)


def _dense(rng):
    B, L, d, h = _dims(rng)
    layer = Dense(d, h, rng)
    layer.b[...] = rng.normal(size=h)
    return _layer_case("Dense", layer, {"x": rng.normal(size=(B, L, d))}, lambda m, x: m.forward(x["x"]), rng)


def _layernorm(rng):
    B, L, d, _ = _dims(rng)
    layer = LayerNorm(d)
    layer.params["g"][...] = rng.normal(1.0, 0.3, d)
    layer.params["b"][...] = rng.normal(size=d)
    return _layer_case("LayerNorm", layer, {"x": rng.normal(size=(B, L, d))}, lambda m, x: m.forward(x["x"]), rng)


def _gelu(rng):
    B, L, d, _ = _dims(rng)
    return _layer_case("GeLU", GeLU(), {"x": rng.normal(0, 2, (B, L, d))}, lambda m, x: m.forward(x["x"]), rng)


def _randomize(module, rng):
    # zero-initialised adapter outputs would hide the gradients behind them
    for p in module.parameters().values():
        p[...] = p + rng.normal(0, 0.3, p.shape)
    return module


def _cross_attention(rng):
    B, L, d, _ = _dims(rng)
    Lk = int(rng.integers(2, 5))
    mask = np.ones((B, Lk), dtype=bool)
    mask[:, -1] = rng.random(B) < 0.5
    inputs = {"xq": rng.normal(size=(B, L, d)), "xkv": rng.normal(size=(B, Lk, d))}
    return _layer_case("SingleHeadCrossAttention", _randomize(SingleHeadCrossAttention(d, rng), rng), inputs,
                       lambda m, x: m.forward(x["xq"], x["xkv"], mask), rng)


def _feedforward(rng):
    B, L, d, h = _dims(rng)
    return _layer_case("FeedForward", _randomize(FeedForward(d, h, rng, zero_out=True), rng),
                       {"x": rng.normal(size=(B, L, d))}, lambda m, x: m.forward(x["x"]), rng)


def _self_attention(rng):
    B, L, d, _ = _dims(rng)
    return _layer_case("SelfAttentionBlock", _randomize(SelfAttentionBlock(d, rng), rng),
                       {"x": rng.normal(size=(B, L, d))}, lambda m, x: m.forward(x["x"]), rng)


def _transformer(rng):
    B, L, d, h = _dims(rng)
    return _layer_case("TransformerBlock", _randomize(TransformerBlock(d, h, rng), rng),
                       {"x": rng.normal(size=(B, L, d))}, lambda m, x: m.forward(x["x"]), rng)


def _decoder_adapter(rng):
    B, L, d, h = _dims(rng)
    inputs = {"h": rng.normal(size=(B, L, d)), "enc": rng.normal(size=(B, int(rng.integers(2, 5)), d))}
    return _layer_case("DecoderAdapter", _randomize(DecoderAdapter(d, h, rng), rng), inputs,
                       lambda m, x: m.forward(x["h"], x["enc"]), rng)


# ---------------------------------------------------------------- model and loss cases


def _config(rng, vocab=None):
    B, L, d, h = _dims(rng)
    V = vocab or int(rng.integers(4, 8))
    return ModelConfig(V + 1, d, h, int(rng.integers(1, 3)), L + 2), B, L + 2


def _tokens(rng, cfg, B, L):
    batch = TokenBatch.plain(rng.integers(0, cfg.vocab - 1, (B, L)))
    return mask_batch(batch, 0.3, rng.integers(1 << 31))


def _model_case(name, model, loss_fn) -> Case:
    """``loss_fn()`` runs forward and backward and returns (loss, grads)."""
    tensors = {k: v for k, v in model.parameters().items() if k not in model.frozen_names()}
    return Case(name, tensors, lambda: loss_fn()[0], lambda: loss_fn()[1])


def _generator_loss(rng):
    cfg, B, L = _config(rng)
    G = _randomize(Generator(cfg, int(rng.integers(1 << 16))), rng)
    batch = _tokens(rng, cfg, B, L)
    return _model_case("generator_loss", G, lambda: generator_loss(G, batch, cfg.vocab - 1))


def _discriminator_loss(rng):
    cfg, B, L = _config(rng)
    D = _randomize(Discriminator(cfg, int(rng.integers(1 << 16))), rng)
    batch = _tokens(rng, cfg, B, L)
    labels = (rng.random((B, L)) < 0.5).astype(np.float64)
    return _model_case("discriminator_loss", D, lambda: discriminator_loss(D, batch, labels))


def _clm_loss(rng):
    cfg, B, L = _config(rng)
    D = _randomize(Discriminator(cfg, int(rng.integers(1 << 16))), rng)
    original = _tokens(rng, cfg, B, L)
    corrupt = original.with_ids(np.where(original.mask, rng.integers(0, cfg.vocab - 1, (B, L)), original.ids))
    return _model_case("clm_loss", D, lambda: clm_loss(D, corrupt, original))


def _translation_loss(rng):
    cfg, B, L = _config(rng)
    dec = _randomize(AdapterDecoder(cfg, int(rng.integers(1 << 16))), rng)
    H = rng.normal(size=(B, L, cfg.dim))
    target = rng.integers(0, cfg.vocab - 1, (B, L))
    smoothing = float(rng.choice([0.0, 0.1]))

    def run():
        loss, _, dH = translation_loss(dec, H, target, cfg.vocab - 1, smoothing)
        return loss, {**dec.gradients(), "H^E": dH}

    case = _model_case("translation_loss", dec, run)
    case.tensors["H^E"] = H
    return case


def _adapter_encoder(rng):
    cfg, B, L = _config(rng)
    enc = _randomize(AdapterEncoder(cfg, int(rng.integers(1 << 16))), rng)
    ids = rng.integers(0, cfg.vocab, (B, L))
    c = rng.normal(size=(B, L, cfg.dim))

    def run():
        enc.zero_grad()
        H = enc.forward(ids)
        enc.backward(c)
        return float(np.sum(c * H)), enc.gradients()

    return _model_case("AdapterEncoder", enc, run)


CASES = {
    "Embedding": _embedding,
    "Dense": _dense,
    "LayerNorm": _layernorm,
    "GeLU": _gelu,
    "SingleHeadCrossAttention": _cross_attention,
    "FeedForward": _feedforward,
    "SelfAttentionBlock": _self_attention,
    "TransformerBlock": _transformer,
    "DecoderAdapter": _decoder_adapter,
    "AdapterEncoder": _adapter_encoder,
    "generator_loss": _generator_loss,
    "discriminator_loss": _discriminator_loss,
    "clm_loss": _clm_loss,
    "translation_loss": _translation_loss,
}


def run_gradcheck(instances: int = 50, seed: int = 0, samples: int = 6) -> dict[str, float]:
    """Worst relative error per case over ``instances`` random instances."""
    out = {}
    for i, (name, build) in enumerate(CASES.items()):
        rng = np.random.default_rng([seed, i])
        out[name] = max(check_case(build(rng), rng, samples) for _ in range(instances))
    return out
