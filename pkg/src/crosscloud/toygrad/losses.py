"""Pre-training and translation objectives.

Every loss function runs forward and backward and returns ``(loss, grads)``
where ``grads`` maps parameter names to gradients of the trainable tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .data import TokenBatch
from .layers import log_softmax, softmax
from .models import AdapterDecoder, AdapterEncoder, Discriminator, Generator

DEFAULT_LAMBDA = 50.0
DEFAULT_GAMMA = 1.0


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    l_g: float
    l_d: float
    l_clm: float
    lam: float = DEFAULT_LAMBDA
    gamma: float = DEFAULT_GAMMA
    per_generator: tuple[float, ...] = field(default=())

    @property
    def total(self) -> float:
        return self.l_g + self.lam * self.l_d + self.gamma * self.l_clm


def combined_loss(
    l_g: Union[float, Sequence[float]],
    l_d: float,
    l_clm: float,
    lam: float = DEFAULT_LAMBDA,
    gamma: float = DEFAULT_GAMMA,
) -> LossBreakdown:
    """Sum of every generator's MLM loss plus one shared discriminator term."""
    gens = (float(l_g),) if np.isscalar(l_g) else tuple(float(v) for v in l_g)
    if not gens:
        raise ValueError("at least one generator loss is required")
    return LossBreakdown(sum(gens), float(l_d), float(l_clm), lam, gamma, gens)


def cross_entropy(logits: np.ndarray, target: np.ndarray, where: np.ndarray, smoothing: float = 0.0):
    """Mean NLL over positions in ``where``; returns (loss, dlogits)."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {smoothing}")
    count = int(where.sum())
    if count == 0:
        raise EmptyMaskError("no positions selected for the loss")
    V = logits.shape[-1]
    logp = log_softmax(logits)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    if smoothing:
        onehot = onehot * (1.0 - smoothing) + smoothing / V
    w = where[..., None].astype(np.float64)
    loss = -float((onehot * logp * w).sum()) / count
    dlogits = (np.exp(logp) - onehot) * w / count
    return loss, dlogits


def generator_loss(G: Generator, batch: TokenBatch, mask_id: int):
    """MLM loss over the masked positions, averaged over the masked count."""
    if not batch.mask.any():
        raise EmptyMaskError("generator loss needs at least one masked position")
    G.zero_grad()
    logits = G.forward(batch.masked_ids(mask_id))
    loss, dlogits = cross_entropy(logits, batch.ids, batch.mask)
    G.backward(dlogits)
    G.last_probs = softmax(logits)
    return loss, G.gradients()


def build_corrupt(G: Generator, batch: TokenBatch, seed, mask_id: int, probs=None):
    """Replace masked tokens with samples from the generator.

    Returns the corrupted batch (same mask) and labels: 1 where the token is
    still the original one (including lucky samples), 0 where it was replaced.
    """
    if probs is None:
        probs = softmax(G.forward(batch.masked_ids(mask_id)))
    rng = np.random.default_rng(seed)
    B, L = batch.shape
    rows, cols = np.nonzero(batch.mask)
    p = probs[rows, cols]
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(rows))[:, None] * cdf[:, -1:]
    sampled = np.minimum((u >= cdf).sum(axis=1), p.shape[1] - 1)
    ids = batch.ids.copy()
    ids[rows, cols] = sampled
    labels = (ids == batch.ids).astype(np.float64)
    return batch.with_ids(ids), labels


def _bce(logits: np.ndarray, labels: np.ndarray, where: np.ndarray):
    count = int(where.sum())
    # -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    per = np.logaddexp(0.0, logits) - labels * logits
    w = where.astype(np.float64)
    loss = float((per * w).sum()) / count
    sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return loss, (sig - labels) * w / count


def discriminator_loss(D: Discriminator, corrupt: TokenBatch, labels: np.ndarray):
    """Token-level replaced-token-detection BCE over every real position."""
    D.zero_grad()
    rtd, lm = D.forward(corrupt.ids)
    loss, drtd = _bce(rtd, labels, corrupt.pad)
    D.backward(drtd, np.zeros_like(lm))
    return loss, D.gradients()


def clm_loss(D: Discriminator, corrupt: TokenBatch, original: TokenBatch):
    """NLL of recovering the original tokens at the masked positions."""
    if not corrupt.mask.any():
        raise EmptyMaskError("corrective LM loss needs at least one masked position")
    D.zero_grad()
    rtd, lm = D.forward(corrupt.ids)
    loss, dlm = cross_entropy(lm, original.ids, corrupt.mask)
    D.backward(np.zeros_like(rtd), dlm)
    return loss, D.gradients()


def discriminator_objective(D: Discriminator, corrupt: TokenBatch, labels: np.ndarray,
                            original: TokenBatch, lam: float = DEFAULT_LAMBDA, gamma: float = DEFAULT_GAMMA):
    """lam * L_D + gamma * L_CLM in a single forward/backward; returns (L_D, L_CLM, grads)."""
    D.zero_grad()
    rtd, lm = D.forward(corrupt.ids)
    l_d, drtd = _bce(rtd, labels, corrupt.pad)
    if gamma and corrupt.mask.any():
        l_clm, dlm = cross_entropy(lm, original.ids, corrupt.mask)
    else:
        l_clm, dlm = 0.0, np.zeros_like(lm)
    D.backward(lam * drtd, gamma * dlm)
    return l_d, l_clm, D.gradients()


def encoder_forward(enc: AdapterEncoder, src: np.ndarray) -> np.ndarray:
    return enc.forward(src)


def decoder_forward(dec: AdapterDecoder, tgt_in: np.ndarray, enc_states: np.ndarray) -> np.ndarray:
    return dec.forward(tgt_in, enc_states)


def translation_loss(dec: AdapterDecoder, enc_states: np.ndarray, target: np.ndarray, mask_id: int,
                     smoothing: float = 0.0):
    """Decoder loss on an all-[MASK] target; returns (loss, logits, d loss / d enc_states)."""
    dec.zero_grad()
    tgt_in = np.full_like(target, mask_id)
    logits = dec.forward(tgt_in, enc_states)
    loss, dlogits = cross_entropy(logits, target, np.ones(target.shape, dtype=bool), smoothing)
    denc = dec.backward(dlogits)
    return loss, logits, denc
