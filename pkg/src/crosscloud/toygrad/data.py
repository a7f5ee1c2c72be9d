"""Synthetic corpora: seeded Markov token streams and a reversal "language pair"."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class TokenBatch:
    """ids (B, L); ``mask`` marks the positions in the masked set; ``pad`` marks real tokens."""

    ids: np.ndarray
    mask: np.ndarray
    pad: np.ndarray

    @classmethod
    def plain(cls, ids) -> "TokenBatch":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, np.zeros(ids.shape, dtype=bool), np.ones(ids.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def masked_ids(self, mask_id: int) -> np.ndarray:
        return np.where(self.mask, mask_id, self.ids)

    def with_ids(self, ids: np.ndarray) -> "TokenBatch":
        return replace(self, ids=np.asarray(ids, dtype=np.int64))


def mask_count(length: int, fraction: float) -> int:
    # the small slack keeps e.g. 0.15 * 20 = 3.0000000000000004 at 3
    return max(1, math.ceil(fraction * length - 1e-9))


def mask_batch(x: TokenBatch, fraction: float, seed) -> TokenBatch:
    """Choose ceil(fraction * length) positions per row, reproducibly from ``seed``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"mask fraction must lie in (0, 1), got {fraction}")
    B, L = x.shape
    k = mask_count(L, fraction)
    if k >= L:
        raise ValueError(f"masking {k} of {L} positions leaves nothing unmasked")
    rng = np.random.default_rng(seed)
    # padded positions sort last so they are never chosen
    keys = rng.random((B, L)) + (~x.pad) * 2.0
    pos = np.argsort(keys, axis=1, kind="stable")[:, :k]
    mask = np.zeros((B, L), dtype=bool)
    np.put_along_axis(mask, pos, True, axis=1)
    return replace(x, mask=mask & x.pad)


class MarkovCorpus:
    """First-order Markov token streams over ``vocab`` data tokens.

    Transition rows are sparse Dirichlet draws, so context is informative.
    The extra id ``vocab`` is reserved for [MASK].
    """

    def __init__(self, vocab: int, seed: int = 0, concentration: float = 0.1):
        rng = np.random.default_rng([seed, 0xC0])
        self.vocab = vocab
        self.seed = seed
        self.transition = rng.dirichlet(np.full(vocab, concentration), size=vocab)
        self._cdf = np.cumsum(self.transition, axis=1)
        self._cdf[:, -1] = 1.0

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def model_vocab(self) -> int:
        return self.vocab + 1

    def batch(self, index: int, batch_size: int, length: int) -> TokenBatch:
        rng = np.random.default_rng([self.seed, 0xB7, index])
        ids = np.empty((batch_size, length), dtype=np.int64)
        ids[:, 0] = rng.integers(0, self.vocab, batch_size)
        u = rng.random((batch_size, length))
        for t in range(1, length):
            cdf = self._cdf[ids[:, t - 1]]
            ids[:, t] = (u[:, t : t + 1] > cdf).sum(axis=1)
        return TokenBatch.plain(np.minimum(ids, self.vocab - 1))


class ReversalTranslation:
    """Target sentence = source tokens mapped through a fixed permutation, reversed.

    The source side and the target side are generated separately from the
    shared seed so each cluster can materialise only its own half.
    """

    def __init__(self, vocab: int, length: int, seed: int = 0):
        rng = np.random.default_rng([seed, 0x7A])
        self.vocab = vocab
        self.length = length
        self.seed = seed
        self.mapping = rng.permutation(vocab)

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def model_vocab(self) -> int:
        return self.vocab + 1

    def _source(self, index: int, batch_size: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x5C, index])
        return rng.integers(0, self.vocab, (batch_size, self.length))

    def source_batch(self, index: int, batch_size: int) -> np.ndarray:
        return self._source(index, batch_size)

    def target_batch(self, index: int, batch_size: int) -> np.ndarray:
        return self.translate(self._source(index, batch_size))

    def translate(self, src: np.ndarray) -> np.ndarray:
        return self.mapping[src][:, ::-1].copy()

    def eval_set(self, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        src = self._source(-1 % (2**31), batch_size)
        return src, self.translate(src)


def accuracy(logits: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(token accuracy, exact-match accuracy) of argmax predictions."""
    pred = logits.argmax(axis=-1)
    hit = pred == target
    return float(hit.mean()), float(hit.all(axis=1).mean())
