"""Fixed comparison structures: repetition detectors and their network hooks.

DRn units compare one vocabulary coordinate across two context positions with
a full-wave rectified difference |x - y|. DRp units sum each pair's DRn block
through fixed +1 connections, so for one-hot inputs a pair's DRp value is 0
exactly when its two tokens are identical and 2 otherwise. None of this
wiring is trainable.

The late-fusion head estimates, per context position, whether that token
repeats as the next token (targets encoded +1/-1). Estimates are
mean-subtracted, scattered back onto the context tokens' vocabulary bins,
and mixed with the base network's output distribution; the mixture is
clipped to [0, 1] and renormalized.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

__all__ = [
    "DrConfig",
    "token_pairs",
    "drn_layer",
    "drp_aggregate",
    "drn_features",
    "drp_features",
    "drp_sum_matrix",
    "augment_input",
    "augment_hidden",
    "drp_out_targets",
    "Rbp3Head",
    "rbp3_head_forward",
    "rbp3_offsets",
    "rbp3_mix",
]


def token_pairs(n: int) -> list[tuple[int, int]]:
    """Unordered position pairs (i < j) in lexicographic order."""
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


@dataclass(frozen=True)
class DrConfig:
    """Unit counts implied by vocabulary size and context length."""

    vocab_size: int
    context_length: int

    def __post_init__(self):
        if self.vocab_size < 1 or self.context_length < 1:
            raise ValueError("vocab_size and context_length must be positive")

    @property
    def pair_count(self) -> int:
        n = self.context_length
        return n * (n - 1) // 2

    @property
    def drn_count(self) -> int:
        return self.vocab_size * self.pair_count

    @property
    def drp_count(self) -> int:
        return self.pair_count

    @property
    def drp_out_count(self) -> int:
        return self.context_length

    @property
    def drn_out_count(self) -> int:
        return self.vocab_size * self.context_length

    def pairs(self) -> list[tuple[int, int]]:
        return token_pairs(self.context_length)


def _validate_one_hot(vectors: np.ndarray) -> None:
    if not np.all((vectors == 0.0) | (vectors == 1.0)):
        raise ValueError("drn_layer expects one-hot rows (entries 0 or 1)")
    if not np.all(vectors.sum(axis=-1) == 1.0):
        raise ValueError("drn_layer expects one-hot rows (each summing to 1)")


def drn_layer(context_vectors: np.ndarray) -> np.ndarray:
    """DRn activations for one context: (n, k) one-hot rows -> (p, k).

    Row q holds |x_i - x_j| for the q-th position pair in token_pairs order.
    """
    vectors = np.asarray(context_vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError(f"drn_layer expects an (n, k) array, got shape {vectors.shape}")
    _validate_one_hot(vectors)
    n = vectors.shape[0]
    return np.stack([np.abs(vectors[i] - vectors[j]) for i, j in token_pairs(n)])


def drp_aggregate(drn: np.ndarray) -> np.ndarray:
    """Sum each pair's DRn block with fixed +1 weights: (p, k) -> (p,)."""
    drn = np.asarray(drn, dtype=np.float64)
    return drn.sum(axis=-1)


def drn_features(tokens: np.ndarray, vocab_size: int, visible: int | None = None) -> np.ndarray:
    """Batched flat DRn values from token indices: (batch, n) -> (batch, p*k).

    ``visible`` limits the comparison to the first ``visible`` positions;
    pairs touching a later position emit zeros. Used to keep recurrent
    augmentation causal.
    """
    tokens = np.asarray(tokens)
    batch, n = tokens.shape
    one_hot = np.eye(vocab_size, dtype=np.float64)[tokens]
    blocks = []
    for i, j in token_pairs(n):
        if visible is not None and j >= visible:
            blocks.append(np.zeros((batch, vocab_size)))
        else:
            blocks.append(np.abs(one_hot[:, i, :] - one_hot[:, j, :]))
    return np.concatenate(blocks, axis=1)


def drp_features(tokens: np.ndarray, visible: int | None = None) -> np.ndarray:
    """Batched DRp values straight from token identity: (batch, n) -> (batch, p).

    Equals summing drn_features blocks; for one-hot inputs each value is 0
    for an identical pair and 2 otherwise.
    """
    tokens = np.asarray(tokens)
    batch, n = tokens.shape
    cols = []
    for i, j in token_pairs(n):
        if visible is not None and j >= visible:
            cols.append(np.zeros(batch))
        else:
            cols.append(2.0 * (tokens[:, i] != tokens[:, j]))
    return np.stack(cols, axis=1)


def drp_sum_matrix(vocab_size: int, pair_count: int) -> np.ndarray:
    """The fixed +1 connection matrix (p*k, p) summing DRn blocks into DRp units."""
    m = np.zeros((pair_count * vocab_size, pair_count))
    for q in range(pair_count):
        m[q * vocab_size:(q + 1) * vocab_size, q] = 1.0
    return m


def augment_input(base: ad.Tensor, features: ad.Tensor) -> ad.Tensor:
    """Early fusion: concatenate DR values onto the network input."""
    return ad.concat((base, features))


def augment_hidden(hidden: ad.Tensor, drp: ad.Tensor) -> ad.Tensor:
    """Mid fusion: concatenate DRp values onto a hidden layer."""
    return ad.concat((hidden, drp))


def drp_out_targets(context_tokens: np.ndarray, next_tokens) -> np.ndarray:
    """Repetition encoding per context position: +1 if it equals the next token, else -1."""
    if next_tokens is None:
        raise ValueError(
            "drp_out targets need the next token; at inference use the head estimates instead")
    ctx = np.asarray(context_tokens)
    nxt = np.asarray(next_tokens)
    return np.where(ctx == nxt[:, None], 1.0, -1.0)


@dataclass
class Rbp3Head:
    """One-hidden-layer map from pair differences to per-position repeat estimates.

    Output activation is tanh, so estimates stay in [-1, 1] to match the
    +1/-1 target encoding. The two expert weights are a convex gate (softmax
    over two trainable logits): positive, summing to 1, starting at 0.5
    each. Keeping them on the simplex prevents a degenerate optimum where a
    negative base weight clips most of the vocabulary to zero mass and the
    clipped entries stop passing gradient.
    """

    w1: ad.Parameter
    b1: ad.Parameter
    w2: ad.Parameter
    b2: ad.Parameter
    gate_base: ad.Parameter
    gate_offset: ad.Parameter

    @classmethod
    def create(cls, dr: DrConfig, hidden: int, rng: np.random.Generator) -> "Rbp3Head":
        p, n = dr.drp_count, dr.drp_out_count
        s1 = 1.0 / np.sqrt(p)
        s2 = 1.0 / np.sqrt(hidden)
        return cls(
            w1=ad.Parameter(rng.uniform(-s1, s1, size=(p, hidden))),
            b1=ad.Parameter(np.zeros(hidden)),
            w2=ad.Parameter(rng.uniform(-s2, s2, size=(hidden, n))),
            b2=ad.Parameter(np.zeros(n)),
            gate_base=ad.Parameter(np.asarray(0.0)),
            gate_offset=ad.Parameter(np.asarray(0.0)),
        )

    def parameters(self) -> list[ad.Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.gate_base, self.gate_offset]

    def gate(self) -> tuple[ad.Tensor, ad.Tensor]:
        """Effective (w_base, w_offset) as graph nodes."""
        w_base = ad.sigmoid(ad.add(self.gate_base, ad.scalar_scale(self.gate_offset, -1.0)))
        w_offset = ad.scalar_scale(w_base, -1.0, 1.0)
        return w_base, w_offset

    def mixture_weights(self) -> tuple[float, float]:
        w_base, w_offset = self.gate()
        return float(w_base.data), float(w_offset.data)

    def set_mixture_weights(self, w_base: float, w_offset: float) -> None:
        """Pin the gate to the given ratio (weights are normalized to sum 1)."""
        if w_base < 0 or w_offset < 0 or w_base + w_offset <= 0:
            raise ValueError("mixture weights must be nonnegative with positive sum")
        floor = 1e-300
        self.gate_base.data = np.asarray(np.log(max(w_base, floor)))
        self.gate_offset.data = np.asarray(np.log(max(w_offset, floor)))

    def forward(self, drp_in: ad.Tensor) -> ad.Tensor:
        h = ad.tanh(ad.add(ad.matmul(drp_in, self.w1), self.b1))
        return ad.tanh(ad.add(ad.matmul(h, self.w2), self.b2))


def rbp3_head_forward(drp_in: ad.Tensor, head: Rbp3Head) -> ad.Tensor:
    """Estimated repeat encodings, one per context position, in [-1, 1]."""
    return head.forward(drp_in)


def rbp3_offsets(estimates: np.ndarray, context_tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """Mean-subtract estimates, then scatter-add them onto their tokens' bins.

    Tokens absent from the context get offset 0; duplicate context tokens
    accumulate their contributions.
    """
    est = np.asarray(estimates, dtype=np.float64)
    ctx = np.asarray(context_tokens)
    if est.shape != ctx.shape:
        raise ValueError(f"estimates shape {est.shape} does not match context {ctx.shape}")
    batch, n = est.shape
    normalized = est - est.mean(axis=1, keepdims=True)
    out = np.zeros((batch, vocab_size))
    rows = np.repeat(np.arange(batch), n)
    np.add.at(out, (rows, ctx.reshape(-1)), normalized.reshape(-1))
    return out


def rbp3_mix(base: ad.Tensor, offsets: np.ndarray, head: Rbp3Head) -> ad.Tensor:
    """Weighted expert mixture of base distribution and vocabulary offsets.

    q = w_base * base + w_offset * offsets, clipped to [0, 1] and
    renormalized. Rows whose clipped mass is zero fall back to the base
    distribution (logged, not raised).
    """
    w_base, w_offset = head.gate()
    pre = ad.add(ad.mul(base, w_base), ad.mul(ad.Tensor(offsets), w_offset))
    clipped = ad.clamp(pre, 0.0, 1.0)
    dead = int(np.sum(clipped.data.sum(axis=1) <= 0.0))
    if dead:
        logger.warning("mixture clipped to zero mass for %d rows; using base distribution", dead)
    return ad.normalize_rows(clipped, base)
