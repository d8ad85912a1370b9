"""Corpus ingestion for character and symbolic-sequence prediction.

Text files become one character-index stream; symbol files hold one
whitespace-separated integer sequence per line, and windows never cross a
line boundary. Splits are contiguous fractions of the window list so that
near-identical overlapping windows do not leak between train and test.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patterns import Item, LabeledDataset, Vocabulary

__all__ = [
    "CorpusError",
    "Corpus",
    "ingest_text",
    "ingest_symbols",
    "windowize",
    "synthetic_repetition_corpus",
]


class CorpusError(ValueError):
    """Unreadable, empty, or malformed corpus input."""


@dataclass
class Corpus:
    """Token-index sequences plus the vocabulary observed while reading them."""

    sequences: list[list[int]]
    tokens: tuple  # vocabulary symbols in first-occurrence order
    provenance: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def total_length(self) -> int:
        return sum(len(s) for s in self.sequences)


def _index_stream(symbols) -> tuple[list[int], list]:
    vocab: dict = {}
    indices = []
    for s in symbols:
        if s not in vocab:
            vocab[s] = len(vocab)
        indices.append(vocab[s])
    return indices, list(vocab)


def ingest_text(path) -> Corpus:
    """One UTF-8 file as a single character stream; characters are tokens."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CorpusError(f"cannot read corpus file {path}") from None
    except UnicodeDecodeError as e:
        raise CorpusError(f"invalid UTF-8 in corpus file {path}: {e}") from None
    if not text:
        raise CorpusError(f"corpus file {path} is empty")
    indices, vocab = _index_stream(text)
    return Corpus([indices], tuple(vocab), {"source": str(path), "mode": "text"})


def ingest_symbols(path) -> Corpus:
    """Newline-separated integer sequences; boundaries are preserved."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CorpusError(f"cannot read corpus file {path}") from None
    except UnicodeDecodeError as e:
        raise CorpusError(f"invalid UTF-8 in corpus file {path}: {e}") from None
    vocab: dict = {}
    sequences = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        seq = []
        for word in line.split():
            try:
                value = int(word)
            except ValueError:
                raise CorpusError(
                    f"{path}: non-integer token {word!r} at line {lineno}") from None
            if value not in vocab:
                vocab[value] = len(vocab)
            seq.append(vocab[value])
        sequences.append(seq)
    if not sequences:
        raise CorpusError(f"corpus file {path} is empty")
    return Corpus(sequences, tuple(vocab), {"source": str(path), "mode": "symbols"})


def windowize(corpus: Corpus, context_length: int,
              fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)) -> LabeledDataset:
    """Stride-1 sliding windows of context plus next token, split contiguously."""
    if context_length < 1:
        raise CorpusError(f"context length must be at least 1, got {context_length}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"split fractions must sum to 1, got {fractions}")
    windows = []
    for seq in corpus.sequences:
        for start in range(len(seq) - context_length):
            windows.append((tuple(seq[start:start + context_length]),
                            seq[start + context_length]))
    if not windows:
        raise CorpusError(
            f"corpus too short for context {context_length}: no complete window")
    n = len(windows)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    items = []
    for i, (ctx, nxt) in enumerate(windows):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        items.append(Item(ctx, split, target=nxt))
    vocab = Vocabulary(tuple(range(corpus.vocab_size)))
    return LabeledDataset(task="corpus", kind="prediction", vocabulary=vocab,
                          context_length=context_length, items=items)


def synthetic_repetition_corpus(length: int, vocab_size: int, repeat_prob: float = 0.5,
                                window: int = 5, seed: int = 0) -> Corpus:
    """Repetition-heavy stream: each token copies one of the previous ``window``
    tokens with probability ``repeat_prob``, else draws uniformly."""
    if length < 2 or vocab_size < 2:
        raise CorpusError("need length >= 2 and vocab_size >= 2")
    if not 0.0 <= repeat_prob <= 1.0:
        raise CorpusError(f"repeat probability must lie in [0, 1], got {repeat_prob}")
    rng = np.random.default_rng(seed)
    stream = [int(rng.integers(vocab_size))]
    for _ in range(length - 1):
        if rng.random() < repeat_prob:
            back = int(rng.integers(1, min(window, len(stream)) + 1))
            stream.append(stream[-back])
        else:
            stream.append(int(rng.integers(vocab_size)))
    return Corpus([stream], tuple(range(vocab_size)),
                  {"source": f"synthetic(seed={seed})", "mode": "synthetic"})
