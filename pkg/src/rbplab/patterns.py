"""Synthetic pattern datasets: abstract triples, vocabulary splits, balancing.

Abstract patterns are the five equality shapes a triple can take (AAA, AAB,
ABA, ABB, ABC); concrete patterns pin specific tokens at specific positions.
Task builders enumerate pattern triples over seeded vocabulary splits and
balance the two (or four) classes within every split.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ABSTRACT_PATTERNS = ("AAA", "AAB", "ABA", "ABB", "ABC")
SPLITS = ("train", "val", "test")

CLASSIFICATION_TASKS = ("1a", "1b", "2", "3", "shared")
PREDICTION_TASKS = ("pred-aba", "pred-abb")
ALL_TASKS = CLASSIFICATION_TASKS + PREDICTION_TASKS + ("mixed4",)

__all__ = [
    "ABSTRACT_PATTERNS",
    "SPLITS",
    "CLASSIFICATION_TASKS",
    "PREDICTION_TASKS",
    "ALL_TASKS",
    "DatasetError",
    "InfeasibleBalanceError",
    "Vocabulary",
    "TaskSpec",
    "Item",
    "LabeledDataset",
    "classify_abstract",
    "parse_concrete",
    "matches_concrete",
    "enumerate_triples",
    "build_task",
    "build_classification_task",
    "build_prediction_task",
    "build_mixed_task",
    "save_dataset",
    "load_dataset",
]


class DatasetError(ValueError):
    """Invalid task specification or malformed dataset file."""


class InfeasibleBalanceError(DatasetError):
    """Class balancing cannot be met with the available triples."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered distinct token symbols; index order is stable."""

    symbols: tuple

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise DatasetError("vocabulary symbols must be distinct")
        if not self.symbols:
            raise DatasetError("vocabulary must be nonempty")

    @classmethod
    def letters(cls, k: int) -> "Vocabulary":
        if k > 26:
            raise DatasetError("letter vocabulary supports at most 26 symbols")
        return cls(tuple(string.ascii_lowercase[:k]))

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, token) -> int:
        try:
            return self.symbols.index(token)
        except ValueError:
            raise DatasetError(f"token {token!r} not in vocabulary") from None

    def __iter__(self):
        return iter(self.symbols)


@dataclass(frozen=True)
class TaskSpec:
    """Which task to build, under which seed and split fractions."""

    task: str
    seed: int = 0
    fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)
    vocabulary: Vocabulary | None = None

    def __post_init__(self):
        if self.task not in ALL_TASKS:
            raise DatasetError(f"unknown task {self.task!r}; known: {ALL_TASKS}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DatasetError(f"split fractions must sum to 1, got {self.fractions}")

    def resolve_vocabulary(self) -> Vocabulary:
        if self.vocabulary is not None:
            return self.vocabulary
        return Vocabulary.letters(18 if self.task == "mixed4" else 12)


@dataclass(frozen=True)
class Item:
    tokens: tuple
    split: str
    label: int | None = None
    target: object | None = None


@dataclass
class LabeledDataset:
    """Sequences plus class labels or next-token targets, tagged by split."""

    task: str
    kind: str  # "classification" or "prediction"
    vocabulary: Vocabulary
    context_length: int
    items: list[Item] = field(default_factory=list)
    class_names: tuple[str, ...] | None = None

    def split_items(self, split: str) -> list[Item]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [it for it in self.items if it.split == split]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Token-index contexts and integer targets for one split.

        Classification returns the full sequence and the class label;
        prediction returns the context and the next token's vocabulary index.
        """
        items = self.split_items(split)
        if self.kind == "classification":
            tokens = [[self.vocabulary.index(t) for t in it.tokens] for it in items]
            targets = [it.label for it in items]
        else:
            tokens = [[self.vocabulary.index(t) for t in it.tokens] for it in items]
            targets = [self.vocabulary.index(it.target) for it in items]
        return (np.asarray(tokens, dtype=np.int64).reshape(len(items), self.context_length),
                np.asarray(targets, dtype=np.int64))

    def class_counts(self, split: str) -> dict[int, int]:
        counts: dict[int, int] = {}
        for it in self.split_items(split):
            counts[it.label] = counts.get(it.label, 0) + 1
        return counts

    def tokens_used(self, split: str) -> set:
        return {t for it in self.split_items(split) for t in it.tokens}


# ---------------------------------------------------------------------------
# pattern predicates


def classify_abstract(triple: Sequence) -> str:
    """The unique abstract pattern of a triple, by its equality structure."""
    a, b, c = triple
    if a == b == c:
        return "AAA"
    if a == b:
        return "AAB"
    if a == c:
        return "ABA"
    if b == c:
        return "ABB"
    return "ABC"


def parse_concrete(pattern: str) -> tuple:
    """Concrete pattern string to per-position constraints; '*' is a wildcard."""
    return tuple(None if ch == "*" else ch for ch in pattern)


def matches_concrete(triple: Sequence, constraints: Sequence) -> bool:
    """True iff every constrained position carries the required token."""
    if len(triple) != len(constraints):
        raise DatasetError(
            f"pattern of length {len(constraints)} cannot match a {len(triple)}-token sequence")
    return all(c is None or t == c for t, c in zip(triple, constraints))


_MIN_SUBSET = {"AAA": 1, "AAB": 2, "ABA": 2, "ABB": 2, "ABC": 3}


def enumerate_triples(letters: Iterable, pattern: str) -> list[tuple]:
    """Every triple over ``letters`` with the given abstract pattern."""
    letters = list(letters)
    if pattern not in ABSTRACT_PATTERNS:
        raise DatasetError(f"unknown abstract pattern {pattern!r}")
    if len(letters) < _MIN_SUBSET[pattern]:
        raise DatasetError(
            f"need at least {_MIN_SUBSET[pattern]} letters for pattern {pattern}, "
            f"got {len(letters)}")
    if pattern == "AAA":
        return [(x, x, x) for x in letters]
    if pattern == "AAB":
        return [(x, x, y) for x in letters for y in letters if x != y]
    if pattern == "ABA":
        return [(x, y, x) for x in letters for y in letters if x != y]
    if pattern == "ABB":
        return [(x, y, y) for x in letters for y in letters if x != y]
    return [(x, y, z) for x in letters for y in letters for z in letters
            if x != y and x != z and y != z]


# ---------------------------------------------------------------------------
# balanced allocation of the "other" class


def _allocate_even(pools: dict[str, list], need: int) -> list:
    """Draw ``need`` items spread as evenly as possible across pattern pools.

    Pools are consumed destructively so later splits stay disjoint. Patterns
    with too few items are capped and the shortfall moves to the others.
    """
    quotas = dict.fromkeys(pools, 0)
    names = list(pools)
    remaining = need
    while remaining > 0:
        open_names = [n for n in names if quotas[n] < len(pools[n])]
        if not open_names:
            counts = {n: len(pools[n]) for n in names}
            raise InfeasibleBalanceError(
                f"need {need} items but only {sum(counts.values())} available: {counts}")
        for n in open_names:
            if remaining == 0:
                break
            quotas[n] += 1
            remaining -= 1
    taken = []
    for n in names:
        taken.extend(pools[n][:quotas[n]])
        del pools[n][:quotas[n]]
    return taken


def _shuffled_pools(letters, patterns, rng) -> dict[str, list]:
    pools = {}
    for p in patterns:
        pool = enumerate_triples(letters, p)
        rng.shuffle(pool)
        pools[p] = pool
    return pools


def _halve_vocabulary(vocab: Vocabulary, rng) -> tuple[list, list]:
    symbols = list(vocab.symbols)
    order = rng.permutation(len(symbols))
    half = len(symbols) // 2
    train = [symbols[i] for i in order[:half]]
    held = [symbols[i] for i in order[half:]]
    return train, held


# ---------------------------------------------------------------------------
# task builders


_TASK_POSITIVE = {"1a": "ABA", "1b": "ABB", "2": "ABA", "3": "ABC"}
_TASK_NEGATIVES = {
    "1a": ("AAA", "AAB", "ABB", "ABC"),
    "1b": ("AAA", "AAB", "ABA", "ABC"),
    "2": ("ABB",),
    "3": ("AAA", "AAB", "ABA", "ABB"),
}


def build_task(spec: TaskSpec) -> LabeledDataset:
    """Dispatch on the task id."""
    if spec.task in CLASSIFICATION_TASKS:
        return build_classification_task(spec)
    if spec.task in PREDICTION_TASKS:
        return build_prediction_task(spec)
    return build_mixed_task(spec)


def _balanced_side(letters, positive, negatives, rng) -> tuple[list, list]:
    """Equal-sized positive and negative triple lists over one letter pool."""
    pos = enumerate_triples(letters, positive)
    rng.shuffle(pos)
    neg_pools = _shuffled_pools(letters, negatives, rng)
    available = sum(len(p) for p in neg_pools.values())
    target = min(len(pos), available)
    if target == 0:
        raise InfeasibleBalanceError(f"no balanced items possible over letters {letters}")
    return pos[:target], _allocate_even(neg_pools, target)


def _split_half(items: list, rng) -> tuple[list, list]:
    order = rng.permutation(len(items))
    half = len(items) // 2
    first = [items[i] for i in order[:half]]
    second = [items[i] for i in order[half:]]
    return first, second


def build_classification_task(spec: TaskSpec) -> LabeledDataset:
    """Two-class task over a halved (or, for "shared", a common) vocabulary."""
    if spec.task not in CLASSIFICATION_TASKS:
        raise DatasetError(f"{spec.task!r} is not a classification task")
    vocab = spec.resolve_vocabulary()
    rng = np.random.default_rng(spec.seed)
    if spec.task == "shared":
        return _build_shared_task(spec, vocab, rng)

    positive = _TASK_POSITIVE[spec.task]
    negatives = _TASK_NEGATIVES[spec.task]
    train_letters, held_letters = _halve_vocabulary(vocab, rng)

    items: list[Item] = []
    tr_pos, tr_neg = _balanced_side(train_letters, positive, negatives, rng)
    items += [Item(t, "train", label=0) for t in tr_pos]
    items += [Item(t, "train", label=1) for t in tr_neg]

    held_pos, held_neg = _balanced_side(held_letters, positive, negatives, rng)
    val_pos, test_pos = _split_half(held_pos, rng)
    val_neg, test_neg = _split_half(held_neg, rng)
    items += [Item(t, "val", label=0) for t in val_pos]
    items += [Item(t, "val", label=1) for t in val_neg]
    items += [Item(t, "test", label=0) for t in test_pos]
    items += [Item(t, "test", label=1) for t in test_neg]

    negative_name = negatives[0] if len(negatives) == 1 else "other"
    return LabeledDataset(task=spec.task, kind="classification", vocabulary=vocab,
                          context_length=3, items=items,
                          class_names=(positive, negative_name))


def _build_shared_task(spec: TaskSpec, vocab: Vocabulary, rng) -> LabeledDataset:
    """ABA vs other over one vocabulary; a test sequence's token-swapped
    counterpart (xyx vs yxy) always lives in train or val."""
    symbols = list(vocab.symbols)
    train_pos: list[tuple] = []
    held_pos: list[tuple] = []
    for i in range(len(symbols)):
        for j in range(i + 1, len(symbols)):
            x, y = symbols[i], symbols[j]
            if rng.random() < 0.5:
                x, y = y, x
            train_pos.append((x, y, x))
            held_pos.append((y, x, y))
    rng.shuffle(train_pos)
    val_pos, test_pos = _split_half(held_pos, rng)

    neg_pools = _shuffled_pools(symbols, ("AAA", "AAB", "ABB", "ABC"), rng)
    train_neg = _allocate_even(neg_pools, len(train_pos))
    val_neg = _allocate_even(neg_pools, len(val_pos))
    test_neg = _allocate_even(neg_pools, len(test_pos))

    items = [Item(t, "train", label=0) for t in train_pos]
    items += [Item(t, "train", label=1) for t in train_neg]
    items += [Item(t, "val", label=0) for t in val_pos]
    items += [Item(t, "val", label=1) for t in val_neg]
    items += [Item(t, "test", label=0) for t in test_pos]
    items += [Item(t, "test", label=1) for t in test_neg]
    return LabeledDataset(task="shared", kind="classification", vocabulary=vocab,
                          context_length=3, items=items, class_names=("ABA", "other"))


def build_prediction_task(spec: TaskSpec) -> LabeledDataset:
    """Next-token task: the first two tokens of a pattern triple predict the third."""
    if spec.task not in PREDICTION_TASKS:
        raise DatasetError(f"{spec.task!r} is not a prediction task")
    pattern = "ABA" if spec.task == "pred-aba" else "ABB"
    vocab = spec.resolve_vocabulary()
    rng = np.random.default_rng(spec.seed)
    train_letters, held_letters = _halve_vocabulary(vocab, rng)

    def to_items(letters, split_names):
        triples = enumerate_triples(letters, pattern)
        rng.shuffle(triples)
        if len(split_names) == 1:
            groups = [triples]
        else:
            first, second = _split_half(triples, rng)
            groups = [first, second]
        out = []
        for split, group in zip(split_names, groups):
            out += [Item(t[:2], split, target=t[2]) for t in group]
        return out

    items = to_items(train_letters, ("train",))
    items += to_items(held_letters, ("val", "test"))
    return LabeledDataset(task=spec.task, kind="prediction", vocabulary=vocab,
                          context_length=2, items=items)


MIXED_SHARED_TOKENS = ("a", "b")


def build_mixed_task(spec: TaskSpec) -> LabeledDataset:
    """Four classes crossing abstract ABA/ABB with concrete a**/b** starts.

    'a' and 'b' appear in every split (the concrete patterns need them); the
    remaining letters split 12 train / 4 held-out. Sequences built purely
    from the shared tokens stay in train so no sequence leaks across splits.
    """
    if spec.task != "mixed4":
        raise DatasetError(f"{spec.task!r} is not the mixed task")
    vocab = spec.resolve_vocabulary()
    for tok in MIXED_SHARED_TOKENS:
        if tok not in vocab.symbols:
            raise DatasetError(f"mixed task needs token {tok!r} in the vocabulary")
    rng = np.random.default_rng(spec.seed)
    rest = [s for s in vocab.symbols if s not in MIXED_SHARED_TOKENS]
    if len(rest) < 6:
        raise InfeasibleBalanceError("mixed task needs at least 8 tokens")
    order = rng.permutation(len(rest))
    n_train = max(len(rest) - 4, 1)
    train_extra = [rest[i] for i in order[:n_train]]
    held_extra = [rest[i] for i in order[n_train:]]

    classes = [("ABA", "a"), ("ABB", "a"), ("ABA", "b"), ("ABB", "b")]

    def make(first, middle, pattern):
        return (first, middle, first) if pattern == "ABA" else (first, middle, middle)

    items: list[Item] = []
    for label, (pattern, first) in enumerate(classes):
        train_mid = [t for t in (list(MIXED_SHARED_TOKENS) + train_extra) if t != first]
        for mid in train_mid:
            items.append(Item(make(first, mid, pattern), "train", label=label))
        held = [make(first, mid, pattern) for mid in held_extra if mid != first]
        rng.shuffle(held)
        half = len(held) // 2
        items += [Item(t, "val", label=label) for t in held[:half]]
        items += [Item(t, "test", label=label) for t in held[half:]]

    names = tuple(f"{p},{f}**" for p, f in classes)
    return LabeledDataset(task="mixed4", kind="classification", vocabulary=vocab,
                          context_length=3, items=items, class_names=names)


# ---------------------------------------------------------------------------
# dataset files

DATASET_VERSION = 1


def save_dataset(dataset: LabeledDataset, path) -> None:
    payload = {
        "format_version": DATASET_VERSION,
        "task": dataset.task,
        "kind": dataset.kind,
        "context_length": dataset.context_length,
        "class_names": list(dataset.class_names) if dataset.class_names else None,
        "vocabulary": list(dataset.vocabulary.symbols),
        "items": [
            {"tokens": list(it.tokens), "split": it.split,
             **({"label": it.label} if it.label is not None else {}),
             **({"target": it.target} if it.target is not None else {})}
            for it in dataset.items
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_dataset(path) -> LabeledDataset:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {payload.get('format_version')!r}")
    items = [
        Item(tuple(e["tokens"]), e["split"], label=e.get("label"), target=e.get("target"))
        for e in payload["items"]
    ]
    names = payload.get("class_names")
    return LabeledDataset(
        task=payload["task"], kind=payload["kind"],
        vocabulary=Vocabulary(tuple(payload["vocabulary"])),
        context_length=payload["context_length"], items=items,
        class_names=tuple(names) if names else None)
