"""Synthetic classification tasks, TSV ingestion, and whitespace tokenization.

TSV lines are `label<TAB>text_a[<TAB>text_b]`. The vocabulary is built from
the training split only: pad id 0, unknown id 1, separator id 2, remaining
ids assigned by descending frequency (ties alphabetical). Pair tasks are
joined as `text_a <sep> text_b` before truncation/padding.

Three built-in generators, all exactly label-balanced:
  parity  - label is the parity of the number of marker tokens (1..4),
  pattern - label marks the presence of an adjacent marker bigram,
  pair    - two sequences; label 1 iff they carry the same marker bigram.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .model import Batch

PAD_ID = 0
UNK_ID = 1
SEP_ID = 2
SEP_TOKEN = "<sep>"
RESERVED = {PAD_ID: "<pad>", UNK_ID: "<unk>", SEP_ID: SEP_TOKEN}

TASKS = ("parity", "pattern", "pair")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    train_size: int
    dev_size: int
    test_size: int
    vocab_size: int
    seq_len: int
    seed: int
    n_classes: int = 2

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; pick from {TASKS}")
        if self.seq_len < 8:
            raise ValueError("built-in tasks need seq_len >= 8")
        if self.vocab_size < 16:
            raise ValueError("built-in tasks need vocab_size >= 16")


@dataclass
class Dataset:
    token_ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    n_classes: int
    vocab: dict[str, int]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]

    def batches(self, batch_size: int, order: np.ndarray | None = None,
                drop_small: bool = False) -> list[Batch]:
        """Slice into consecutive batches, optionally in a permuted order.

        drop_small discards a trailing batch of fewer than 2 samples is
        required for losses that need at least two examples.
        """
        idx = np.arange(self.size) if order is None else np.asarray(order)
        out = []
        for start in range(0, idx.size, batch_size):
            part = idx[start:start + batch_size]
            if drop_small and part.size < max(2, batch_size):
                continue
            if part.size == 0:
                continue
            out.append(Batch(self.token_ids[part], self.mask[part],
                             self.labels[part]))
        return out


# ---------------------------------------------------------------------------
# generation

_FILLERS = [f"w{i:02d}" for i in range(40)]
_MARKER = "mk"
_BIGRAM = ("ma", "mb")
# 4 keys -> 3 distinct marker bigrams; larger pools make the match/mismatch
# comparison too hard for the desk-scale teacher to fit
_PAIR_KEYS = [f"k{i}" for i in range(4)]


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(n, dtype=int)
    labels[: n // 2] = 1
    rng.shuffle(labels)
    return labels


def _fill(rng, length, exclude=()):
    pool = [w for w in _FILLERS if w not in exclude]
    return [pool[rng.integers(0, len(pool))] for _ in range(length)]


def _gen_parity(rng, label, seq_len):
    length = int(rng.integers(max(6, seq_len - 6), seq_len + 1))
    count = int(rng.choice([1, 3] if label == 1 else [2, 4]))
    tokens = _fill(rng, length)
    pos = rng.choice(length, size=count, replace=False)
    for p in pos:
        tokens[p] = _MARKER
    return " ".join(tokens), None


def _gen_pattern(rng, label, seq_len):
    a, b = _BIGRAM
    length = int(rng.integers(max(6, seq_len - 6), seq_len + 1))
    tokens = _fill(rng, length, exclude=_BIGRAM)
    if label == 1:
        p = int(rng.integers(0, length - 1))
        tokens[p], tokens[p + 1] = a, b
    else:
        # both markers present but never as the adjacent bigram "a b";
        # fillers exclude the markers, so p/q are the only occurrences
        p = int(rng.integers(0, length))
        q = int(rng.integers(0, length))
        while q == p or q == p + 1:
            q = int(rng.integers(0, length))
        tokens[p], tokens[q] = a, b
    return " ".join(tokens), None


def _insert_pair(rng, tokens, pair):
    p = int(rng.integers(0, len(tokens) - 1))
    tokens[p], tokens[p + 1] = pair
    return tokens


def _gen_pair(rng, label, seq_len):
    half = (seq_len - 1) // 2
    length_a = int(rng.integers(max(4, half - 2), half + 1))
    length_b = int(rng.integers(max(4, half - 2), half + 1))
    ka = int(rng.integers(0, len(_PAIR_KEYS) - 1))
    pair_a = (_PAIR_KEYS[ka], _PAIR_KEYS[ka + 1])
    if label == 1:
        pair_b = pair_a
    else:
        kb = int(rng.integers(0, len(_PAIR_KEYS) - 1))
        while kb == ka:
            kb = int(rng.integers(0, len(_PAIR_KEYS) - 1))
        pair_b = (_PAIR_KEYS[kb], _PAIR_KEYS[kb + 1])
    ta = _insert_pair(rng, _fill(rng, length_a, exclude=_PAIR_KEYS), pair_a)
    tb = _insert_pair(rng, _fill(rng, length_b, exclude=_PAIR_KEYS), pair_b)
    return " ".join(ta), " ".join(tb)


_GENERATORS = {"parity": _gen_parity, "pattern": _gen_pattern,
               "pair": _gen_pair}


def _write_split(path, rng, gen, n, seq_len):
    labels = _balanced_labels(n, rng)
    with open(path, "w", encoding="utf-8") as fh:
        for label in labels:
            text_a, text_b = gen(rng, int(label), seq_len)
            if text_b is None:
                fh.write(f"{label}\t{text_a}\n")
            else:
                fh.write(f"{label}\t{text_a}\t{text_b}\n")


def gen_data(spec: TaskSpec, out_dir: str) -> dict[str, str]:
    """Write train/dev/test TSVs; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    gen = _GENERATORS[spec.name]
    paths = {}
    for split, n, salt in (("train", spec.train_size, 0),
                           ("dev", spec.dev_size, 1),
                           ("test", spec.test_size, 2)):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=spec.seed, spawn_key=(salt,)))
        path = os.path.join(out_dir, f"{split}.tsv")
        _write_split(path, rng, gen, n, spec.seq_len)
        paths[split] = path
    return paths


# ---------------------------------------------------------------------------
# ingestion

def _parse_tsv(path: str, n_classes: int) -> list[tuple[int, list[str], list[str] | None]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise DataFormatError(
                    f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            try:
                label = int(parts[0])
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: label {parts[0]!r} is not an integer")
            if not 0 <= label < n_classes:
                raise DataFormatError(
                    f"{path}:{lineno}: label {label} outside 0..{n_classes - 1}")
            text_a = parts[1].split()
            text_b = parts[2].split() if len(parts) == 3 else None
            rows.append((label, text_a, text_b))
    if not rows:
        raise DataFormatError(f"{path}: no data lines")
    return rows


def build_vocab(rows, vocab_size: int) -> dict[str, int]:
    """Frequency-ranked vocabulary (ties alphabetical) after reserved ids."""
    counts: dict[str, int] = {}
    for _, ta, tb in rows:
        for tok in ta + (tb or []):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = {tok: i for i, tok in RESERVED.items()}
    next_id = len(RESERVED)
    for tok, _ in ranked:
        if next_id >= vocab_size:
            break
        vocab[tok] = next_id
        next_id += 1
    return vocab


def _encode(rows, vocab, max_seq_len: int, n_classes: int) -> Dataset:
    n = len(rows)
    ids = np.zeros((n, max_seq_len), dtype=np.int64)
    mask = np.zeros((n, max_seq_len), dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    for i, (label, ta, tb) in enumerate(rows):
        toks = [vocab.get(t, UNK_ID) for t in ta]
        if tb is not None:
            toks = toks + [SEP_ID] + [vocab.get(t, UNK_ID) for t in tb]
        toks = toks[:max_seq_len]
        ids[i, :len(toks)] = toks
        mask[i, :len(toks)] = 1
        labels[i] = label
    return Dataset(ids, mask, labels, n_classes, vocab)


def load_tsv(path: str, max_seq_len: int, n_classes: int = 2,
             vocab: dict[str, int] | None = None,
             vocab_size: int | None = None) -> Dataset:
    """Load one split. Without a vocab, one is built from this file (the
    train split); dev/test pass the training vocabulary in."""
    rows = _parse_tsv(path, n_classes)
    if vocab is None:
        if vocab_size is None:
            raise ValueError("vocab_size required when building a vocabulary")
        vocab = build_vocab(rows, vocab_size)
    return _encode(rows, vocab, max_seq_len, n_classes)


def load_task(paths: dict[str, str], max_seq_len: int, vocab_size: int,
              n_classes: int = 2) -> dict[str, Dataset]:
    train = load_tsv(paths["train"], max_seq_len, n_classes,
                     vocab_size=vocab_size)
    out = {"train": train}
    for split in ("dev", "test"):
        if split in paths:
            out[split] = load_tsv(paths[split], max_seq_len, n_classes,
                                  vocab=train.vocab)
    return out
