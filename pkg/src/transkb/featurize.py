"""Turning description text into encoder inputs."""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .kernels import DTYPE

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[^\W_]+")
MARK = "#"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any run of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


def extract_3grams(word: str) -> Counter:
    if not word:
        return Counter()
    marked = MARK + word + MARK
    return Counter(marked[i:i + 3] for i in range(len(marked) - 2))


class NgramVocabulary:
    def __init__(self, grams=()):
        self.index: dict[str, int] = {}
        for g in grams:
            self.add(g)

    def add(self, gram: str) -> int:
        idx = self.index.get(gram)
        if idx is None:
            idx = self.index[gram] = len(self.index)
        return idx

    def __len__(self):
        return len(self.index)

    def __contains__(self, gram):
        return gram in self.index

    def to_lines(self) -> list[str]:
        return [f"{g}\t{i}" for g, i in self.index.items()]

    @classmethod
    def from_lines(cls, lines) -> "NgramVocabulary":
        vocab = cls()
        for line in lines:
            gram, _, idx = line.rstrip("\n").rpartition("\t")
            if vocab.add(gram) != int(idx):
                raise ValueError(f"non-contiguous n-gram index in line {line!r}")
        return vocab

    @classmethod
    def build(cls, texts) -> "NgramVocabulary":
        vocab = cls()
        for text in texts:
            for tok in tokenize(text):
                for g in extract_3grams(tok):
                    vocab.add(g)
        return vocab


def text_3grams(text: str) -> Counter:
    counts = Counter()
    for tok in tokenize(text):
        counts.update(extract_3grams(tok))
    return counts


def featurize_bong(description: str, vocab: NgramVocabulary, mode="infer") -> np.ndarray:
    """Bag-of-3-grams vector with ``log(1 + count)`` entries.

    In ``train`` mode unseen grams extend ``vocab``; in ``infer`` mode they
    are dropped and ``vocab`` is left untouched.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    counts = text_3grams(description)
    if mode == "train":
        for g in counts:
            vocab.add(g)
    x = np.zeros(len(vocab), dtype=DTYPE)
    dropped = 0
    for g, c in counts.items():
        idx = vocab.index.get(g)
        if idx is None:
            dropped += c
        else:
            x[idx] = c
    if dropped:
        logger.debug("dropped %d out-of-vocabulary 3-grams", dropped)
    return np.log1p(x)


def bong_matrix(descriptions, vocab: NgramVocabulary) -> np.ndarray:
    return np.stack([featurize_bong(d, vocab) for d in descriptions]) if descriptions else \
        np.zeros((0, len(vocab)), dtype=DTYPE)


@dataclass
class DescriptionMatrix:
    matrix: np.ndarray          # (d, k); column i is the vector of tokens[i]
    tokens: list[str]
    indices: np.ndarray         # row ids into the word table, UNK = table size


def token_indices(description: str, word_index: dict, max_len: int, min_len=1):
    """Token list and word-table row ids; out-of-vocabulary tokens map to UNK."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    unk = len(word_index)
    tokens = tokenize(description)[:max_len]
    ids = [word_index.get(t, unk) for t in tokens]
    if not tokens or all(i == unk for i in ids):
        tokens, ids = ["<unk>"], [unk]
    while len(ids) < min_len:
        ids.append(unk)
    return tokens, np.asarray(ids, dtype=np.int64)


def build_description_matrix(description: str, wv, max_len: int) -> DescriptionMatrix:
    tokens, ids = token_indices(description, wv.index, max_len)
    table = np.vstack([wv.vectors, np.zeros((1, wv.dim))]).astype(DTYPE)
    return DescriptionMatrix(table[ids].T.copy(), tokens, ids)
