"""Triple, description and word-vector ingestion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .featurize import tokenize

logger = logging.getLogger(__name__)


class ParseError(ValueError):
    def __init__(self, message, line=None, source=None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.source = source


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def triples_to_array(triples) -> np.ndarray:
    return np.asarray(list(triples), dtype=np.int64).reshape(-1, 3)


class Vocabulary:
    """Name <-> dense id maps for entities and relations."""

    def __init__(self):
        self.entity_ids: dict[str, int] = {}
        self.entity_names: list[str] = []
        self.relation_ids: dict[str, int] = {}
        self.relation_names: list[str] = []

    @property
    def num_entities(self):
        return len(self.entity_names)

    @property
    def num_relations(self):
        return len(self.relation_names)

    def add_entity(self, name: str) -> int:
        idx = self.entity_ids.get(name)
        if idx is None:
            idx = self.entity_ids[name] = len(self.entity_names)
            self.entity_names.append(name)
        return idx

    def add_relation(self, name: str) -> int:
        idx = self.relation_ids.get(name)
        if idx is None:
            idx = self.relation_ids[name] = len(self.relation_names)
            self.relation_names.append(name)
        return idx

    def to_lines(self) -> list[str]:
        lines = [f"E\t{name}" for name in self.entity_names]
        lines += [f"R\t{name}" for name in self.relation_names]
        return lines

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for lineno, line in enumerate(lines, 1):
            kind, sep, name = line.rstrip("\n").partition("\t")
            if not sep or kind not in ("E", "R"):
                raise ParseError(f"bad vocabulary line {line!r}", lineno)
            (vocab.add_entity if kind == "E" else vocab.add_relation)(name)
        return vocab

    def __eq__(self, other):
        return (isinstance(other, Vocabulary)
                and self.entity_names == other.entity_names
                and self.relation_names == other.relation_names)


def _lines(stream):
    if isinstance(stream, str):
        stream = stream.splitlines(keepends=True)
    return stream


def parse_triples(stream, vocab: Vocabulary, source=None) -> list[Triple]:
    """Parse ``head<TAB>relation<TAB>tail`` lines, registering new names in order."""
    triples = []
    for lineno, line in enumerate(_lines(stream), 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", lineno, source)
        if any(not f.strip() for f in fields):
            raise ParseError("empty field", lineno, source)
        h, r, t = (f.strip() for f in fields)
        triples.append(Triple(vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)))
    return triples


@dataclass
class Descriptions:
    texts: dict[int, str]
    overwritten: int = 0
    skipped: int = 0


def parse_descriptions(stream, vocab: Vocabulary, strict=True, source=None) -> Descriptions:
    """Parse ``entity<TAB>text`` lines.

    Unknown entities raise in strict mode and are counted as skipped
    otherwise.  A later line for the same entity replaces the earlier one.
    """
    out = Descriptions({})
    for lineno, line in enumerate(_lines(stream), 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        name, sep, text = line.partition("\t")
        if not sep:
            raise ParseError("missing tab between entity and description", lineno, source)
        name = name.strip()
        idx = vocab.entity_ids.get(name)
        if idx is None:
            if strict:
                raise ParseError(f"unknown entity {name!r}", lineno, source)
            out.skipped += 1
            continue
        if idx in out.texts:
            out.overwritten += 1
        out.texts[idx] = text
    if out.skipped:
        logger.warning("skipped %d descriptions of unknown entities", out.skipped)
    return out


@dataclass
class WordVectorTable:
    index: dict[str, int]
    vectors: np.ndarray
    duplicates: int = 0

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.index)

    def __getitem__(self, word):
        return self.vectors[self.index[word]]


def parse_word_vectors(stream, expected_dim: int, source=None) -> WordVectorTable:
    """Parse ``word v1 ... vd`` lines; the first occurrence of a word wins.

    A leading word2vec-style ``count dim`` header line is skipped.
    """
    if expected_dim < 1:
        raise ValueError("expected_dim must be >= 1")
    index, rows, dups = {}, [], 0
    for lineno, line in enumerate(_lines(stream), 1):
        parts = line.split()
        if not parts:
            continue
        if lineno == 1 and len(parts) == 2 and expected_dim != 1 and all(p.isdigit() for p in parts):
            continue
        word, values = parts[0], parts[1:]
        if len(values) != expected_dim:
            raise ParseError(f"expected {expected_dim} values, got {len(values)}", lineno, source)
        try:
            vec = [float(v) for v in values]
        except ValueError as exc:
            raise ParseError(f"non-numeric value ({exc})", lineno, source) from None
        if not np.all(np.isfinite(vec)):
            raise ParseError("non-finite value", lineno, source)
        if word in index:
            dups += 1
            continue
        index[word] = len(rows)
        rows.append(vec)
    vectors = np.asarray(rows, dtype=np.float64).reshape(len(rows), expected_dim)
    return WordVectorTable(index, vectors, dups)


@dataclass
class Dataset:
    vocab: Vocabulary
    train: list[Triple]
    valid: list[Triple] = field(default_factory=list)
    test: list[Triple] = field(default_factory=list)
    descriptions: dict[int, str] = field(default_factory=dict)

    def split(self, name) -> list[Triple]:
        return {"train": self.train, "valid": self.valid, "validation": self.valid,
                "test": self.test}[name]

    def training_entities(self) -> np.ndarray:
        """Sorted ids of entities that occur in training triples."""
        arr = triples_to_array(self.train)
        return np.unique(np.concatenate([arr[:, 0], arr[:, 2]]))

    def missing_descriptions(self, splits=("train", "valid", "test")) -> list[int]:
        ids = set()
        for s in splits:
            for h, _, t in self.split(s):
                ids.update((h, t))
        return sorted(i for i in ids if not self.descriptions.get(i, "").strip())

    def statistics(self) -> dict:
        lengths = [len(tokenize(t)) for t in self.descriptions.values()]
        words = set()
        for t in self.descriptions.values():
            words.update(tokenize(t))
        return {
            "entities": self.vocab.num_entities,
            "relations": self.vocab.num_relations,
            "description_vocabulary": len(words),
            "max_description_length": max(lengths, default=0),
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }


def load_dataset(train, valid=None, test=None, descriptions=None, strict=True,
                 vocab: Vocabulary | None = None) -> Dataset:
    """Load splits from paths; ids are assigned over train, then valid, then test.

    Passing an existing ``vocab`` keeps its ids (e.g. the one stored in a
    checkpoint) and appends any new names after them.
    """
    vocab = Vocabulary() if vocab is None else vocab

    def read(path):
        if path is None:
            return []
        with open(path, encoding="utf-8") as fh:
            return parse_triples(fh, vocab, source=str(path))

    ds = Dataset(vocab, read(train), read(valid), read(test))
    if descriptions is not None:
        with open(descriptions, encoding="utf-8") as fh:
            parsed = parse_descriptions(fh, vocab, strict=strict, source=str(descriptions))
        ds.descriptions = parsed.texts
    return ds


def load_word_vectors(path: str | Path, expected_dim: int) -> WordVectorTable:
    with open(path, encoding="utf-8") as fh:
        return parse_word_vectors(fh, expected_dim, source=str(path))


@dataclass
class SplitCounts:
    both_seen: int = 0
    one_unseen: int = 0
    both_unseen: int = 0

    @property
    def total(self):
        return self.both_seen + self.one_unseen + self.both_unseen


@dataclass
class SplitReport:
    valid: SplitCounts
    test: SplitCounts

    @property
    def concept_learning_valid(self):
        # every held-out triple has an unseen entity on exactly one side
        return all(c.total == c.one_unseen for c in (self.valid, self.test)) and \
            (self.valid.total + self.test.total) > 0


def validate_unseen_split(dataset: Dataset) -> SplitReport:
    seen = set(dataset.training_entities().tolist())

    def count(triples):
        c = SplitCounts()
        for h, _, t in triples:
            unseen = (h not in seen) + (t not in seen)
            if unseen == 0:
                c.both_seen += 1
            elif unseen == 1:
                c.one_unseen += 1
            else:
                c.both_unseen += 1
        return c

    return SplitReport(count(dataset.valid), count(dataset.test))
