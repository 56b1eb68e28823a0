"""Link-prediction ranking: mean rank and hits@10 under the raw protocol."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, triples_to_array
from .kernels import NumericError
from .transe import EmbeddingStore, distance_rows

HITS_AT = 10


class EvaluationError(ValueError):
    pass


def side_scores(store: EmbeddingStore, triple, side, candidates):
    """Scores of ``triple`` with the ``side`` entity replaced by each candidate."""
    h, r, t = triple
    rel = store.relations[r]
    if side == "left":
        return distance_rows((store.entities[candidates] + rel) - store.entities[t], store.distance)
    if side == "right":
        return distance_rows((store.entities[h] + rel) - store.entities[candidates], store.distance)
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def rank_side(store: EmbeddingStore, triple, side, candidates, ties="optimistic") -> int:
    """1 + number of candidates scoring strictly better than the true entity.

    With ``ties="pessimistic"`` every other candidate scoring equal to the
    true entity also counts against it.
    """
    candidates = np.asarray(candidates)
    if len(candidates) == 0:
        raise EvaluationError("empty candidate set")
    true_id = triple[0] if side == "left" else triple[2]
    scores = side_scores(store, triple, side, candidates)
    where = np.flatnonzero(candidates == true_id)
    if len(where):
        true_score = scores[where[0]]
    else:
        true_score = side_scores(store, triple, side, np.asarray([true_id]))[0]
    better = int(np.count_nonzero(scores < true_score))
    if ties == "pessimistic":
        better += int(np.count_nonzero((scores == true_score) & (candidates != true_id)))
    elif ties != "optimistic":
        raise ValueError(f"unknown tie rule {ties!r}")
    return better + 1


@dataclass
class EvalReport:
    triples: np.ndarray                  # (N, 3) ranked triples
    left_ranks: np.ndarray               # 0 where the side was not ranked
    right_ranks: np.ndarray
    candidate_count: int
    sample_size: int
    skipped: int = 0
    hits_at: int = HITS_AT
    extra: dict = field(default_factory=dict)

    def _side(self, ranks):
        return ranks[ranks > 0]

    def _mean(self, ranks):
        r = self._side(ranks)
        return float(r.mean()) if len(r) else float("nan")

    def _hits(self, ranks):
        r = self._side(ranks)
        return 100.0 * float(np.count_nonzero(r <= self.hits_at)) / len(r) if len(r) else float("nan")

    @staticmethod
    def _average(a, b):
        if np.isnan(a):
            return b
        if np.isnan(b):
            return a
        return (a + b) / 2

    @property
    def left_mean_rank(self):
        return self._mean(self.left_ranks)

    @property
    def right_mean_rank(self):
        return self._mean(self.right_ranks)

    @property
    def mean_rank(self):
        return self._average(self.left_mean_rank, self.right_mean_rank)

    @property
    def left_hits(self):
        return self._hits(self.left_ranks)

    @property
    def right_hits(self):
        return self._hits(self.right_ranks)

    @property
    def hits(self):
        return self._average(self.left_hits, self.right_hits)

    def as_dict(self):
        return {
            "left_mean_rank": self.left_mean_rank,
            "right_mean_rank": self.right_mean_rank,
            "avg_mean_rank": self.mean_rank,
            f"left_hits@{self.hits_at}": self.left_hits,
            f"right_hits@{self.hits_at}": self.right_hits,
            f"avg_hits@{self.hits_at}": self.hits,
            "candidates": self.candidate_count,
            "sample_size": self.sample_size,
            "skipped_sides": self.skipped,
            **self.extra,
        }

    def to_tsv(self):
        return "".join(f"{k}\t{v!r}\n" if isinstance(v, float) else f"{k}\t{v}\n"
                       for k, v in self.as_dict().items())

    def to_text(self):
        k = self.hits_at
        lines = [
            f"{'':10}{'Mean rank':>30}   {'Hits@' + str(k) + ' (%)':>30}",
            f"{'':10}{'Left':>10}{'Right':>10}{'Avg':>10}   {'Left':>10}{'Right':>10}{'Avg':>10}",
            f"{'':10}{self.left_mean_rank:10.2f}{self.right_mean_rank:10.2f}{self.mean_rank:10.2f}   "
            f"{self.left_hits:10.2f}{self.right_hits:10.2f}{self.hits:10.2f}",
            f"candidates: {self.candidate_count}",
            f"sample size used: {self.sample_size}",
        ]
        if self.skipped:
            lines.append(f"sides skipped (unseen entity): {self.skipped}")
        return "\n".join(lines) + "\n"

    def rank_lines(self, vocab=None):
        out = []
        for (h, r, t), lr, rr in zip(self.triples, self.left_ranks, self.right_ranks):
            if vocab is not None:
                h, r, t = vocab.entity_names[h], vocab.relation_names[r], vocab.entity_names[t]
            out.append(f"{h} {r} {t} {lr} {rr}\n")
        return "".join(out)


def _sample(triples, sample_size, rng):
    if sample_size is None or sample_size >= len(triples):
        return triples
    if rng is None:
        raise EvaluationError("sampled evaluation needs an rng")
    idx = np.sort(rng.choice(len(triples), size=sample_size, replace=False))
    return triples[idx]


def _rank_all(store, triples, candidates, sides_for, ties, threads):
    def work(rows):
        out = []
        for i in rows:
            tri = tuple(int(v) for v in triples[i])
            do_left, do_right = sides_for(tri)
            out.append((
                rank_side(store, tri, "left", candidates, ties) if do_left else 0,
                rank_side(store, tri, "right", candidates, ties) if do_right else 0,
            ))
        return out

    n = len(triples)
    if threads <= 1 or n < 2:
        pairs = work(range(n))
    else:
        chunks = np.array_split(np.arange(n), threads)
        with ThreadPoolExecutor(threads) as pool:
            pairs = [p for part in pool.map(work, chunks) for p in part]
    arr = np.asarray(pairs, dtype=np.int64).reshape(n, 2)
    return arr[:, 0], arr[:, 1]


def link_prediction_eval(store: EmbeddingStore, triples, candidates, sample_size=None, rng=None,
                         ties="optimistic", threads=1) -> EvalReport:
    """Rank both sides of every (optionally sampled) triple against ``candidates``."""
    triples = triples_to_array(triples)
    if len(triples) == 0:
        raise EvaluationError("no triples to evaluate")
    candidates = np.asarray(candidates)
    triples = _sample(triples, sample_size, rng)
    left, right = _rank_all(store, triples, candidates, lambda tri: (True, True), ties, threads)
    return EvalReport(triples, left, right, len(candidates), len(triples))


def encoded_store(encoder, relations, distance, dataset: Dataset, entity_ids, batch=256):
    """EmbeddingStore whose rows for ``entity_ids`` come from encoding descriptions."""
    ids = np.unique(np.asarray(entity_ids, dtype=np.int64))
    missing = [i for i in ids if not dataset.descriptions.get(int(i), "").strip()]
    if missing:
        names = [dataset.vocab.entity_names[i] for i in missing[:5]]
        raise EvaluationError(f"no description for entity {', '.join(names)}")
    table = np.zeros((dataset.vocab.num_entities, relations.shape[1]))
    for start in range(0, len(ids), batch):
        chunk = ids[start:start + batch]
        names = [dataset.vocab.entity_names[i] for i in chunk]
        try:
            table[chunk] = encoder.encode_batch([dataset.descriptions[int(i)] for i in chunk], names=names)
        except NumericError as exc:
            raise EvaluationError(str(exc)) from None
    return EmbeddingStore(table, relations.copy(), distance)


def unseen_entity_eval(encoder, relations, distance, dataset: Dataset, split="test",
                       sample_size=None, rng=None, ties="optimistic", rank_unseen_side=False,
                       threads=1) -> EvalReport:
    """Rank held-out triples whose unseen entity is embedded from its description.

    Candidates are the training entities.  A side whose true entity is
    unseen is skipped (and counted) unless ``rank_unseen_side`` is set.
    """
    triples = triples_to_array(dataset.split(split))
    if len(triples) == 0:
        raise EvaluationError(f"split {split!r} is empty")
    candidates = dataset.training_entities()
    triples = _sample(triples, sample_size, rng)
    needed = np.concatenate([candidates, triples[:, 0], triples[:, 2]])
    store = encoded_store(encoder, relations, distance, dataset, needed)
    seen = set(candidates.tolist())

    def sides_for(tri):
        h, _, t = tri
        if rank_unseen_side:
            return True, True
        return h in seen, t in seen

    left, right = _rank_all(store, triples, candidates, sides_for, ties, threads)
    skipped = int(np.count_nonzero(left == 0) + np.count_nonzero(right == 0))
    return EvalReport(triples, left, right, len(candidates), len(triples), skipped=skipped)
