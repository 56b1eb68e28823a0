"""Translation-based embedding store: scoring, corruption, margin loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Triple
from .kernels import DTYPE, DimensionError, NumericError

DISTANCES = ("l1", "l2")


def _check_distance(distance):
    distance = distance.lower()
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}, got {distance!r}")
    return distance


def distance_rows(diff, distance):
    """Row-wise L1 or L2 norm of ``diff`` (any leading shape)."""
    if distance == "l1":
        return np.abs(diff).sum(axis=-1)
    return np.sqrt((diff * diff).sum(axis=-1))


def distance_grad(diff, distance):
    """Gradient of ``distance_rows`` w.r.t. ``diff``; zero where undefined."""
    if distance == "l1":
        return np.sign(diff)
    norm = np.sqrt((diff * diff).sum(axis=-1, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, diff / np.where(norm > 0, norm, 1.0), 0.0)


@dataclass
class EmbeddingStore:
    entities: np.ndarray
    relations: np.ndarray
    distance: str = "l1"

    def __post_init__(self):
        self.distance = _check_distance(self.distance)
        self.entities = np.asarray(self.entities, dtype=DTYPE)
        self.relations = np.asarray(self.relations, dtype=DTYPE)
        if self.entities.shape[1] != self.relations.shape[1]:
            raise DimensionError(
                f"entity dim {self.entities.shape[1]} != relation dim {self.relations.shape[1]}")

    @property
    def dim(self):
        return self.entities.shape[1]

    @classmethod
    def init(cls, num_entities, num_relations, dim, rng, distance="l1"):
        bound = 6.0 / np.sqrt(dim)
        ent = rng.uniform(-bound, bound, size=(num_entities, dim))
        rel = rng.uniform(-bound, bound, size=(num_relations, dim))
        store = cls(ent, rel, distance)
        renormalize(store, "entities")
        renormalize(store, "relations")
        return store


def score(store: EmbeddingStore, triple) -> float:
    h, r, t = triple
    for idx, n, what in ((h, len(store.entities), "entity"), (t, len(store.entities), "entity"),
                         (r, len(store.relations), "relation")):
        if not 0 <= idx < n:
            raise IndexError(f"{what} id {idx} out of range [0, {n})")
    diff = store.entities[h] + store.relations[r] - store.entities[t]
    return float(distance_rows(diff, store.distance))


def corrupt(triple, rng, entity_count, side="uniform_random", candidates=None) -> Triple:
    """Replace the head or tail of ``triple`` with a uniformly drawn entity.

    With ``candidates`` the replacement is drawn from that id array instead
    of ``range(entity_count)``.
    """
    if entity_count < 2:
        raise ValueError("corruption needs at least two entities")
    h, r, t = triple
    if side == "uniform_random":
        side = "left" if rng.random() < 0.5 else "right"
    e = int(rng.integers(entity_count))
    if candidates is not None:
        e = int(candidates[e])
    if side == "left":
        return Triple(e, r, t)
    if side == "right":
        return Triple(h, r, e)
    raise ValueError(f"side must be left, right or uniform_random, got {side!r}")


def corrupt_batch(triples: np.ndarray, rng, candidates: np.ndarray) -> np.ndarray:
    """One negative per row: side by a fair coin, replacement uniform over ``candidates``."""
    if len(candidates) < 2:
        raise ValueError("corruption needs at least two candidate entities")
    triples = np.asarray(triples)
    left = rng.random(len(triples)) < 0.5
    repl = candidates[rng.integers(len(candidates), size=len(triples))]
    neg = triples.copy()
    neg[left, 0] = repl[left]
    neg[~left, 2] = repl[~left]
    return neg


def margin_loss(pos, neg, gamma, distance="l1"):
    """Hinge ``sum max(0, gamma + d(h+r, t) - d(h'+r', t'))`` over aligned pairs.

    ``pos`` and ``neg`` are ``(head, relation, tail)`` tuples of ``(B, n)``
    arrays.  Returns ``(loss, grads_pos, grads_neg)`` where the gradient
    tuples mirror the inputs.
    """
    if gamma <= 0:
        raise ValueError("margin gamma must be positive")
    distance = _check_distance(distance)
    shapes = {np.shape(a) for a in (*pos, *neg)}
    if len(shapes) != 1:
        raise DimensionError(f"margin_loss: mismatched shapes {sorted(shapes)}")
    ph, pr, pt = pos
    nh, nr, nt = neg
    pdiff = ph + pr - pt
    ndiff = nh + nr - nt
    d_pos = distance_rows(pdiff, distance)
    d_neg = distance_rows(ndiff, distance)
    hinge = gamma + d_pos - d_neg
    active = hinge > 0
    loss = float(np.sum(np.where(active, hinge, 0.0)))
    gp = distance_grad(pdiff, distance) * active[:, None]
    gn = -distance_grad(ndiff, distance) * active[:, None]
    return loss, (gp, gp, -gp), (gn, gn, -gn)


def renormalize(store: EmbeddingStore, which="entities", rows=None):
    if which not in ("entities", "relations"):
        raise ValueError(f"which must be 'entities' or 'relations', got {which!r}")
    table = store.entities if which == "entities" else store.relations
    sel = slice(None) if rows is None else rows
    norms = np.linalg.norm(table[sel], axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        ids = np.arange(len(table))[sel][zero]
        raise NumericError(f"cannot renormalize zero-norm {which[:-1]} row {int(ids[0])}")
    table[sel] = table[sel] / norms[:, None]


def nearest_neighbors(store: EmbeddingStore, query, k, candidates=None):
    """Top-``k`` ``(entity, distance)`` pairs by ascending distance, ties by id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cand = np.arange(len(store.entities)) if candidates is None else np.asarray(candidates)
    if len(cand) == 0:
        raise ValueError("empty candidate set")
    cand = np.sort(cand)
    dist = distance_rows(store.entities[cand] - np.asarray(query, dtype=DTYPE), store.distance)
    order = np.lexsort((cand, dist))[:k]
    return [(int(cand[i]), float(dist[i])) for i in order]


def corruption_set_loss(store: EmbeddingStore, triples, gamma, candidates=None) -> float:
    """Margin loss summed over every left and right corruption of each triple.

    This is the full-sum objective that ``margin_loss`` estimates with one
    sampled negative per fact.
    """
    E, R = store.entities, store.relations
    cand = np.arange(len(E)) if candidates is None else np.asarray(candidates)
    total = 0.0
    for h, r, t in np.asarray(triples).reshape(-1, 3):
        d_pos = distance_rows(E[h] + R[r] - E[t], store.distance)
        d_left = distance_rows(E[cand] + R[r] - E[t], store.distance)
        d_right = distance_rows(E[h] + R[r] - E[cand], store.distance)
        total += np.maximum(0.0, gamma + d_pos - d_left).sum()
        total += np.maximum(0.0, gamma + d_pos - d_right).sum()
    return float(total)
