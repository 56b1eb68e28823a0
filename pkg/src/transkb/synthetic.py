"""Small generated knowledge bases with known structure, for tests and demos."""
from __future__ import annotations

import numpy as np

from .dataset import Dataset, Triple, Vocabulary

KIND_WORDS = ("apple", "river", "stone", "violin", "comet", "forest", "engine", "castle", "lantern", "falcon")
COLOR_WORDS = ("crimson", "azure", "golden", "violet", "emerald")


def ring_kb(n=100, relation="next") -> Dataset:
    """Facts ``i -next-> (i+1) mod n``; validation and test repeat the training facts."""
    vocab = Vocabulary()
    ids = [vocab.add_entity(f"e{i}") for i in range(n)]
    r = vocab.add_relation(relation)
    facts = [Triple(ids[i], r, ids[(i + 1) % n]) for i in range(n)]
    return Dataset(vocab, list(facts), list(facts), list(facts),
                   {i: f"node number {i}" for i in ids})


def nameable_kb(n_entities=200, holdout=0.2, seed=0) -> Dataset:
    """Items whose descriptions name their kind and color; facts point at hub entities.

    Item ``i`` has kind ``i % 10`` and color ``(i // 10) % 5``; its
    description carries a unique identifier plus the kind and color words.
    ``holdout`` of all entities (items only) never appear in training; their
    facts are split between validation and test.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocabulary()
    kind_rel = vocab.add_relation("has_kind")
    color_rel = vocab.add_relation("has_color")
    descriptions = {}
    kinds = []
    for w in KIND_WORDS:
        e = vocab.add_entity(f"kind:{w}")
        kinds.append(e)
        descriptions[e] = f"the {w} category"
    colors = []
    for w in COLOR_WORDS:
        e = vocab.add_entity(f"color:{w}")
        colors.append(e)
        descriptions[e] = f"the color {w}"
    n_items = n_entities - len(kinds) - len(colors)
    items = []
    for i in range(n_items):
        e = vocab.add_entity(f"item{i:03d}")
        items.append(e)
        k, c = KIND_WORDS[i % 10], COLOR_WORDS[(i // 10) % 5]
        descriptions[e] = f"item{i:03d} is a {c} {k} object"
    held = set(rng.choice(n_items, size=int(round(holdout * n_entities)), replace=False).tolist())
    train, heldout = [], []
    for i, e in enumerate(items):
        facts = [Triple(e, kind_rel, kinds[i % 10]), Triple(e, color_rel, colors[(i // 10) % 5])]
        (heldout if i in held else train).extend(facts)
    order = rng.permutation(len(heldout))
    heldout = [heldout[j] for j in order]
    half = len(heldout) // 2
    return Dataset(vocab, train, heldout[:half], heldout[half:], descriptions)


def write_dataset(ds: Dataset, directory) -> dict:
    """Write ``train.txt``, ``valid.txt``, ``test.txt`` and ``descriptions.txt``."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names, rels = ds.vocab.entity_names, ds.vocab.relation_names
    paths = {}
    for split in ("train", "valid", "test"):
        path = paths[split] = directory / f"{split}.txt"
        path.write_text("".join(f"{names[h]}\t{rels[r]}\t{names[t]}\n" for h, r, t in ds.split(split)),
                        encoding="utf-8")
    path = paths["descriptions"] = directory / "descriptions.txt"
    path.write_text("".join(f"{names[e]}\t{text}\n" for e, text in sorted(ds.descriptions.items())),
                    encoding="utf-8")
    return paths


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="write a synthetic knowledge base")
    parser.add_argument("kind", choices=["ring", "nameable"])
    parser.add_argument("out")
    parser.add_argument("--seed", type=int, default=0, help="nameable only")
    args = parser.parse_args()
    kb = ring_kb() if args.kind == "ring" else nameable_kb(seed=args.seed)
    for name, p in write_dataset(kb, args.out).items():
        print(f"{name}\t{p}")
