"""Command-line entry point: ``transkb ingest|train|eval|embed|query``."""
from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataset import Vocabulary, load_dataset, load_word_vectors, validate_unseen_split
from .encoders import ConfigError
from .evaluate import link_prediction_eval, unseen_entity_eval
from .transe import nearest_neighbors
from .trainer import (TrainConfig, init_state, load_checkpoint, run_epochs, save_checkpoint,
                      substream)

logger = logging.getLogger("transkb")

PATH_KEYS = ("train", "valid", "test", "descriptions", "word_vectors", "out")
FLAG_ALIASES = {"lr": "learning_rate", "batch": "batch_size", "sample-size": "sample_size"}


class CLIError(Exception):
    pass


def resolve_path(path):
    """Return ``path`` or, if it does not exist, ``$TRANSKB_DATA_DIR/path``."""
    if path is None:
        return None
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get("TRANSKB_DATA_DIR")
    if base and not p.is_absolute() and (Path(base) / p).exists():
        return Path(base) / p
    raise CLIError(f"no such file: {path}")


def _coerce(key, raw, kind):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CLIError(f"{key}: expected a boolean, got {raw!r}")
    if kind is list:
        return json.loads(raw)
    try:
        return kind(raw)
    except ValueError:
        raise CLIError(f"{key}: cannot parse {raw!r}") from None


def _config_types():
    types = {}
    for f in fields(TrainConfig):
        t = str(f.type)
        types[f.name] = (bool if "bool" in t else int if "int" in t else
                         float if "float" in t else list if "list" in t else str)
    types.update({k: str for k in PATH_KEYS})
    types.update({"split": str, "sample_size": int, "threads": int, "lenient": bool})
    return types


def read_run_config(path) -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    types = _config_types()
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            key = FLAG_ALIASES.get(key, key)
            if not sep:
                raise CLIError(f"{path}:{lineno}: expected key=value")
            if key not in types:
                close = difflib.get_close_matches(key, types, n=3)
                hint = f" (did you mean {', '.join(close)}?)" if close else ""
                raise CLIError(f"{path}:{lineno}: unknown key {key!r}{hint}")
            out[key] = _coerce(key, value.strip(), types[key])
    return out


def _merge(args, names) -> dict:
    conf = read_run_config(resolve_path(args.config)) if getattr(args, "config", None) else {}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            conf[name] = value
    return conf


def _load_data(conf, vocab=None):
    if "train" not in conf:
        raise CLIError("a training triples file is required (--train or train= in --config)")
    paths = {k: resolve_path(conf.get(k)) for k in ("train", "valid", "test", "descriptions")}
    return load_dataset(paths["train"], paths["valid"], paths["test"], paths["descriptions"],
                        strict=not conf.get("lenient", False), vocab=vocab)


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


# -- commands ---------------------------------------------------------------

def cmd_ingest(args, out):
    conf = _merge(args, ("train", "valid", "test", "descriptions", "lenient"))
    ds = _load_data(conf)
    stats = ds.statistics()
    rep = validate_unseen_split(ds)
    rows = list(stats.items())
    for split in ("valid", "test"):
        c = getattr(rep, split)
        rows += [(f"{split}_both_seen", c.both_seen), (f"{split}_one_unseen", c.one_unseen),
                 (f"{split}_both_unseen", c.both_unseen)]
    rows.append(("concept_learning_valid", rep.concept_learning_valid))
    if args.tsv:
        out.write("".join(f"{k}\t{v}\n" for k, v in rows))
    else:
        width = max(len(k) for k, _ in rows)
        out.write("".join(f"{k.replace('_', ' '):<{width}}  {v}\n" for k, v in rows))
    return 0


TRAIN_FLAGS = ("mode", "gamma", "learning_rate", "momentum", "batch_size", "epochs", "dim",
               "distance", "seed", "eval_every")


def cmd_train(args, out):
    conf = _merge(args, TRAIN_FLAGS + PATH_KEYS + ("sample_size", "threads", "lenient"))
    out_dir = Path(conf.get("out") or "run")
    cfg_keys = {f.name for f in fields(TrainConfig)}
    cfg_values = {k: v for k, v in conf.items() if k in cfg_keys}
    if "sample_size" in conf:
        cfg_values["eval_sample_size"] = conf["sample_size"]
    config = TrainConfig(**cfg_values)
    word_vectors = None
    if config.mode == "joint_cnn":
        if not conf.get("word_vectors"):
            raise ConfigError("joint_cnn mode needs --word-vectors")
        word_vectors = load_word_vectors(resolve_path(conf["word_vectors"]), config.word_dim)
    ds = _load_data(conf)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = init_state(ds, config, word_vectors)
    log_path = out_dir / "metrics.log"
    with open(log_path, "w", encoding="utf-8") as log:
        for res in run_epochs(state, ds):
            log.write(f"{res.epoch} {_fmt(res.loss)} {_fmt(res.val_mean_rank)} {_fmt(res.val_hits10)}\n")
            log.flush()
            if config.eval_every and res.epoch % config.eval_every == 0:
                save_checkpoint(state, out_dir / f"epoch{res.epoch:04d}.tkb",
                                ds if config.joint else None)
    final = out_dir / "final.tkb"
    save_checkpoint(state, final, ds if config.joint else None)
    out.write(f"wrote {final}\n")
    return 0


def _eval_state(args):
    state = load_checkpoint(resolve_path(args.checkpoint))
    conf = _merge(args, ("train", "valid", "test", "descriptions", "split", "sample_size",
                         "threads", "seed", "lenient"))
    vocab = Vocabulary.from_lines(state.vocab.to_lines())
    ds = _load_data(conf, vocab)
    return state, conf, ds


def cmd_eval(args, out):
    state, conf, ds = _eval_state(args)
    split = conf.get("split", "test")
    seed = conf.get("seed", state.config.seed)
    rng = substream(seed, "eval")
    threads = conf.get("threads", 1)
    sample = conf.get("sample_size")
    if state.config.joint:
        rep = unseen_entity_eval(state.encoder, state.relations.value, state.config.distance, ds,
                                 split, sample, rng, rank_unseen_side=args.rank_unseen_side,
                                 threads=threads)
    else:
        rep = link_prediction_eval(state.store(), ds.split(split), state.candidates, sample, rng,
                                   threads=threads)
    out.write(rep.to_tsv() if args.tsv else rep.to_text())
    if args.ranks:
        Path(args.ranks).write_text(rep.rank_lines(ds.vocab), encoding="utf-8")
    return 0


def _read_text(args):
    if args.text is not None:
        return args.text
    if args.file is not None:
        return resolve_path(args.file).read_text(encoding="utf-8")
    raise CLIError("give --text or --file")


def cmd_embed(args, out):
    state = load_checkpoint(resolve_path(args.checkpoint))
    if state.encoder is None:
        raise CLIError("embed needs a joint-mode checkpoint")
    vec = state.encoder.encode(_read_text(args))
    sep = "\t" if args.tsv else " "
    out.write(sep.join(f"{v:.17g}" for v in vec) + "\n")
    return 0


def cmd_query(args, out):
    state = load_checkpoint(resolve_path(args.checkpoint))
    vocab = state.vocab
    if args.relation not in vocab.relation_ids:
        close = difflib.get_close_matches(args.relation, vocab.relation_names, n=5, cutoff=0.0)
        raise CLIError(f"unknown relation {args.relation!r}; closest: {', '.join(close)}")
    if args.k < 1:
        raise CLIError("k must be >= 1")
    store = state.store()
    rel = store.relations[vocab.relation_ids[args.relation]]
    if args.entity is not None:
        if args.entity not in vocab.entity_ids:
            raise CLIError(f"unknown entity {args.entity!r}")
        eid = vocab.entity_ids[args.entity]
        if state.config.joint and eid not in set(state.candidates.tolist()):
            raise CLIError(f"{args.entity!r} has no stored embedding; pass its description with --text")
        head = store.entities[eid]
    else:
        if state.encoder is None:
            raise CLIError("querying by description needs a joint-mode checkpoint")
        head = state.encoder.encode(_read_text(args))
    hits = nearest_neighbors(store, head + rel, args.k, state.candidates)
    for rank, (e, d) in enumerate(hits, 1):
        if args.tsv:
            out.write(f"{rank}\t{vocab.entity_names[e]}\t{d!r}\n")
        else:
            out.write(f"{rank:>4}  {vocab.entity_names[e]}  {d:.6f}\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="transkb", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--config")
        p.add_argument("--train")
        p.add_argument("--valid")
        p.add_argument("--test")
        p.add_argument("--descriptions")
        p.add_argument("--lenient", action="store_const", const=True, default=None,
                       help="skip descriptions of unknown entities instead of failing")
        p.add_argument("--tsv", action="store_true", help="machine-readable key<TAB>value output")
        p.add_argument("--threads", type=int)

    p = sub.add_parser("ingest", help="parse a dataset and print statistics")
    data_args(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    data_args(p)
    p.add_argument("--mode", choices=("baseline", "joint_mlp", "joint_cnn"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--distance", choices=("l1", "l2"))
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--sample-size", dest="sample_size", type=int)
    p.add_argument("--word-vectors", dest="word_vectors")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="link-prediction evaluation of a checkpoint")
    p.add_argument("checkpoint")
    data_args(p)
    p.add_argument("--split", choices=("valid", "test", "train"))
    p.add_argument("--sample-size", dest="sample_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ranks", help="write per-triple 'head rel tail left right' lines here")
    p.add_argument("--rank-unseen-side", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="embed a description with a joint-mode checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--text")
    p.add_argument("--file")
    p.add_argument("--tsv", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("query", help="nearest entities to head + relation")
    p.add_argument("checkpoint")
    p.add_argument("--relation", required=True)
    p.add_argument("--entity")
    p.add_argument("--text")
    p.add_argument("--file")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--tsv", action="store_true")
    p.set_defaults(func=cmd_query)
    return parser


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except (CLIError, ConfigError, ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"transkb {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
