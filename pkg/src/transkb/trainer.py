"""Training loops for the lookup-table baseline and the joint encoder model."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import transe
from .dataset import Dataset, Vocabulary, triples_to_array
from .encoders import (CNNConfig, CNNEncoder, ConfigError, MLPConfig, MLPEncoder, DEFAULT_CNN_LAYERS,
                       build_encoder)
from .evaluate import encoded_store, link_prediction_eval, unseen_entity_eval
from .featurize import NgramVocabulary, tokenize
from .kernels import DTYPE, NumericError, Parameter
from .transe import EmbeddingStore

logger = logging.getLogger(__name__)

MODES = ("baseline", "joint_mlp", "joint_cnn")
STREAMS = {"init": 0, "shuffle": 1, "corrupt": 2, "eval": 3}


class TrainingError(RuntimeError):
    pass


def substream(seed, name):
    """Independent generator for one purpose (init, shuffle, corrupt, eval)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


@dataclass
class TrainConfig:
    mode: str = "baseline"
    gamma: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int | None = None
    epochs: int = 100
    distance: str = "l1"
    dim: int = 50
    seed: int = 0
    eval_every: int = 0
    eval_sample_size: int | None = None
    filtered_negatives: bool = False
    renormalize_relations: bool = False
    early_stopping: bool = False
    patience: int = 5
    # encoder
    hidden: int = 500
    normalize_output: bool = True
    word_dim: int = 50
    cnn_layers: list = field(default_factory=lambda: [list(l) for l in DEFAULT_CNN_LAYERS])
    dense: int = 500
    conv_bias: bool = True
    conv_relu: bool = True
    dense_relu: bool = True
    max_len: int | None = None
    min_len: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size is None:
            self.batch_size = 512 if self.mode == "baseline" else 64
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if self.distance.lower() not in transe.DISTANCES:
            raise ConfigError(f"distance must be l1 or l2, got {self.distance!r}")
        self.distance = self.distance.lower()
        self.cnn_layers = [list(l) for l in self.cnn_layers]

    @property
    def joint(self):
        return self.mode != "baseline"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def nesterov_step(param: Parameter, velocity: np.ndarray, lr, mu):
    """``v <- mu v - lr g``; ``w <- w + mu v - lr g``; then clear the gradient."""
    if param.value.shape != velocity.shape:
        raise ValueError(f"velocity {velocity.shape} != parameter {param.value.shape}")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    velocity *= mu
    velocity -= lr * g
    param.value += mu * velocity - lr * g
    param.zero_grad()


@dataclass
class TrainState:
    config: TrainConfig
    vocab: Vocabulary
    relations: Parameter
    entities: Parameter | None = None          # baseline only
    encoder: MLPEncoder | CNNEncoder | None = None
    candidates: np.ndarray | None = None       # training entity ids
    velocities: dict = field(default_factory=dict)
    epoch: int = 0
    rngs: dict = field(default_factory=dict)
    entity_cache: np.ndarray | None = None     # joint: encoded candidate rows, set on save/load

    def parameters(self) -> dict[str, Parameter]:
        params = {"relations": self.relations}
        if self.entities is not None:
            params["entities"] = self.entities
        if self.encoder is not None:
            params.update({f"enc.{k}": p for k, p in self.encoder.parameters().items()})
        return params

    def store(self, dataset: Dataset | None = None) -> EmbeddingStore:
        """Store for ranking; joint mode encodes candidate (and split) entities."""
        cfg = self.config
        if not cfg.joint:
            return EmbeddingStore(self.entities.value, self.relations.value, cfg.distance)
        if dataset is None:
            if self.entity_cache is None:
                raise TrainingError("joint-mode store needs the dataset descriptions")
            return EmbeddingStore(self.entity_cache, self.relations.value, cfg.distance)
        return encoded_store(self.encoder, self.relations.value, cfg.distance, dataset, self.candidates)


@dataclass
class EpochResult:
    epoch: int
    loss: float
    mean_output_norm: float | None = None
    val_mean_rank: float | None = None
    val_hits10: float | None = None
    stopped: bool = False


def _init_state(dataset: Dataset, config: TrainConfig, word_vectors=None) -> TrainState:
    if not dataset.train:
        raise ConfigError("training set is empty")
    rngs = {name: substream(config.seed, name) for name in STREAMS}
    init = rngs["init"]
    vocab = dataset.vocab
    candidates = dataset.training_entities()
    if config.mode == "baseline":
        store = EmbeddingStore.init(vocab.num_entities, vocab.num_relations, config.dim, init,
                                    config.distance)
        state = TrainState(config, vocab, Parameter(store.relations), Parameter(store.entities),
                           candidates=candidates, rngs=rngs)
    else:
        missing = dataset.missing_descriptions(("train",))
        if missing:
            raise TrainingError(f"no description for entity {vocab.entity_names[missing[0]]!r}"
                                f" ({len(missing)} training entities lack one)")
        bound = 6.0 / math.sqrt(config.dim)
        rel = init.uniform(-bound, bound, size=(vocab.num_relations, config.dim))
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        enc_seed = int(init.integers(2**31))
        train_texts = [dataset.descriptions[int(e)] for e in candidates]
        if config.mode == "joint_mlp":
            ngrams = NgramVocabulary.build(train_texts)
            encoder = MLPEncoder.init(MLPConfig(len(ngrams), config.dim, config.hidden,
                                                config.normalize_output), ngrams, enc_seed)
        else:
            if word_vectors is None:
                raise ConfigError("joint_cnn mode needs a word-vector table")
            max_len = config.max_len
            if max_len is None:
                max_len = max(len(tokenize(t)) for t in dataset.descriptions.values())
                config.max_len = max_len = max(max_len, 1)
            cfg = CNNConfig(word_dim=config.word_dim, dim=config.dim, layers=config.cnn_layers,
                            dense=config.dense, conv_bias=config.conv_bias, conv_relu=config.conv_relu,
                            dense_relu=config.dense_relu, normalize=config.normalize_output,
                            max_len=max_len, min_len=config.min_len)
            encoder = CNNEncoder.init(cfg, word_vectors, enc_seed)
        if not config.normalize_output:
            _calibrate_output_scale(encoder, train_texts)
        state = TrainState(config, vocab, Parameter(rel), encoder=encoder, candidates=candidates,
                           rngs=rngs)
    state.velocities = {k: np.zeros_like(p.value) for k, p in state.parameters().items()}
    return state


def _calibrate_output_scale(encoder, texts):
    # ablation only: start the unnormalized output at unit mean norm so any
    # later drift comes from training
    norms = np.linalg.norm(encoder.encode_batch(texts), axis=1)
    scale = float(norms.mean())
    if scale > 0:
        encoder.params["W_out"].value /= scale
        encoder.params["b_out"].value /= scale


def _negatives(state, pos, known):
    rng = state.rngs["corrupt"]
    neg = transe.corrupt_batch(pos, rng, state.candidates)
    if known is not None:
        for _ in range(10):
            bad = np.fromiter((tuple(t) in known for t in neg.tolist()), bool, len(neg))
            if not bad.any():
                break
            neg[bad] = transe.corrupt_batch(pos[bad], rng, state.candidates)
    return neg


def _scatter(shape, index_grads):
    out = np.zeros(shape, dtype=DTYPE)
    for idx, g in index_grads:
        np.add.at(out, idx, g)
    return out


def _step(state: TrainState):
    cfg = state.config
    for name, p in state.parameters().items():
        nesterov_step(p, state.velocities[name], cfg.learning_rate, cfg.momentum)


def _baseline_iteration(state: TrainState, pos, neg):
    cfg = state.config
    E, R = state.entities.value, state.relations.value
    loss, gp, gn = transe.margin_loss(
        (E[pos[:, 0]], R[pos[:, 1]], E[pos[:, 2]]),
        (E[neg[:, 0]], R[neg[:, 1]], E[neg[:, 2]]), cfg.gamma, cfg.distance)
    state.entities.grad += _scatter(E.shape, [(pos[:, 0], gp[0]), (pos[:, 2], gp[2]),
                                              (neg[:, 0], gn[0]), (neg[:, 2], gn[2])])
    state.relations.grad += _scatter(R.shape, [(pos[:, 1], gp[1]), (neg[:, 1], gn[1])])
    _step(state)
    store = EmbeddingStore(E, R, cfg.distance)
    transe.renormalize(store, "entities")
    if cfg.renormalize_relations:
        transe.renormalize(store, "relations")
    return loss, None


def _joint_iteration(state: TrainState, pos, neg, dataset: Dataset):
    cfg = state.config
    enc = state.encoder
    ents = np.unique(np.concatenate([pos[:, 0], pos[:, 2], neg[:, 0], neg[:, 2]]))
    texts = []
    for e in ents:
        text = dataset.descriptions.get(int(e), "")
        if not text.strip():
            raise TrainingError(f"no description for entity {dataset.vocab.entity_names[e]!r}")
        texts.append(text)
    names = [dataset.vocab.entity_names[e] for e in ents]
    try:
        emb = enc.forward(enc.prepare(texts), names=names)
    except NumericError as exc:
        raise TrainingError(str(exc)) from None
    R = state.relations.value
    loc = {k: np.searchsorted(ents, pos[:, k]) for k in (0, 2)}
    nloc = {k: np.searchsorted(ents, neg[:, k]) for k in (0, 2)}
    loss, gp, gn = transe.margin_loss(
        (emb[loc[0]], R[pos[:, 1]], emb[loc[2]]),
        (emb[nloc[0]], R[neg[:, 1]], emb[nloc[2]]), cfg.gamma, cfg.distance)
    grad_emb = _scatter(emb.shape, [(loc[0], gp[0]), (loc[2], gp[2]),
                                    (nloc[0], gn[0]), (nloc[2], gn[2])])
    state.relations.grad += _scatter(R.shape, [(pos[:, 1], gp[1]), (neg[:, 1], gn[1])])
    enc.backward(grad_emb)
    _step(state)
    norms = np.linalg.norm(R, axis=1)
    if np.any(norms == 0):
        raise NumericError(f"zero-norm relation row {int(np.flatnonzero(norms == 0)[0])}")
    R /= norms[:, None]
    return loss, float(np.linalg.norm(emb, axis=1).mean())


def _validate(state: TrainState, dataset: Dataset):
    cfg = state.config
    rng = state.rngs["eval"]
    if not cfg.joint:
        rep = link_prediction_eval(state.store(), dataset.valid, state.candidates,
                                   cfg.eval_sample_size, rng)
    else:
        rep = unseen_entity_eval(state.encoder, state.relations.value, cfg.distance, dataset,
                                 "valid", cfg.eval_sample_size, rng)
    return rep.mean_rank, rep.hits


def run_epochs(state: TrainState, dataset: Dataset, epochs=None, on_iteration=None):
    """Train ``state`` in place, yielding an :class:`EpochResult` per epoch."""
    cfg = state.config
    train = triples_to_array(dataset.train)
    known = {tuple(t) for t in train.tolist()} if cfg.filtered_negatives else None
    total = cfg.epochs if epochs is None else state.epoch + epochs
    best, bad_evals = math.inf, 0
    while state.epoch < total:
        order = state.rngs["shuffle"].permutation(len(train))
        epoch_loss, norm_sum, batches = 0.0, 0.0, 0
        for start in range(0, len(train), cfg.batch_size):
            pos = train[order[start:start + cfg.batch_size]]
            neg = _negatives(state, pos, known)
            if cfg.joint:
                loss, mean_norm = _joint_iteration(state, pos, neg, dataset)
                norm_sum += mean_norm
            else:
                loss, _ = _baseline_iteration(state, pos, neg)
            epoch_loss += loss
            batches += 1
            if on_iteration is not None:
                on_iteration(state)
        state.epoch += 1
        result = EpochResult(state.epoch, epoch_loss,
                             norm_sum / batches if cfg.joint else None)
        if cfg.eval_every and dataset.valid and state.epoch % cfg.eval_every == 0:
            result.val_mean_rank, result.val_hits10 = _validate(state, dataset)
            if cfg.early_stopping:
                if result.val_mean_rank < best:
                    best, bad_evals = result.val_mean_rank, 0
                else:
                    bad_evals += 1
                    result.stopped = bad_evals >= cfg.patience
        logger.info("epoch %d loss %.6f", state.epoch, epoch_loss)
        yield result
        if result.stopped:
            break


def train_baseline(dataset: Dataset, config: TrainConfig, on_iteration=None):
    if config.mode != "baseline":
        raise ConfigError("train_baseline needs mode=baseline")
    state = _init_state(dataset, config)
    for result in run_epochs(state, dataset, on_iteration=on_iteration):
        yield result, state


def train_joint(dataset: Dataset, config: TrainConfig, word_vectors=None, on_iteration=None):
    if not config.joint:
        raise ConfigError("train_joint needs mode=joint_mlp or joint_cnn")
    state = _init_state(dataset, config, word_vectors)
    for result in run_epochs(state, dataset, on_iteration=on_iteration):
        yield result, state


def init_state(dataset, config, word_vectors=None):
    return _init_state(dataset, config, word_vectors)


# -- checkpoints --------------------------------------------------------------

MAGIC = b"TKB1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class PrecisionError(CheckpointError):
    pass


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def checkpoint_bytes(state: TrainState, dataset: Dataset | None = None) -> bytes:
    cfg = state.config
    header = {
        "version": VERSION,
        "precision": DTYPE.name,
        "config": cfg.to_dict(),
        "vocab": state.vocab.to_lines(),
        "epoch": state.epoch,
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "candidates": [int(c) for c in state.candidates] if state.candidates is not None else None,
    }
    tensors = {"relations": state.relations.value}
    if state.entities is not None:
        tensors["entities"] = state.entities.value
    if state.encoder is not None:
        enc = state.encoder
        header["encoder"] = {"kind": enc.kind, "config": asdict(enc.config)}
        if enc.kind == "mlp":
            header["encoder"]["ngrams"] = enc.ngrams.to_lines()
        else:
            header["encoder"]["words"] = sorted(enc.word_index, key=enc.word_index.get)
        for k, p in enc.parameters().items():
            tensors[f"enc.{k}"] = p.value
        cache = state.entity_cache
        if dataset is not None:
            cache = state.store(dataset).entities
        if cache is not None:
            tensors["entity_cache"] = cache
    for k, v in sorted(state.velocities.items()):
        tensors[f"velocity.{k}"] = v
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_json_default).encode()
    body = bytearray(struct.pack("<I", len(head)) + head)
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=DTYPE.newbyteorder("<")).tobytes()
    blob = MAGIC + struct.pack("<Q", len(body)) + bytes(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(state: TrainState, path, dataset: Dataset | None = None):
    """Write atomically: a temp file in the target directory, then rename."""
    data = checkpoint_bytes(state, dataset)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_checkpoint(data: bytes, dtype=None) -> TrainState:
    dtype = np.dtype(DTYPE if dtype is None else dtype)
    if len(data) < 4 or data[:3] != MAGIC[:3]:
        raise CheckpointError("not a checkpoint file")
    if data[:4] != MAGIC:
        raise UnsupportedVersionError(f"unsupported checkpoint version {data[3:4]!r}")
    if len(data) < 16:
        raise IntegrityError("truncated checkpoint")
    (length,) = struct.unpack_from("<Q", data, 4)
    if len(data) != 12 + length + 4:
        raise IntegrityError(f"checkpoint length {len(data)} != recorded {12 + length + 4}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise IntegrityError("checkpoint checksum mismatch")
    pos = 12
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen].decode())
    pos += hlen
    if header.get("version") != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {header.get('version')}")
    if header["precision"] != dtype.name:
        raise PrecisionError(f"checkpoint precision {header['precision']} != requested {dtype.name}")
    stored = np.dtype(header["precision"]).newbyteorder("<")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * stored.itemsize
        tensors[name] = np.frombuffer(data, stored, int(np.prod(shape)), pos).reshape(shape).astype(dtype)
        pos += size
    config = TrainConfig.from_dict(header["config"])
    vocab = Vocabulary.from_lines(header["vocab"])
    rngs = {}
    for k, st in header["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[k] = g
    encoder = None
    if "encoder" in header:
        eh = header["encoder"]
        params = {k[4:]: Parameter(v) for k, v in tensors.items() if k.startswith("enc.")}
        if eh["kind"] == "mlp":
            resources = NgramVocabulary.from_lines(eh["ngrams"])
        else:
            resources = {w: i for i, w in enumerate(eh["words"])}
        encoder = build_encoder(eh["kind"], eh["config"], resources, params)
    cands = header.get("candidates")
    state = TrainState(
        config, vocab, Parameter(tensors["relations"]),
        Parameter(tensors["entities"]) if "entities" in tensors else None,
        encoder, np.asarray(cands, dtype=np.int64) if cands is not None else None,
        {k[9:]: v for k, v in tensors.items() if k.startswith("velocity.")},
        header["epoch"], rngs, tensors.get("entity_cache"))
    return state


def load_checkpoint(path, dtype=None) -> TrainState:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), dtype)
