"""Concept-learning networks mapping descriptions to unit-norm embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels as K
from .featurize import NgramVocabulary, bong_matrix, token_indices
from .kernels import DTYPE, NumericError, Parameter

DEFAULT_CNN_LAYERS = (
    ("conv", 64, 1), ("conv", 64, 3), ("pool", 2, 2),
    ("conv", 128, 3), ("conv", 128, 3), ("pool", 2, 2),
    ("conv", 256, 3), ("pool", 2, 2),
    ("conv", 512, 3), ("pool", 2, 2),
)


class EncoderStateError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


@dataclass
class MLPConfig:
    vocab_size: int
    dim: int = 50
    hidden: int = 500
    normalize: bool = True


@dataclass
class CNNConfig:
    word_dim: int = 50
    dim: int = 50
    layers: list = field(default_factory=lambda: [list(l) for l in DEFAULT_CNN_LAYERS])
    dense: int = 500
    conv_bias: bool = True
    conv_relu: bool = True
    dense_relu: bool = True
    normalize: bool = True
    max_len: int = 617
    min_len: int = 16


class _Encoder:
    kind = ""

    def __init__(self):
        self._cache = None

    def parameters(self) -> dict[str, Parameter]:
        raise NotImplementedError

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def _output_forward(self, x):
        W, b = self.params["W_out"], self.params["b_out"]
        if self.config.normalize:
            return K.l2norm_forward(x, W, b)
        return K.dense_forward(x, W, b)

    def _output_backward(self, g, cache):
        if self.config.normalize:
            return K.l2norm_backward(g, cache)
        return K.dense_backward(g, cache)

    def encode(self, text: str, name=None) -> np.ndarray:
        return self.encode_batch([text], names=None if name is None else [name])[0]

    def encode_batch(self, texts, names=None) -> np.ndarray:
        """Embeddings for ``texts`` without touching the backward cache."""
        saved = self._cache
        try:
            return self.forward(self.prepare(texts), names=names)
        finally:
            self._cache = saved

    def backward(self, grad_embeddings):
        if self._cache is None:
            raise EncoderStateError("backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        self._backward(np.asarray(grad_embeddings, dtype=DTYPE), cache)

    def _normalize_error(self, exc, out_pre, names):
        if names is not None and out_pre is not None:
            norms = np.linalg.norm(out_pre, axis=-1)
            bad = [names[i] for i in np.flatnonzero(norms <= K.NORM_EPS)]
            return NumericError(f"{exc} for entity {', '.join(map(str, bad))}")
        return exc


class MLPEncoder(_Encoder):
    """Bag-of-3-grams input, one ReLU hidden layer, normalized output."""

    kind = "mlp"

    def __init__(self, config: MLPConfig, ngrams: NgramVocabulary, params=None):
        super().__init__()
        if config.vocab_size != len(ngrams):
            raise ConfigError(f"vocab_size {config.vocab_size} != n-gram vocabulary size {len(ngrams)}")
        self.config = config
        self.ngrams = ngrams
        self.params = params

    @classmethod
    def init(cls, config: MLPConfig, ngrams: NgramVocabulary, seed: int):
        rng = np.random.default_rng(seed)
        V, H, n = config.vocab_size, config.hidden, config.dim
        params = {
            "W_hidden": Parameter(glorot(rng, (H, V), V, H)),
            "b_hidden": Parameter(np.zeros(H)),
            "W_out": Parameter(glorot(rng, (n, H), H, n)),
            "b_out": Parameter(np.zeros(n)),
        }
        return cls(config, ngrams, params)

    def parameters(self):
        return self.params

    def prepare(self, texts):
        return bong_matrix(list(texts), self.ngrams)

    def forward(self, X, names=None):
        X = np.asarray(X, dtype=DTYPE)
        h_pre, c1 = K.dense_forward(X, self.params["W_hidden"], self.params["b_hidden"])
        h, c2 = K.relu_forward(h_pre)
        try:
            out, c3 = self._output_forward(h)
        except NumericError as exc:
            z = h @ self.params["W_out"].value.T + self.params["b_out"].value
            raise self._normalize_error(exc, z, names) from None
        self._cache = (c1, c2, c3)
        return out

    def _backward(self, g, cache):
        c1, c2, c3 = cache
        g = self._output_backward(g, c3)
        g = K.relu_backward(g, c2)
        K.dense_backward(g, c1)


class CNNEncoder(_Encoder):
    """Convolutional stack over word-vector columns, normalized output.

    The stack's final feature map is reduced by a max over the remaining
    sequence positions so the dense layer sees a fixed-size input.
    """

    kind = "cnn"

    def __init__(self, config: CNNConfig, word_index: dict, params=None):
        super().__init__()
        self.config = config
        self.word_index = word_index
        self.params = params
        self._check_layers()

    def _check_layers(self):
        layers = self.config.layers
        if not layers or layers[0][0] != "conv":
            raise ConfigError("the first CNN layer must be a convolution")
        for spec in layers:
            if spec[0] not in ("conv", "pool"):
                raise ConfigError(f"unknown layer {spec!r}")

    @classmethod
    def init(cls, config: CNNConfig, word_vectors, seed: int):
        if word_vectors is None:
            raise ConfigError("the CNN encoder needs a pretrained word-vector table")
        if word_vectors.dim != config.word_dim:
            raise ConfigError(f"word vectors have dim {word_vectors.dim}, config says {config.word_dim}")
        rng = np.random.default_rng(seed)
        table = np.vstack([word_vectors.vectors, np.zeros((1, config.word_dim))])
        params = {"words": Parameter(table)}
        channels, first = 1, True
        for i, spec in enumerate(config.layers):
            if spec[0] != "conv":
                continue
            _, c_out, width = spec
            kh = config.word_dim if first else 1
            shape = (c_out, channels, kh, width)
            params[f"conv{i}_K"] = Parameter(
                glorot(rng, shape, channels * kh * width, c_out * kh * width))
            if config.conv_bias:
                params[f"conv{i}_b"] = Parameter(np.zeros(c_out))
            channels, first = c_out, False
        params["W_dense"] = Parameter(glorot(rng, (config.dense, channels), channels, config.dense))
        params["b_dense"] = Parameter(np.zeros(config.dense))
        params["W_out"] = Parameter(glorot(rng, (config.dim, config.dense), config.dense, config.dim))
        params["b_out"] = Parameter(np.zeros(config.dim))
        return cls(config, dict(word_vectors.index), params)

    def parameters(self):
        return self.params

    def prepare(self, texts):
        return [token_indices(t, self.word_index, self.config.max_len, self.config.min_len)[1]
                for t in texts]

    def _forward_group(self, ids):
        """Run the stack on a ``(B, k)`` block of equal-length token id rows."""
        cfg = self.config
        words = self.params["words"]
        F = words.value[ids].transpose(0, 2, 1)[:, None]    # (B, 1, d, k)
        steps = []
        first = True
        for i, spec in enumerate(cfg.layers):
            if spec[0] == "conv":
                F, c = K.conv_seq_forward(F, self.params[f"conv{i}_K"], self.params.get(f"conv{i}_b"),
                                          stride=1, padding="valid" if first else "same")
                steps.append(("conv", c))
                first = False
                if cfg.conv_relu:
                    F, c = K.relu_forward(F)
                    steps.append(("relu", c))
            else:
                _, width, stride = spec
                F, c = K.maxpool_seq_forward(F, width, stride)
                steps.append(("pool", c))
        # max over the remaining sequence positions
        flat = F.reshape(F.shape[0], F.shape[1], -1)
        pos = flat.argmax(axis=2)
        pooled = np.take_along_axis(flat, pos[..., None], axis=2)[..., 0]
        return pooled, (ids, steps, F.shape, pos)

    def forward(self, batch, names=None):
        groups = {}
        for row, ids in enumerate(batch):
            groups.setdefault(len(ids), []).append(row)
        P = np.zeros((len(batch), self._channels()), dtype=DTYPE)
        caches = []
        for rows in groups.values():
            ids = np.stack([np.asarray(batch[r]) for r in rows])
            p, c = self._forward_group(ids)
            P[rows] = p
            caches.append((rows, c))
        h_pre, cd = K.dense_forward(P, self.params["W_dense"], self.params["b_dense"])
        cr = None
        h = h_pre
        if self.config.dense_relu:
            h, cr = K.relu_forward(h_pre)
        try:
            out, co = self._output_forward(h)
        except NumericError as exc:
            z = h @ self.params["W_out"].value.T + self.params["b_out"].value
            raise self._normalize_error(exc, z, names) from None
        self._cache = (caches, cd, cr, co)
        return out

    def _channels(self):
        return self.params["W_dense"].shape[1]

    def _backward(self, g, cache):
        caches, cd, cr, co = cache
        g = self._output_backward(g, co)
        if cr is not None:
            g = K.relu_backward(g, cr)
        gP = K.dense_backward(g, cd)
        words = self.params["words"]
        for rows, (ids, steps, shape, pos) in caches:
            gF = np.zeros((shape[0], shape[1], shape[2] * shape[3]), dtype=DTYPE)
            np.put_along_axis(gF, pos[..., None], gP[rows][..., None], axis=2)
            gF = gF.reshape(shape)
            for kind, c in reversed(steps):
                if kind == "conv":
                    gF = K.conv_seq_backward(gF, c)
                elif kind == "relu":
                    gF = K.relu_backward(gF, c)
                else:
                    gF = K.maxpool_seq_backward(gF, c)
            # gF: (B, 1, d, k) -> per-token rows
            np.add.at(words.grad, ids.reshape(-1), gF[:, 0].transpose(0, 2, 1).reshape(-1, gF.shape[2]))


def config_to_dict(config) -> dict:
    return asdict(config)


def build_encoder(kind, config: dict, resources, params=None):
    """Reassemble an encoder from serialized pieces (used by checkpoint loading)."""
    if kind == "mlp":
        return MLPEncoder(MLPConfig(**config), resources, params)
    if kind == "cnn":
        cfg = CNNConfig(**config)
        cfg.layers = [list(l) for l in cfg.layers]
        return CNNEncoder(cfg, resources, params)
    raise ConfigError(f"unknown encoder kind {kind!r}")
