"""Down-scaled trainable embedding extractor with explicit backprop.

The extractor is a stack of fully connected layers: the penultimate linear
layer produces the embedding (taken pre-activation, so embedding losses see
an unbounded linear space), and the final linear layer maps the activated
embedding to per-speaker logits. The reference architecture this stands in
for is a Thin ResNet-34 with SE-blocks and attentive statistic pooling; the
transfer losses are architecture-agnostic, which is what makes the
substitution sound (see README for the layer table of the full model).

Checkpoints are little-endian binary: magic "XFSC", u32 version, config
block, training metadata, then per-layer weight/bias blocks in order.
Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, UsageError
from .numerics import Rng, as_matrix

CHECKPOINT_MAGIC = b"XFSC"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh")
_ROLES = ("baseline", "teacher", "student")


@dataclass(frozen=True)
class ExtractorConfig:
    """Layer widths of the extractor plus classifier head."""

    input_dim: int = 24
    hidden_dims: tuple[int, ...] = (32, 32)
    embedding_dim: int = 16
    num_speakers: int = 50
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embedding_dim, self.num_speakers)
        if any(int(d) < 1 for d in dims):
            raise ParameterError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        """Input/output widths chained through every linear layer."""
        return (self.input_dim, *self.hidden_dims, self.embedding_dim, self.num_speakers)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 2


@dataclass
class ModelParams:
    """Per-layer weights/biases plus a role tag."""

    config: ExtractorConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    role: str = "baseline"

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ParameterError(f"role must be one of {_ROLES}")
        dims = self.config.layer_dims
        if len(self.weights) != self.config.num_layers or len(self.biases) != len(self.weights):
            raise ShapeError("parameter count does not match config layer count")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i} shape mismatch: {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {i} contains non-finite values")

    def copy(self, role: str | None = None) -> "ModelParams":
        return ModelParams(config=self.config,
                           weights=[w.copy() for w in self.weights],
                           biases=[b.copy() for b in self.biases],
                           role=role if role is not None else self.role)

    def allclose(self, other: "ModelParams") -> bool:
        return (self.config == other.config
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


@dataclass
class ParamGrads:
    """Gradients aligned with ModelParams.weights / .biases."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled_add(self, other: "ParamGrads", factor: float = 1.0):
        for i in range(len(self.weights)):
            self.weights[i] += factor * other.weights[i]
            self.biases[i] += factor * other.biases[i]


@dataclass
class ForwardCache:
    """Activations saved by forward for the matching backward pass."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    batch_size: int


def init_params(config: ExtractorConfig, rng: Rng, role: str = "baseline") -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic given the seed.

    Each layer draws from uniform(-sqrt(6/(fan_in+fan_out)), +same).
    """
    weights, biases = [], []
    dims = config.layer_dims
    for i in range(config.num_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(config=config, weights=weights, biases=biases, role=role)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_prime(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def forward(params: ModelParams, features) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the extractor on a B x input_dim batch.

    Returns (embeddings, logits, cache): embeddings are the pre-activation
    outputs of the penultimate linear layer; logits apply the final layer to
    the activated embedding.
    """
    x = as_matrix(features, "features")
    cfg = params.config
    if x.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected feature dim {cfg.input_dim}, got {x.shape[1]}")
    n_layers = cfg.num_layers
    emb_index = n_layers - 2
    a = x
    layer_inputs, pre_acts = [], []
    embeddings = None
    for i in range(n_layers):
        z = a @ params.weights[i] + params.biases[i]
        layer_inputs.append(a)
        pre_acts.append(z)
        if i == emb_index:
            embeddings = z
        a = _act(z, cfg.activation) if i < n_layers - 1 else z
    logits = a
    cache = ForwardCache(layer_inputs=layer_inputs, pre_activations=pre_acts,
                         batch_size=x.shape[0])
    return embeddings, logits, cache


def backward(params: ModelParams, cache: ForwardCache,
             grad_embeddings: np.ndarray | None = None,
             grad_logits: np.ndarray | None = None) -> ParamGrads:
    """Reverse-mode parameter gradients for the given upstream gradients.

    Both upstream paths are supported at once: `grad_logits` enters at the
    classifier output, `grad_embeddings` is added at the pre-activation
    embedding layer; their contributions sum.
    """
    if cache is None or len(cache.layer_inputs) != params.config.num_layers:
        raise UsageError("backward requires the cache from a matching forward pass")
    if grad_embeddings is None and grad_logits is None:
        raise UsageError("at least one upstream gradient must be provided")
    cfg = params.config
    n_layers = cfg.num_layers
    emb_index = n_layers - 2
    b = cache.batch_size
    if grad_logits is None:
        grad_logits = np.zeros((b, cfg.num_speakers))

    grads_w: list[np.ndarray | None] = [None] * n_layers
    grads_b: list[np.ndarray | None] = [None] * n_layers

    # Output layer has no activation.
    a_in = cache.layer_inputs[-1]
    grads_w[-1] = a_in.T @ grad_logits
    grads_b[-1] = grad_logits.sum(axis=0)
    delta = grad_logits @ params.weights[-1].T  # grad w.r.t. act(embedding)

    for i in range(n_layers - 2, -1, -1):
        z = cache.pre_activations[i]
        dz = delta * _act_prime(z, cfg.activation)
        if i == emb_index and grad_embeddings is not None:
            dz = dz + grad_embeddings
        a_in = cache.layer_inputs[i]
        grads_w[i] = a_in.T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            delta = dz @ params.weights[i].T
    return ParamGrads(weights=grads_w, biases=grads_b)


def zero_grads(params: ModelParams) -> ParamGrads:
    return ParamGrads(weights=[np.zeros_like(w) for w in params.weights],
                      biases=[np.zeros_like(b) for b in params.biases])


def params_to_vector(params: ModelParams) -> np.ndarray:
    """Flatten all weights then biases, layer order, into one vector."""
    parts = [w.ravel() for w in params.weights] + [b.ravel() for b in params.biases]
    return np.concatenate(parts)


def vector_to_params(config: ExtractorConfig, vec: np.ndarray,
                     role: str = "baseline") -> ModelParams:
    """Inverse of params_to_vector for the given config."""
    dims = config.layer_dims
    weights, biases = [], []
    pos = 0
    for i in range(config.num_layers):
        n = dims[i] * dims[i + 1]
        weights.append(np.asarray(vec[pos:pos + n], dtype=np.float64).reshape(dims[i], dims[i + 1]))
        pos += n
    for i in range(config.num_layers):
        n = dims[i + 1]
        biases.append(np.asarray(vec[pos:pos + n], dtype=np.float64).copy())
        pos += n
    if pos != vec.size:
        raise ShapeError(f"vector length {vec.size} does not match config (need {pos})")
    return ModelParams(config=config, weights=weights, biases=biases, role=role)


def grads_to_vector(grads: ParamGrads) -> np.ndarray:
    parts = [w.ravel() for w in grads.weights] + [b.ravel() for b in grads.biases]
    return np.concatenate(parts)


@dataclass(frozen=True)
class CheckpointMeta:
    """Training metadata stored alongside the parameters."""

    epoch: int = 0
    seed: int = 0
    recipe: str = ""


@dataclass(frozen=True)
class Checkpoint:
    version: int
    params: ModelParams
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)


def _pack_checkpoint(params: ModelParams, meta: CheckpointMeta) -> bytes:
    cfg = params.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<II", cfg.input_dim, len(cfg.hidden_dims)))
    for d in cfg.hidden_dims:
        buf.write(struct.pack("<I", d))
    buf.write(struct.pack("<II", cfg.embedding_dim, cfg.num_speakers))
    buf.write(struct.pack("<BB", _ACTIVATIONS.index(cfg.activation), _ROLES.index(params.role)))
    recipe = meta.recipe.encode("utf-8")
    buf.write(struct.pack("<IQH", meta.epoch, meta.seed & 0xFFFFFFFFFFFFFFFF, len(recipe)))
    buf.write(recipe)
    for w, b in zip(params.weights, params.biases):
        buf.write(struct.pack("<II", w.shape[0], w.shape[1]))
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def params_hash(params: ModelParams) -> str:
    """sha256 over the serialized parameters (metadata zeroed)."""
    return hashlib.sha256(_pack_checkpoint(params, CheckpointMeta())).hexdigest()


def save_checkpoint(params: ModelParams, path, meta: CheckpointMeta | None = None) -> str:
    """Write a checkpoint; returns the sha256 content hash of the file."""
    data = _pack_checkpoint(params, meta or CheckpointMeta())
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_full_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    input_dim, n_hidden = r.unpack("<II")
    hidden = tuple(r.unpack("<I")[0] for _ in range(n_hidden))
    embedding_dim, num_speakers = r.unpack("<II")
    act_idx, role_idx = r.unpack("<BB")
    if act_idx >= len(_ACTIVATIONS) or role_idx >= len(_ROLES):
        raise FormatError("corrupt checkpoint enum fields")
    epoch, seed, recipe_len = r.unpack("<IQH")
    recipe = r.take(recipe_len).decode("utf-8")
    cfg = ExtractorConfig(input_dim=input_dim, hidden_dims=hidden,
                          embedding_dim=embedding_dim, num_speakers=num_speakers,
                          activation=_ACTIVATIONS[act_idx])
    weights, biases = [], []
    for _ in range(cfg.num_layers):
        rows, cols = r.unpack("<II")
        w = np.frombuffer(r.take(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
        b = np.frombuffer(r.take(cols * 8), dtype="<f8").copy()
        weights.append(w)
        biases.append(b)
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    params = ModelParams(config=cfg, weights=weights, biases=biases, role=_ROLES[role_idx])
    return Checkpoint(version=version, params=params,
                      meta=CheckpointMeta(epoch=epoch, seed=seed, recipe=recipe))


def load_checkpoint(path) -> ModelParams:
    return load_full_checkpoint(path).params


def checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
