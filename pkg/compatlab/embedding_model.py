"""
Feed-forward embedding network, cosine prototype classifier, ArcFace loss
and SGD with momentum, all with exact analytic gradients in numpy.
"""

import copy
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from compatlab.errors import (ConfigurationError, CoverageError, LossUndefinedError,
                              NumericalFailureError, ShapeError)

logger = logging.getLogger(__name__)

# cosines are clamped into [-1 + COS_EPS, 1 - COS_EPS] before arccos/sin
COS_EPS = 1e-7
NORM_EPS = 1e-12

ACTIVATIONS = ("relu", "tanh")


def normalize_rows(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, eps)


def array_fingerprint(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


@dataclass
class ArcFaceParams:
    scale: float = 64.0
    margin: float = 0.5

    def validate(self) -> "ArcFaceParams":
        if not self.scale > 0:
            raise ConfigurationError("arcface.scale", "must be positive")
        if not 0.0 <= self.margin < np.pi / 2:
            raise ConfigurationError("arcface.margin", "must lie in [0, pi/2)")
        return self


@dataclass
class ModelConfig:
    input_dim: int = 64
    hidden_dims: List[int] = field(default_factory=lambda: [32])
    embed_dim: int = 32
    activation: str = "relu"
    init_seed: int = 0

    def validate(self) -> "ModelConfig":
        if int(self.input_dim) < 1:
            raise ConfigurationError("input_dim", "must be positive")
        if not self.hidden_dims or any(int(h) < 1 for h in self.hidden_dims):
            raise ConfigurationError("hidden_dims", "must be a nonempty list of positive integers")
        if int(self.embed_dim) < 2:
            raise ConfigurationError("embed_dim", "must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError("activation", f"must be one of {ACTIVATIONS}")
        if int(self.init_seed) < 0:
            raise ConfigurationError("init_seed", "must be nonnegative")
        return self

    @property
    def layer_dims(self) -> List[int]:
        return [int(self.input_dim)] + [int(h) for h in self.hidden_dims] + [int(self.embed_dim)]


class ForwardCache(NamedTuple):
    activations: List[np.ndarray]
    pre_activations: List[np.ndarray]
    features: np.ndarray
    norms: np.ndarray


class EmbeddingModel:
    """MLP backbone whose outputs are L2-normalised embeddings"""

    def __init__(self, config: ModelConfig,
                 weights: Optional[List[np.ndarray]] = None,
                 biases: Optional[List[np.ndarray]] = None):
        self.config = config.validate()
        dims = config.layer_dims
        if weights is None:
            rng = np.random.default_rng(int(config.init_seed))
            gain = 2.0 if config.activation == "relu" else 1.0
            weights = [rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_out, fan_in))
                       for fan_in, fan_out in zip(dims[:-1], dims[1:])]
        if biases is None:
            biases = [np.zeros(fan_out) for fan_out in dims[1:]]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i} has shape {w.shape}/{b.shape}, "
                                 f"expected {(dims[i + 1], dims[i])}/{(dims[i + 1],)}")

    @property
    def embed_dim(self) -> int:
        return int(self.config.embed_dim)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def _activate(self, z: np.ndarray) -> np.ndarray:
        if self.config.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def _activation_grad(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.config.activation == "relu":
            return (z > 0).astype(np.float64)
        return 1.0 - a * a

    def _check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if inputs.ndim != 2 or inputs.shape[1] != self.config.input_dim:
            raise ShapeError(f"expected inputs with {self.config.input_dim} columns, got shape {inputs.shape}")
        return inputs

    def forward_train(self, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        a = self._check_inputs(inputs)
        activations = [a]
        pre_activations = []
        last = self.num_layers - 1
        out = a
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre_activations.append(z)
            if i < last:
                a = self._activate(z)
                activations.append(a)
            else:
                out = z
        norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), NORM_EPS)
        features = out / norms
        return features, ForwardCache(activations, pre_activations, features, norms)

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Unit-norm embeddings, one row per input row"""
        features, _ = self.forward_train(inputs)
        return features

    def backward(self, cache: ForwardCache, grad_features: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of all parameters given dLoss/dfeatures"""
        v = cache.features
        if grad_features.shape != v.shape:
            raise ShapeError(f"gradient shape {grad_features.shape} != features {v.shape}")
        # through v = z / ||z||
        g = (grad_features - v * np.sum(v * grad_features, axis=1, keepdims=True)) / cache.norms
        grads: Dict[str, np.ndarray] = {}
        for i in reversed(range(self.num_layers)):
            grads[f"W{i}"] = g.T @ cache.activations[i]
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i]) * self._activation_grad(cache.pre_activations[i - 1],
                                                                  cache.activations[i])
        return grads

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = w
            params[f"b{i}"] = b
        return params

    def fingerprint(self) -> str:
        return array_fingerprint(*self.weights, *self.biases)

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(copy.deepcopy(self.config),
                              [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases])


@dataclass
class PrototypeMatrix:
    """One unit-norm row per class; ``class_ids[i]`` is the class of row i"""

    rows: np.ndarray
    class_ids: Optional[np.ndarray] = None
    trainable: bool = True

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.class_ids is None:
            class_ids = np.arange(len(rows), dtype=np.int64)
        else:
            class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if len(class_ids) != len(rows):
            raise ShapeError(f"{len(class_ids)} class ids for {len(rows)} prototype rows")
        order = np.argsort(class_ids, kind="stable")
        if np.any(np.diff(class_ids[order]) == 0):
            raise ConfigurationError("class_ids", "prototype class ids must be unique")
        self.rows = normalize_rows(rows[order])
        self.class_ids = class_ids[order]

    @classmethod
    def initialize(cls, class_ids: np.ndarray, dim: int, seed: int) -> "PrototypeMatrix":
        rng = np.random.default_rng([int(seed), 1])
        class_ids = np.asarray(class_ids, dtype=np.int64)
        return cls(rng.normal(size=(len(class_ids), dim)), class_ids, trainable=True)

    @property
    def num_classes(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row_index(self, labels: np.ndarray) -> np.ndarray:
        """Map global class ids to row positions"""
        labels = np.asarray(labels, dtype=np.int64)
        pos = np.searchsorted(self.class_ids, labels)
        pos = np.minimum(pos, len(self.class_ids) - 1)
        bad = self.class_ids[pos] != labels
        if np.any(bad):
            missing = sorted(set(labels[bad].tolist()))
            raise CoverageError(f"labels {missing[:10]} have no prototype row")
        return pos

    def covers(self, labels: np.ndarray) -> bool:
        return bool(np.all(np.isin(np.asarray(labels), self.class_ids)))

    def fingerprint(self) -> str:
        return array_fingerprint(self.rows, self.class_ids)

    def frozen(self) -> "PrototypeMatrix":
        return PrototypeMatrix(self.rows.copy(), self.class_ids.copy(), trainable=False)

    def copy(self) -> "PrototypeMatrix":
        return PrototypeMatrix(self.rows.copy(), self.class_ids.copy(), trainable=self.trainable)


class ArcFaceResult(NamedTuple):
    loss: float
    grad_features: np.ndarray
    grad_prototypes: Optional[np.ndarray]


def arcface_loss(features: np.ndarray,
                 labels: np.ndarray,
                 prototypes: PrototypeMatrix,
                 params: Optional[ArcFaceParams] = None) -> ArcFaceResult:
    """Additive angular margin softmax loss, averaged over the batch."""
    params = params or ArcFaceParams()
    if prototypes.num_classes < 2:
        raise LossUndefinedError("ArcFace needs at least two classes (negative sum is empty)")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != prototypes.dim:
        raise ShapeError(f"feature dim {features.shape[1]} != prototype dim {prototypes.dim}")
    idx = prototypes.row_index(labels)
    if len(idx) != len(features):
        raise ShapeError(f"{len(idx)} labels for {len(features)} features")
    batch = len(features)
    rows = np.arange(batch)
    s, m = float(params.scale), float(params.margin)
    cos_m, sin_m = np.cos(m), np.sin(m)

    cos = features @ prototypes.rows.T
    cos_y = cos[rows, idx]
    c = np.clip(cos_y, -1.0 + COS_EPS, 1.0 - COS_EPS)
    sin = np.sqrt(1.0 - c * c)
    phi = c * cos_m - sin * sin_m

    logits = s * cos
    logits[rows, idx] = s * phi
    top = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - top)
    total = exp.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(total[:, 0])
    loss = float(np.mean(lse - logits[rows, idx]))

    g_logits = exp / total
    g_logits[rows, idx] -= 1.0
    g_logits /= batch
    g_cos = s * g_logits
    inside = (cos_y > -1.0 + COS_EPS) & (cos_y < 1.0 - COS_EPS)
    dphi = np.where(inside, cos_m + (c / sin) * sin_m, 0.0)
    g_cos[rows, idx] = s * g_logits[rows, idx] * dphi

    grad_features = g_cos @ prototypes.rows
    grad_prototypes = g_cos.T @ features if prototypes.trainable else None
    return ArcFaceResult(loss, grad_features, grad_prototypes)


def classification_accuracy(model: EmbeddingModel, classifier: PrototypeMatrix, dataset) -> float:
    """Fraction of samples whose nearest prototype (cosine) is their class"""
    features = model.forward(dataset.inputs)
    predicted = classifier.class_ids[np.argmax(features @ classifier.rows.T, axis=1)]
    return float(np.mean(predicted == dataset.labels))


class SGDOptimizer:
    """SGD with momentum and L2 weight decay (momentum buffer, then update)"""

    def __init__(self, lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: Dict[str, np.ndarray] = {}

    def _update(self, name: str, param: np.ndarray, grad: np.ndarray):
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        step = grad + self.weight_decay * param if self.weight_decay else grad
        if self.momentum:
            buf = self.velocity.get(name)
            buf = step.copy() if buf is None else self.momentum * buf + step
            self.velocity[name] = buf
            step = buf
        param -= self.lr * step

    def step(self, model: EmbeddingModel,
             grads: Dict[str, np.ndarray],
             prototypes: Optional[PrototypeMatrix] = None,
             prototype_grad: Optional[np.ndarray] = None):
        """Apply one update in place; frozen prototypes are never touched."""
        pending = list(grads.values())
        if prototype_grad is not None:
            pending.append(prototype_grad)
        for g in pending:
            if not np.all(np.isfinite(g)):
                raise NumericalFailureError("non-finite gradient, aborting update")
        params = model.parameters()
        for name, grad in grads.items():
            if name not in params:
                raise ShapeError(f"unknown parameter {name}")
            self._update(name, params[name], grad)
        if prototypes is not None and prototypes.trainable and prototype_grad is not None:
            self._update("prototypes", prototypes.rows, prototype_grad)
            prototypes.rows[:] = normalize_rows(prototypes.rows)


def sgd_step(optimizer: SGDOptimizer, model: EmbeddingModel, prototypes: Optional[PrototypeMatrix],
             grads: Dict[str, np.ndarray], prototype_grad: Optional[np.ndarray] = None):
    optimizer.step(model, grads, prototypes, prototype_grad)


# checkpoint layout (little-endian):
#   magic 8s | version u32 | activation u32 | n_dims u32 | dims n_dims*u32 | init_seed u64
#   per layer: W (out x in, f8, row-major), b (out, f8)
#   has_prototypes u32 [| C u32 | d u32 | trainable u32 | class_ids C*i8 | rows C*d f8]
CHECKPOINT_MAGIC = b"CLABCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], model: EmbeddingModel,
                    prototypes: Optional[PrototypeMatrix] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    dims = cfg.layer_dims
    chunks = [
        struct.pack("<8sIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                    ACTIVATIONS.index(cfg.activation), len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        struct.pack("<Q", int(cfg.init_seed)),
    ]
    for w, b in zip(model.weights, model.biases):
        chunks.append(w.astype("<f8").tobytes())
        chunks.append(b.astype("<f8").tobytes())
    if prototypes is None:
        chunks.append(struct.pack("<I", 0))
    else:
        chunks.append(struct.pack("<IIII", 1, prototypes.num_classes, prototypes.dim,
                                  int(prototypes.trainable)))
        chunks.append(prototypes.class_ids.astype("<i8").tobytes())
        chunks.append(prototypes.rows.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[EmbeddingModel, Optional[PrototypeMatrix]]:
    blob = Path(path).read_bytes()
    magic, version, act_code, n_dims = struct.unpack_from("<8sIII", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigurationError("checkpoint", f"{path} is not a compatlab checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError("checkpoint", f"unsupported checkpoint version {version}")
    offset = struct.calcsize("<8sIII")
    dims = list(struct.unpack_from(f"<{n_dims}I", blob, offset))
    offset += 4 * n_dims
    (init_seed,) = struct.unpack_from("<Q", blob, offset)
    offset += 8

    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    config = ModelConfig(input_dim=dims[0], hidden_dims=dims[1:-1], embed_dim=dims[-1],
                         activation=ACTIVATIONS[act_code], init_seed=int(init_seed))
    model = EmbeddingModel(config, weights, biases)

    (has_prototypes,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    prototypes = None
    if has_prototypes:
        n_cls, dim, trainable = struct.unpack_from("<III", blob, offset)
        offset += 12
        class_ids = np.frombuffer(blob, dtype="<i8", count=n_cls, offset=offset).astype(np.int64)
        offset += 8 * n_cls
        rows = np.frombuffer(blob, dtype="<f8", count=n_cls * dim, offset=offset)
        prototypes = PrototypeMatrix(rows.reshape(n_cls, dim).astype(np.float64), class_ids,
                                     trainable=bool(trainable))
    return model, prototypes
