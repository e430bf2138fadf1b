"""
Old-model pretraining and compatible new-model training.

The new model first trains with the classification loss only (warmup), then
adds ``eta`` times a compatibility term. Pseudo old prototypes are rebuilt
from a full pass over the new training set at the regeneration epochs.
"""

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from compatlab.compat_losses import (CompatibilityLoss, CompatLossSpec, LossKind, build_compat_loss,
                                     check_bct_applicable)
from compatlab.embedding_model import (ArcFaceParams, EmbeddingModel, ModelConfig, PrototypeMatrix,
                                       SGDOptimizer, arcface_loss, save_checkpoint)
from compatlab.errors import (CompatLabError, ConfigurationError, FrozenStateError,
                              NumericalFailureError, TrainingDivergedError)
from compatlab.prototype_engine import RefinementConfig, build_pseudo_classifier

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 8
    batch_size: int = 64
    lr: float = 0.05
    lr_decay_epochs: List[int] = field(default_factory=lambda: [18, 24])
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    prototype_regen_epochs: List[int] = field(default_factory=lambda: [8, 16, 24])
    loss_spec: CompatLossSpec = field(default_factory=CompatLossSpec)
    arcface: ArcFaceParams = field(default_factory=ArcFaceParams)
    seed: int = 666
    checkpoint_path: Optional[str] = None
    progress: bool = True

    def validate(self) -> "TrainConfig":
        if int(self.epochs) < 1:
            raise ConfigurationError("train.epochs", "must be >= 1")
        if not 0 <= int(self.warmup_epochs) < int(self.epochs):
            raise ConfigurationError("train.warmup_epochs", "must satisfy 0 <= warmup_epochs < epochs")
        if int(self.batch_size) < 1:
            raise ConfigurationError("train.batch_size", "must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("train.lr", "must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("train.lr_decay_factor", "must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("train.momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("train.weight_decay", "must be nonnegative")
        outside = [e for e in self.prototype_regen_epochs
                   if not int(self.warmup_epochs) <= int(e) < int(self.epochs)]
        if outside:
            raise ConfigurationError("train.prototype_regen_epochs",
                                     f"epochs {outside} are outside [warmup_epochs, epochs)")
        if int(self.seed) < 0:
            raise ConfigurationError("train.seed", "must be nonnegative")
        self.loss_spec.validate()
        self.arcface.validate()
        return self

    def learning_rate_at(self, epoch: int) -> float:
        decays = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** decays


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    cls_loss: float
    compat_loss: float
    total_loss: float
    prototype_regen: bool
    wall_time: float
    prototype_hash: Optional[str] = None
    old_model_hash: Optional[str] = None


class TrainLog:
    """Per-epoch training records"""

    def __init__(self, records: Optional[List[TrainRecord]] = None):
        self.records: List[TrainRecord] = list(records or [])

    def append(self, record: TrainRecord):
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TrainRecord]:
        return iter(self.records)

    def __getitem__(self, index) -> TrainRecord:
        return self.records[index]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def fingerprint(self) -> str:
        """Hash of every record field except wall time"""
        digest = hashlib.sha256()
        for record in self.records:
            values = asdict(record)
            values.pop("wall_time")
            digest.update(json.dumps(values, sort_keys=True).encode())
        return digest.hexdigest()

    def to_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for record in self.records:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path: Union[str, Path]) -> "TrainLog":
        with open(path) as f:
            return cls([TrainRecord(**json.loads(line)) for line in f if line.strip()])


class Snapshot(NamedTuple):
    epoch: int
    model: EmbeddingModel
    classifier: PrototypeMatrix


class CompatibleTrainer:
    """Runs the epoch loop for one model; without ``compat_loss`` it is plain classification."""

    def __init__(self, dataset, model: EmbeddingModel, classifier: PrototypeMatrix,
                 config: TrainConfig,
                 old_model: Optional[EmbeddingModel] = None,
                 old_classifier: Optional[PrototypeMatrix] = None,
                 compat_loss: Optional[CompatibilityLoss] = None,
                 refinement: Optional[RefinementConfig] = None,
                 name: str = "model"):
        self.dataset = dataset
        self.model = model
        self.classifier = classifier
        self.config = config.validate()
        self.old_model = old_model
        self.old_classifier = old_classifier
        self.compat_loss = compat_loss
        self.refinement = refinement or RefinementConfig()
        self.name = name
        self.optimizer = SGDOptimizer(config.lr, config.momentum, config.weight_decay)
        self.pseudo_classifier: Optional[PrototypeMatrix] = None
        self.log = TrainLog()
        if compat_loss is not None and old_model is None:
            raise ConfigurationError("old_model", "compatibility training needs the old model")

    @property
    def eta(self) -> float:
        return float(self.config.loss_spec.eta) if self.compat_loss is not None else 0.0

    def _compat_active(self, epoch: int) -> bool:
        return self.compat_loss is not None and self.eta > 0 and epoch >= self.config.warmup_epochs

    def _regenerate(self, epoch: int) -> bool:
        if not (self._compat_active(epoch) and self.compat_loss.requires_prototypes):
            return False
        if epoch not in self.config.prototype_regen_epochs and self.pseudo_classifier is not None:
            return False
        self.pseudo_classifier = build_pseudo_classifier(
            self.old_model, self.model, self.dataset, self.refinement, self.compat_loss.prototype_variant,
            expected_classes=self.classifier.class_ids)
        logger.info("%s epoch %d: regenerated %d pseudo prototypes (%s)", self.name, epoch,
                    self.pseudo_classifier.num_classes, self.compat_loss.prototype_variant.value)
        return True

    def _compat_prototypes(self) -> Optional[PrototypeMatrix]:
        if self.compat_loss.requires_prototypes:
            return self.pseudo_classifier
        if self.compat_loss.uses_old_classifier:
            return self.old_classifier
        return None

    def _diverged(self, epoch: int, last_good: Snapshot, reason: str):
        path = None
        if self.config.checkpoint_path:
            path = save_checkpoint(self.config.checkpoint_path, last_good.model, last_good.classifier)
            logger.error("%s diverged at epoch %d, last good state (epoch %d) saved to %s",
                         self.name, epoch, last_good.epoch, path)
        raise TrainingDivergedError(f"{self.name} diverged at epoch {epoch}: {reason}",
                                    epoch, last_good=last_good, checkpoint_path=path)

    def _train_epoch(self, epoch: int, compat_active: bool, last_good: Snapshot) -> Tuple[float, float]:
        cfg = self.config
        n = len(self.dataset)
        order = np.random.default_rng([int(cfg.seed), epoch]).permutation(n)
        batches = np.array_split(order, math.ceil(n / cfg.batch_size))
        cls_sum = compat_sum = 0.0
        for rows in batches:
            inputs, labels = self.dataset.inputs[rows], self.dataset.labels[rows]
            features, cache = self.model.forward_train(inputs)
            cls = arcface_loss(features, labels, self.classifier, cfg.arcface)
            grad = cls.grad_features
            compat_value = 0.0
            if compat_active:
                old_features = self.old_model.forward(inputs) if self.compat_loss.requires_old_features else None
                try:
                    out = self.compat_loss.compute(features, labels, old_features, self._compat_prototypes())
                except CompatLabError as exc:
                    exc.args = (f"{self.name} epoch {epoch}: {exc}",)
                    raise
                compat_value = out.loss
                grad = grad + self.eta * out.grad_features
            if not np.isfinite(cls.loss + self.eta * compat_value):
                self._diverged(epoch, last_good, "non-finite loss")
            grads = self.model.backward(cache, grad)
            try:
                self.optimizer.step(self.model, grads, self.classifier, cls.grad_prototypes)
            except NumericalFailureError as exc:
                self._diverged(epoch, last_good, str(exc))
            cls_sum += cls.loss * len(rows)
            compat_sum += compat_value * len(rows)
            logger.debug("%s epoch %d batch of %d: cls=%.4f compat=%.4f",
                         self.name, epoch, len(rows), cls.loss, compat_value)
        return cls_sum / n, compat_sum / n

    def run(self) -> TrainLog:
        cfg = self.config
        old_hash = self.old_model.fingerprint() if self.old_model is not None else None
        last_good = Snapshot(-1, self.model.copy(), self.classifier.copy())
        show = cfg.progress and logger.isEnabledFor(logging.INFO)
        for epoch in tqdm(range(cfg.epochs), desc=f"train {self.name}", disable=not show, leave=False):
            started = time.perf_counter()
            self.optimizer.lr = cfg.learning_rate_at(epoch)
            compat_active = self._compat_active(epoch)
            regen = self._regenerate(epoch)
            cls_loss, compat_loss = self._train_epoch(epoch, compat_active, last_good)

            if old_hash is not None and self.old_model.fingerprint() != old_hash:
                raise FrozenStateError(f"old model parameters changed during epoch {epoch}")
            prototypes = self._compat_prototypes() if compat_active else None
            record = TrainRecord(
                epoch=epoch,
                lr=self.optimizer.lr,
                cls_loss=cls_loss,
                compat_loss=compat_loss,
                total_loss=cls_loss + self.eta * compat_loss,
                prototype_regen=regen,
                wall_time=time.perf_counter() - started,
                prototype_hash=prototypes.fingerprint() if prototypes is not None else None,
                old_model_hash=old_hash if compat_active else None,
            )
            self.log.append(record)
            last_good = Snapshot(epoch, self.model.copy(), self.classifier.copy())
            logger.info("%s epoch %d/%d lr=%.4g cls=%.4f compat=%.4f total=%.4f%s", self.name, epoch + 1,
                        cfg.epochs, record.lr, cls_loss, compat_loss, record.total_loss,
                        " [regen]" if regen else "")
        return self.log


def train_classification(dataset, model_config: ModelConfig, train_config: TrainConfig,
                         name: str = "model") -> Tuple[EmbeddingModel, PrototypeMatrix, TrainLog]:
    """Classification-only training of a fresh model and classifier"""
    if len(dataset) == 0:
        raise ConfigurationError("dataset", "training set is empty")
    model = EmbeddingModel(model_config)
    classifier = PrototypeMatrix.initialize(dataset.class_ids, model.embed_dim, model_config.init_seed)
    trainer = CompatibleTrainer(dataset, model, classifier, train_config, name=name)
    log = trainer.run()
    return model, classifier, log


def train_old_model(old_set, model_config: ModelConfig, train_config: TrainConfig,
                    log_path: Optional[Union[str, Path]] = None) -> Tuple[EmbeddingModel, PrototypeMatrix]:
    """Train the old model; the returned classifier is frozen"""
    logger.info("training old model on %d samples / %d classes", len(old_set), old_set.num_classes)
    model, classifier, log = train_classification(old_set, model_config, train_config, name="old")
    if log_path is not None:
        log.to_jsonl(log_path)
    return model, classifier.frozen()


def train_new_model(split, old_model: EmbeddingModel, old_classifier: Optional[PrototypeMatrix],
                    model_config: ModelConfig, train_config: TrainConfig,
                    refinement: Optional[RefinementConfig] = None) -> Tuple[EmbeddingModel, TrainLog]:
    """Compatible training of the new model on ``split.new_set``"""
    train_config.validate()
    refinement = (refinement or RefinementConfig()).validate()
    spec = train_config.loss_spec
    if spec.kind is LossKind.BCT:
        check_bct_applicable(split, old_classifier)
    compat = build_compat_loss(spec, refinement.variant)
    new_set = split.new_set
    logger.info("training new model on %d samples / %d classes with %s (eta=%g)",
                len(new_set), new_set.num_classes, compat.get_name(), spec.eta)

    model = EmbeddingModel(model_config)
    if model.embed_dim != old_model.embed_dim:
        raise ConfigurationError("model_new.embed_dim", "must equal the old model's embed_dim")
    classifier = PrototypeMatrix.initialize(new_set.class_ids, model.embed_dim, model_config.init_seed)
    trainer = CompatibleTrainer(new_set, model, classifier, train_config, old_model=old_model,
                                old_classifier=old_classifier, compat_loss=compat,
                                refinement=refinement, name="new")
    log = trainer.run()
    return model, log
