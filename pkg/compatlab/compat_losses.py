"""
Compatibility objectives between a new model and a frozen old model.

Every loss returns ``(loss, grad_new_features)``; nothing here produces a
gradient for the old model or for a prototype matrix.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Union

import numpy as np

from compatlab.embedding_model import ArcFaceParams, PrototypeMatrix, arcface_loss
from compatlab.errors import (BatchCompositionError, ConfigurationError, FrozenStateError,
                              InapplicableLossError, ShapeError)
from compatlab.prototype_engine import PrototypeVariant

logger = logging.getLogger(__name__)


class LossKind(str, Enum):
    UNIBCT = "unibct"
    UNIBCT_VANILLA = "unibct-vanilla"
    BCT = "bct"
    REGRESS = "regress"
    CONTRASTIVE = "contrastive"

    @classmethod
    def parse(cls, value: Union[str, "LossKind"]) -> "LossKind":
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError("loss.kind",
                                     f"unknown loss {value!r}, expected one of {[k.value for k in cls]}")


@dataclass
class CompatLossSpec:
    kind: LossKind = LossKind.UNIBCT
    eta: float = 1.0
    contrastive_temperature: float = 0.05
    arcface: ArcFaceParams = field(default_factory=ArcFaceParams)

    def validate(self) -> "CompatLossSpec":
        self.kind = LossKind.parse(self.kind)
        if not self.eta >= 0:
            raise ConfigurationError("loss.eta", "must be nonnegative")
        if not self.contrastive_temperature > 0:
            raise ConfigurationError("loss.contrastive_temperature", "must be positive")
        self.arcface.validate()
        return self


class LossOutput(NamedTuple):
    loss: float
    grad_features: np.ndarray


def unibct_loss(new_features: np.ndarray,
                labels: np.ndarray,
                pseudo_prototypes: PrototypeMatrix,
                params: Optional[ArcFaceParams] = None) -> LossOutput:
    """ArcFace of new features against frozen pseudo old prototypes"""
    if pseudo_prototypes.trainable:
        raise FrozenStateError("compatibility prototypes must be frozen (trainable=False)")
    result = arcface_loss(new_features, labels, pseudo_prototypes, params)
    return LossOutput(result.loss, result.grad_features)


def bct_loss(new_features: np.ndarray,
             labels: np.ndarray,
             old_classifier: PrototypeMatrix,
             params: Optional[ArcFaceParams] = None) -> LossOutput:
    """ArcFace against the trained old classifier; close-set splits only"""
    if not old_classifier.covers(labels):
        missing = sorted(set(np.asarray(labels).tolist()) - set(old_classifier.class_ids.tolist()))
        raise InapplicableLossError(f"old classifier has no row for classes {missing[:10]}; "
                                    "BCT needs a close-set split")
    frozen = old_classifier if not old_classifier.trainable else old_classifier.frozen()
    return unibct_loss(new_features, labels, frozen, params)


def regress_loss(new_features: np.ndarray, old_features: np.ndarray) -> LossOutput:
    """Mean squared Euclidean distance between paired new and old features"""
    if new_features.shape != old_features.shape:
        raise ShapeError(f"new features {new_features.shape} vs old {old_features.shape}")
    diff = new_features - old_features
    batch = len(diff)
    loss = float(np.sum(diff * diff) / batch)
    return LossOutput(loss, 2.0 * diff / batch)


def contrastive_loss(new_features: np.ndarray,
                     old_features: np.ndarray,
                     labels: np.ndarray,
                     temperature: float = 0.05) -> LossOutput:
    """
    InfoNCE between each new feature and the old feature of the same sample.

    Negatives for anchor i are the old features of batch samples whose class
    differs from i's; same-class samples other than i are left out.
    """
    if new_features.shape != old_features.shape:
        raise ShapeError(f"new features {new_features.shape} vs old {old_features.shape}")
    labels = np.asarray(labels)
    batch = len(labels)
    if batch < 2 or len(np.unique(labels)) < 2:
        raise BatchCompositionError("contrastive loss needs a batch with at least two classes")

    scores = (new_features @ old_features.T) / temperature
    allowed = (labels[:, None] != labels[None, :]) | np.eye(batch, dtype=bool)
    masked = np.where(allowed, scores, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    exp = np.exp(masked - top)
    total = exp.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(total[:, 0])
    loss = float(np.mean(lse - np.diag(scores)))

    g_scores = exp / total
    g_scores[np.diag_indices(batch)] -= 1.0
    g_scores /= batch
    return LossOutput(loss, (g_scores @ old_features) / temperature)


class CompatibilityLoss(ABC):
    """A compatibility term plugged into new-model training"""

    requires_prototypes = False
    requires_old_features = False
    uses_old_classifier = False

    def __init__(self, spec: CompatLossSpec):
        self.spec = spec

    @property
    def prototype_variant(self) -> Optional[PrototypeVariant]:
        return None

    @abstractmethod
    def compute(self, new_features: np.ndarray, labels: np.ndarray,
                old_features: Optional[np.ndarray] = None,
                prototypes: Optional[PrototypeMatrix] = None) -> LossOutput:
        pass

    @abstractmethod
    def get_name(self) -> str:
        pass


class UniBCTLoss(CompatibilityLoss):
    requires_prototypes = True

    def __init__(self, spec: CompatLossSpec, variant: PrototypeVariant = PrototypeVariant.REFINED):
        super().__init__(spec)
        self.variant = PrototypeVariant.parse(variant)

    @property
    def prototype_variant(self) -> Optional[PrototypeVariant]:
        return self.variant

    def compute(self, new_features, labels, old_features=None, prototypes=None) -> LossOutput:
        if prototypes is None:
            raise ConfigurationError("prototypes", f"{self.get_name()} needs pseudo prototypes")
        return unibct_loss(new_features, labels, prototypes, self.spec.arcface)

    def get_name(self) -> str:
        return f"UniBCT[{self.variant.value}]"


class VanillaUniBCTLoss(UniBCTLoss):
    def __init__(self, spec: CompatLossSpec):
        super().__init__(spec, PrototypeVariant.VANILLA)

    def get_name(self) -> str:
        return "UniBCT*"


class BCTLoss(CompatibilityLoss):
    uses_old_classifier = True

    def compute(self, new_features, labels, old_features=None, prototypes=None) -> LossOutput:
        if prototypes is None:
            raise ConfigurationError("prototypes", "BCT needs the old classifier")
        return bct_loss(new_features, labels, prototypes, self.spec.arcface)

    def get_name(self) -> str:
        return "BCT"


class RegressionLoss(CompatibilityLoss):
    requires_old_features = True

    def compute(self, new_features, labels, old_features=None, prototypes=None) -> LossOutput:
        return regress_loss(new_features, old_features)

    def get_name(self) -> str:
        return "L2-regression"


class ContrastiveLoss(CompatibilityLoss):
    requires_old_features = True

    def compute(self, new_features, labels, old_features=None, prototypes=None) -> LossOutput:
        return contrastive_loss(new_features, old_features, labels, self.spec.contrastive_temperature)

    def get_name(self) -> str:
        return "Contrastive"


def build_compat_loss(spec: CompatLossSpec,
                      variant: PrototypeVariant = PrototypeVariant.REFINED) -> CompatibilityLoss:
    spec.validate()
    if spec.kind is LossKind.UNIBCT:
        return UniBCTLoss(spec, variant)
    if spec.kind is LossKind.UNIBCT_VANILLA:
        return VanillaUniBCTLoss(spec)
    if spec.kind is LossKind.BCT:
        return BCTLoss(spec)
    if spec.kind is LossKind.REGRESS:
        return RegressionLoss(spec)
    return ContrastiveLoss(spec)


def check_bct_applicable(split, old_classifier: Optional[PrototypeMatrix] = None):
    """Raise InapplicableLossError unless BCT can run on ``split``"""
    if split.scenario.is_open_set:
        raise InapplicableLossError(f"BCT is inapplicable to the open-set {split.scenario.value} split")
    if old_classifier is not None and not old_classifier.covers(split.new_set.labels):
        raise InapplicableLossError("old classifier does not cover every new-set class")
