"""
Cross-test and self-test metrics.

Verification: TAR at fixed FARs over all query x gallery pairs.
Identification: top-k retrieval accuracy of queries against the gallery.
A new model is compatible when its cross-test beats the old self-test.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from compatlab.embedding_model import EmbeddingModel, normalize_rows
from compatlab.errors import ConfigurationError, IncompatibleArchitectureError, ShapeError
from compatlab.synthetic_data import EvalSet

logger = logging.getLogger(__name__)

MODES = ("cross", "self_old", "self_new")

__all__ = [
    "EvalConfig", "EvalSet", "TARResult", "ModeMetrics", "CompatReport", "pairwise_scores",
    "tar_at_far", "topk_identification", "evaluate_mode", "evaluate_pair", "score_histograms",
]


@dataclass
class EvalConfig:
    far_list: List[float] = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])
    k_list: List[int] = field(default_factory=lambda: [1, 5])
    reference_far: float = 1e-3
    queries_per_class: int = 10
    gallery_per_class: int = 10
    histogram_bins: int = 50
    seed: int = 0

    def validate(self) -> "EvalConfig":
        if not self.far_list or any(not 0 < f <= 1 for f in self.far_list):
            raise ConfigurationError("eval.far_list", "every FAR must lie in (0, 1]")
        if self.reference_far not in self.far_list:
            raise ConfigurationError("eval.reference_far", "must be one of eval.far_list")
        if 1 not in self.k_list or any(int(k) < 1 for k in self.k_list):
            raise ConfigurationError("eval.k_list", "must contain 1 and only positive values")
        if int(self.queries_per_class) < 1 or int(self.gallery_per_class) < 1:
            raise ConfigurationError("eval.queries_per_class", "query/gallery sizes must be positive")
        if int(self.histogram_bins) < 0:
            raise ConfigurationError("eval.histogram_bins", "must be >= 0")
        if int(self.seed) < 0:
            raise ConfigurationError("eval.seed", "must be nonnegative")
        return self


class TARResult(NamedTuple):
    tar: float
    threshold: float
    achieved_far: float
    clamped: bool


def pairwise_scores(query_features: np.ndarray, gallery_features: np.ndarray) -> np.ndarray:
    """Q x G cosine similarities (rows are renormalised first)"""
    query_features = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    gallery_features = np.atleast_2d(np.asarray(gallery_features, dtype=np.float64))
    if query_features.shape[1] != gallery_features.shape[1]:
        raise ShapeError(f"query dim {query_features.shape[1]} != gallery dim {gallery_features.shape[1]}")
    return normalize_rows(query_features) @ normalize_rows(gallery_features).T


def tar_at_far(genuine_scores: Sequence[float], impostor_scores: Sequence[float], far: float) -> TARResult:
    """
    True accept rate at the smallest threshold t whose false accept rate
    (#impostors >= t) / #impostors does not exceed ``far``.

    A pair is accepted when its score is >= t. FARs below 1/#impostors
    cannot be resolved; they are clamped to the threshold for
    far = 1/#impostors and flagged.
    """
    genuine = np.asarray(genuine_scores, dtype=np.float64).ravel()
    impostor = np.sort(np.asarray(impostor_scores, dtype=np.float64).ravel())
    if genuine.size == 0 or impostor.size == 0:
        raise ShapeError("genuine and impostor score lists must be nonempty")
    if not 0 < far <= 1:
        raise ConfigurationError("far", "must lie in (0, 1]")
    n_imp = impostor.size

    clamped = far < 1.0 / n_imp
    if clamped:
        logger.warning("FAR %g is below 1/%d impostor pairs, clamped", far, n_imp)
        warnings.warn(f"FAR {far:g} clamped to 1/{n_imp}", RuntimeWarning)
        far = 1.0 / n_imp

    candidates = np.unique(np.concatenate([genuine, impostor, [np.nextafter(impostor[-1], np.inf)]]))
    false_accepts = n_imp - np.searchsorted(impostor, candidates, side="left")
    # FAR is non-increasing in the threshold, so the admissible set is a suffix
    admissible = false_accepts / n_imp <= far
    threshold = float(candidates[np.argmax(admissible)])
    achieved = float((n_imp - np.searchsorted(impostor, threshold, side="left")) / n_imp)
    tar = float(np.count_nonzero(genuine >= threshold) / genuine.size)
    return TARResult(tar, threshold, achieved, clamped)


def topk_identification(scores: np.ndarray,
                        query_labels: np.ndarray,
                        gallery_labels: np.ndarray,
                        k_list: Sequence[int] = (1, 5)) -> Dict[int, float]:
    """Fraction of queries with a same-class gallery sample among the k best scores.

    Equal scores rank the lower gallery index first.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    if scores.shape != (len(query_labels), len(gallery_labels)):
        raise ShapeError(f"scores {scores.shape} do not match {len(query_labels)} queries "
                         f"x {len(gallery_labels)} gallery samples")
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = gallery_labels[order] == query_labels[:, None]
    gallery_size = len(gallery_labels)
    accuracy = {}
    for k in k_list:
        if int(k) < 1:
            raise ConfigurationError("k_list", "k must be positive")
        depth = min(int(k), gallery_size)
        if depth < k:
            logger.debug("top-%d clamped to gallery size %d", k, gallery_size)
        accuracy[int(k)] = float(np.mean(hits[:, :depth].any(axis=1)))
    return accuracy


def score_histograms(scores: np.ndarray, same_class: np.ndarray, bins: int = 50) -> Dict[str, list]:
    """Genuine / impostor score histograms over [-1, 1] (plot data only)"""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    clipped = np.clip(scores, -1.0, 1.0)
    genuine, _ = np.histogram(clipped[same_class], bins=edges)
    impostor, _ = np.histogram(clipped[~same_class], bins=edges)
    return {"edges": edges.tolist(), "genuine": genuine.tolist(), "impostor": impostor.tolist()}


@dataclass
class ModeMetrics:
    tar_at_far: Dict[float, float]
    thresholds: Dict[float, float]
    clamped: Dict[float, bool]
    topk: Dict[int, float]
    histogram: Optional[Dict[str, list]] = field(default=None, repr=False)

    @property
    def top1(self) -> float:
        return self.topk[1]

    @property
    def top5(self) -> Optional[float]:
        return self.topk.get(5)

    def to_dict(self) -> dict:
        return {
            "tar_at_far": {f"{far:g}": tar for far, tar in sorted(self.tar_at_far.items())},
            "threshold": {f"{far:g}": t for far, t in sorted(self.thresholds.items())},
            "clamped": {f"{far:g}": c for far, c in sorted(self.clamped.items())},
            "topk": {str(k): acc for k, acc in sorted(self.topk.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModeMetrics":
        return cls(
            tar_at_far={float(k): float(v) for k, v in data["tar_at_far"].items()},
            thresholds={float(k): float(v) for k, v in data.get("threshold", {}).items()},
            clamped={float(k): bool(v) for k, v in data.get("clamped", {}).items()},
            topk={int(k): float(v) for k, v in data["topk"].items()},
        )


def evaluate_mode(query_features: np.ndarray, gallery_features: np.ndarray,
                  query_labels: np.ndarray, gallery_labels: np.ndarray,
                  config: Optional[EvalConfig] = None) -> ModeMetrics:
    config = config or EvalConfig()
    scores = pairwise_scores(query_features, gallery_features)
    same = np.asarray(query_labels)[:, None] == np.asarray(gallery_labels)[None, :]
    genuine, impostor = scores[same], scores[~same]
    tars, thresholds, clamped = {}, {}, {}
    for far in config.far_list:
        result = tar_at_far(genuine, impostor, far)
        tars[far], thresholds[far], clamped[far] = result.tar, result.threshold, result.clamped
    topk = topk_identification(scores, query_labels, gallery_labels, config.k_list)
    histogram = score_histograms(scores, same, config.histogram_bins) if config.histogram_bins else None
    return ModeMetrics(tars, thresholds, clamped, topk, histogram)


@dataclass
class CompatReport:
    modes: Dict[str, ModeMetrics]
    reference_far: float
    verification_compatible: bool
    identification_compatible: bool
    metadata: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_modes(cls, modes: Dict[str, ModeMetrics], reference_far: float,
                   metadata: Optional[dict] = None) -> "CompatReport":
        cross, self_old = modes["cross"], modes["self_old"]
        return cls(
            modes=modes,
            reference_far=reference_far,
            verification_compatible=cross.tar_at_far[reference_far] > self_old.tar_at_far[reference_far],
            identification_compatible=cross.top1 > self_old.top1,
            metadata=dict(metadata or {}),
        )

    @property
    def cross(self) -> ModeMetrics:
        return self.modes["cross"]

    @property
    def self_old(self) -> ModeMetrics:
        return self.modes["self_old"]

    @property
    def self_new(self) -> ModeMetrics:
        return self.modes["self_new"]

    def verdicts_consistent(self) -> bool:
        """Verdicts agree with the strict comparisons of the report's own numbers"""
        recomputed = CompatReport.from_modes(self.modes, self.reference_far)
        return (recomputed.verification_compatible == self.verification_compatible
                and recomputed.identification_compatible == self.identification_compatible)

    def to_dict(self) -> dict:
        return {
            "metadata": dict(sorted(self.metadata.items())),
            "modes": {mode: self.modes[mode].to_dict() for mode in MODES if mode in self.modes},
            "reference_far": self.reference_far,
            "verdicts": {
                "identification_compatible": self.identification_compatible,
                "verification_compatible": self.verification_compatible,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CompatReport":
        verdicts = data["verdicts"]
        return cls(
            modes={mode: ModeMetrics.from_dict(m) for mode, m in data["modes"].items()},
            reference_far=float(data["reference_far"]),
            verification_compatible=bool(verdicts["verification_compatible"]),
            identification_compatible=bool(verdicts["identification_compatible"]),
            metadata=dict(data.get("metadata", {})),
        )


def evaluate_pair(old_model: EmbeddingModel, new_model: EmbeddingModel, eval_set: EvalSet,
                  config: Optional[EvalConfig] = None, metadata: Optional[dict] = None) -> CompatReport:
    """Cross test (new queries vs old gallery) plus both self tests"""
    config = (config or EvalConfig()).validate()
    if old_model.embed_dim != new_model.embed_dim:
        raise IncompatibleArchitectureError(
            f"old embed_dim {old_model.embed_dim} != new embed_dim {new_model.embed_dim}")
    query, gallery = eval_set.query, eval_set.gallery
    old_q, old_g = old_model.forward(query.inputs), old_model.forward(gallery.inputs)
    new_q, new_g = new_model.forward(query.inputs), new_model.forward(gallery.inputs)
    pairs = {"cross": (new_q, old_g), "self_old": (old_q, old_g), "self_new": (new_q, new_g)}
    modes = {
        mode: evaluate_mode(q, g, query.labels, gallery.labels, config)
        for mode, (q, g) in pairs.items()
    }
    report = CompatReport.from_modes(modes, config.reference_far, metadata)
    ref = config.reference_far
    logger.info("cross TAR@%g=%.4f top1=%.4f | self_old TAR=%.4f top1=%.4f | self_new TAR=%.4f top1=%.4f",
                ref, report.cross.tar_at_far[ref], report.cross.top1,
                report.self_old.tar_at_far[ref], report.self_old.top1,
                report.self_new.tar_at_far[ref], report.self_new.top1)
    return report
