"""
Pseudo old-classifier construction.

For every class the old model's features of the new training set are
averaged into a prototype. The refined variant first smooths those features
over a fully connected class graph whose edge weights come from the
*current* new model, then averages.
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, NamedTuple, Optional, Union

import numpy as np
import scipy.linalg

from compatlab.embedding_model import EmbeddingModel, PrototypeMatrix, normalize_rows
from compatlab.errors import (ConfigurationError, DegeneratePrototypeError, LossUndefinedError,
                              NumericalFailureError, ShapeError, SingletonClassError)

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-8
MAX_CONDITION = 1e12


class PrototypeVariant(str, Enum):
    VANILLA = "vanilla"
    DROP = "drop"
    REFINED = "refined"

    @classmethod
    def parse(cls, value: Union[str, "PrototypeVariant"]) -> "PrototypeVariant":
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError("refinement.variant",
                                     f"unknown variant {value!r}, expected one of {[v.value for v in cls]}")


class PropagationMode(str, Enum):
    CLOSED_FORM = "closed-form"
    ITERATIVE = "iterative"


@dataclass
class RefinementConfig:
    temperature: float = 0.05
    aggregation: float = 0.9
    mode: PropagationMode = PropagationMode.CLOSED_FORM
    iterations: int = 50
    per_class_cap: int = 64
    variant: PrototypeVariant = PrototypeVariant.REFINED
    drop_fraction: float = 0.1
    seed: int = 666

    def validate(self) -> "RefinementConfig":
        self.variant = PrototypeVariant.parse(self.variant)
        try:
            self.mode = PropagationMode(self.mode)
        except ValueError:
            raise ConfigurationError("refinement.mode", f"unknown mode {self.mode!r}")
        if not self.temperature > 0:
            raise ConfigurationError("refinement.temperature", "must be positive")
        if not 0.0 <= self.aggregation < 1.0:
            raise ConfigurationError("refinement.aggregation", "must lie in [0, 1)")
        if int(self.iterations) < 0:
            raise ConfigurationError("refinement.iterations", "must be >= 0")
        if int(self.per_class_cap) < 1:
            raise ConfigurationError("refinement.per_class_cap", "must be positive")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ConfigurationError("refinement.drop_fraction", "must lie in [0, 1)")
        if int(self.seed) < 0:
            raise ConfigurationError("refinement.seed", "must be nonnegative")
        return self


@dataclass
class ClassGraph:
    old_vertices: np.ndarray
    new_vertices: np.ndarray
    edges: np.ndarray
    temperature: float
    aggregation: float

    @classmethod
    def build(cls, old_vertices: np.ndarray, new_vertices: np.ndarray,
              temperature: float, aggregation: float) -> "ClassGraph":
        old_vertices = np.atleast_2d(np.asarray(old_vertices, dtype=np.float64))
        new_vertices = np.atleast_2d(np.asarray(new_vertices, dtype=np.float64))
        if len(old_vertices) == 1:
            edges = np.zeros((1, 1))
        else:
            edges = build_edges(new_vertices, temperature)
        return cls(old_vertices, new_vertices, edges, float(temperature), float(aggregation)).validate()

    @property
    def size(self) -> int:
        return len(self.old_vertices)

    def validate(self) -> "ClassGraph":
        m = self.size
        if len(self.new_vertices) != m or self.edges.shape != (m, m):
            raise ShapeError(f"graph of {m} vertices has {len(self.new_vertices)} new vertices "
                             f"and edges {self.edges.shape}")
        if not 0.0 <= self.aggregation < 1.0:
            raise ConfigurationError("aggregation", "must lie in [0, 1)")
        if np.any(np.diag(self.edges) != 0.0) or np.any(self.edges < 0.0):
            raise ShapeError("edge matrix must be nonnegative with a zero diagonal")
        if m >= 2 and not np.allclose(self.edges.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise ShapeError("edge matrix rows must sum to 1")
        return self


class ClassFeatures(NamedTuple):
    old: np.ndarray
    new: np.ndarray


class RefinedClass(NamedTuple):
    prototype: np.ndarray
    vanilla: np.ndarray
    edges: Optional[np.ndarray]
    refined: Optional[np.ndarray]
    degraded: bool
    size: int = 1


def cap_class_rows(rows: np.ndarray, cap: Optional[int], seed: int, class_id: int) -> np.ndarray:
    """Seeded subsample of at most ``cap`` rows, kept in ascending order"""
    if cap is None or len(rows) <= cap:
        return rows
    rng = np.random.default_rng([int(seed), int(class_id)])
    return np.sort(rng.choice(rows, size=int(cap), replace=False))


def extract_class_features(old_model: EmbeddingModel,
                           new_model: EmbeddingModel,
                           dataset,
                           per_class_cap: Optional[int] = 64,
                           seed: int = 666,
                           expected_classes: Optional[Iterable[int]] = None) -> Dict[int, ClassFeatures]:
    """Old/new features of ``dataset`` grouped by class, capped per class."""
    old_features = old_model.forward(dataset.inputs)
    new_features = new_model.forward(dataset.inputs)
    groups: Dict[int, ClassFeatures] = {}
    for class_id, rows in dataset.class_index.items():
        rows = cap_class_rows(rows, per_class_cap, seed, class_id)
        groups[class_id] = ClassFeatures(old_features[rows], new_features[rows])

    if expected_classes is not None:
        empty = sorted(set(int(c) for c in expected_classes) - set(groups))
        if empty:
            message = f"classes {empty[:10]} have no samples and get no prototype"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning)
    return groups


def build_edges(new_vertices: np.ndarray, temperature: float) -> np.ndarray:
    """Row softmax of pairwise similarities / temperature with an empty diagonal."""
    v = np.atleast_2d(np.asarray(new_vertices, dtype=np.float64))
    m = len(v)
    if m < 2:
        raise SingletonClassError(f"a class graph needs at least 2 vertices, got {m}")
    logits = (v @ v.T) / float(temperature)
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def propagate_iterative(graph: ClassGraph, steps: int) -> np.ndarray:
    if steps < 0:
        raise ConfigurationError("iterations", "must be >= 0")
    lam = graph.aggregation
    base = graph.old_vertices
    refined = base.copy()
    for _ in range(steps):
        refined = lam * (graph.edges @ refined) + (1.0 - lam) * base
    return refined


def propagate_closed_form(graph: ClassGraph) -> np.ndarray:
    """Fixed point of the iterative update, via a linear solve"""
    lam = graph.aggregation
    if lam == 0.0:
        return graph.old_vertices.copy()
    system = np.eye(graph.size) - lam * graph.edges
    condition = float(np.linalg.cond(system))
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise NumericalFailureError(f"propagation system is ill-conditioned (cond={condition:.3g})",
                                    condition=condition)
    try:
        return scipy.linalg.solve(system, (1.0 - lam) * graph.old_vertices)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailureError(f"propagation solve failed: {exc}", condition=condition) from exc


def pool_prototype(vertices: np.ndarray,
                   variant: PrototypeVariant = PrototypeVariant.VANILLA,
                   drop_fraction: float = 0.1) -> np.ndarray:
    """Average the rows into one unit-norm prototype."""
    vertices = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    if vertices.shape[0] == 0:
        raise ShapeError("cannot pool an empty vertex set")
    mean = vertices.mean(axis=0)

    if PrototypeVariant(variant) is PrototypeVariant.DROP:
        m = len(vertices)
        n_drop = math.ceil(drop_fraction * m)
        if n_drop >= m:
            message = f"drop-avg would remove all {m} rows, using the full mean"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning)
        elif n_drop > 0:
            direction = mean / max(np.linalg.norm(mean), DEGENERATE_NORM)
            similarity = normalize_rows(vertices) @ direction
            order = np.argsort(similarity, kind="stable")
            kept = np.sort(order[n_drop:])
            mean = vertices[kept].mean(axis=0)

    norm = float(np.linalg.norm(mean))
    if norm < DEGENERATE_NORM:
        raise DegeneratePrototypeError(f"pooled prototype norm {norm:.3g} is below {DEGENERATE_NORM}")
    return mean / norm


def refine_class_prototype(old_vertices: np.ndarray,
                           new_vertices: np.ndarray,
                           config: RefinementConfig,
                           variant: Optional[PrototypeVariant] = None,
                           class_id: Optional[int] = None) -> RefinedClass:
    """Prototype of a single class under the configured variant"""
    variant = PrototypeVariant.parse(variant or config.variant)
    old_vertices = np.atleast_2d(np.asarray(old_vertices, dtype=np.float64))
    vanilla = pool_prototype(old_vertices, PrototypeVariant.VANILLA)
    if len(old_vertices) == 1:
        return RefinedClass(vanilla, vanilla, None, None, False, 1)

    m = len(old_vertices)
    if variant is PrototypeVariant.VANILLA:
        return RefinedClass(vanilla, vanilla, None, None, False, m)
    if variant is PrototypeVariant.DROP:
        dropped = pool_prototype(old_vertices, PrototypeVariant.DROP, config.drop_fraction)
        return RefinedClass(dropped, vanilla, None, None, False, m)

    try:
        graph = ClassGraph.build(old_vertices, new_vertices, config.temperature, config.aggregation)
        if PropagationMode(config.mode) is PropagationMode.ITERATIVE:
            refined = propagate_iterative(graph, int(config.iterations))
        else:
            refined = propagate_closed_form(graph)
        prototype = pool_prototype(refined, PrototypeVariant.VANILLA)
    except (NumericalFailureError, SingletonClassError, DegeneratePrototypeError, ShapeError) as exc:
        message = f"refinement of class {class_id} failed ({exc}), using the vanilla average"
        logger.warning(message)
        warnings.warn(message, RuntimeWarning)
        return RefinedClass(vanilla, vanilla, None, None, True, m)
    logger.debug("class %s: %d vertices, cos(vanilla, refined)=%.4f",
                 class_id, graph.size, float(vanilla @ prototype))
    return RefinedClass(prototype, vanilla, graph.edges, refined, False, m)


def refine_all(features: Dict[int, ClassFeatures],
               config: RefinementConfig,
               variant: Optional[PrototypeVariant] = None) -> Dict[int, RefinedClass]:
    """Per-class refinement, merged in ascending class order"""
    return {
        class_id: refine_class_prototype(features[class_id].old, features[class_id].new,
                                         config, variant, class_id)
        for class_id in sorted(features)
    }


def build_pseudo_classifier(old_model: EmbeddingModel,
                            new_model: EmbeddingModel,
                            dataset,
                            config: Optional[RefinementConfig] = None,
                            variant: Optional[PrototypeVariant] = None,
                            expected_classes: Optional[Iterable[int]] = None) -> PrototypeMatrix:
    """Frozen prototype matrix built from old-model features of ``dataset``.

    Classes in ``expected_classes`` without samples get no row and are reported.
    """
    config = (config or RefinementConfig()).validate()
    if dataset.num_classes < 2:
        raise LossUndefinedError("a pseudo classifier needs at least two classes")
    features = extract_class_features(old_model, new_model, dataset,
                                      config.per_class_cap, config.seed, expected_classes)
    results = refine_all(features, config, variant)
    degraded = sum(r.degraded for r in results.values())
    if degraded:
        logger.warning("%d of %d classes fell back to vanilla prototypes", degraded, len(results))
    class_ids = np.array(sorted(results), dtype=np.int64)
    rows = np.stack([results[c].prototype for c in class_ids])
    return PrototypeMatrix(rows, class_ids, trainable=False)


def dump_refinement(path: Union[str, Path], results: Dict[int, RefinedClass]) -> Path:
    """Write edges, refined vertices and prototypes to ``path`` (.npz) plus a CSV summary"""
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for class_id, result in sorted(results.items()):
        arrays[f"prototype_{class_id}"] = result.prototype
        arrays[f"vanilla_{class_id}"] = result.vanilla
        if result.edges is not None:
            arrays[f"edges_{class_id}"] = result.edges
            arrays[f"refined_{class_id}"] = result.refined
    np.savez(path, **arrays)

    summary = path.with_suffix(".csv")
    with open(summary, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id", "vertices", "cos_vanilla_refined", "degraded"])
        for class_id, result in sorted(results.items()):
            writer.writerow([class_id, result.size, f"{float(result.vanilla @ result.prototype):.6f}",
                             int(result.degraded)])
    logger.info("refinement dump written to %s and %s", path, summary)
    return path
