"""
Synthetic labelled data and the five old/new training-set allocations.

Samples live on a low-dimensional latent sphere (one centre per class plus
Gaussian noise) and are pushed into input space through a fixed, seeded
"world transform" ``tanh(W z + b)``. Everything is a pure function of the
``DatasetSpec`` and its seed.
"""

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from compatlab.errors import AllocationError, ConfigurationError

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_SEED = 666


class Scenario(str, Enum):
    EXTENDED_DATA = "extended-data"
    OPEN_DATA = "open-data"
    EXTENDED_CLASS = "extended-class"
    OPEN_CLASS = "open-class"
    IDENTICAL_DATA = "identical-data"

    @classmethod
    def parse(cls, value: Union[str, "Scenario"]) -> "Scenario":
        if isinstance(value, Scenario):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for scenario in cls:
            if scenario.value == key or scenario.name.lower().replace("_", "-") == key:
                return scenario
        raise ConfigurationError("scenario", f"unknown scenario {value!r}")

    @property
    def is_class_based(self) -> bool:
        """Old set is drawn by sampling classes rather than rows"""
        return self in (Scenario.EXTENDED_CLASS, Scenario.OPEN_CLASS)

    @property
    def is_open_set(self) -> bool:
        return self in (Scenario.OPEN_DATA, Scenario.EXTENDED_CLASS, Scenario.OPEN_CLASS)

    @property
    def applies_domain_shift(self) -> bool:
        # only the fully disjoint splits have new-only data to shift
        return self in (Scenario.OPEN_DATA, Scenario.OPEN_CLASS)


@dataclass
class DatasetSpec:
    num_classes: int = 50
    samples_per_class: int = 80
    input_dim: int = 64
    latent_dim: int = 16
    intra_class_noise: float = 0.15
    domain_shift: float = 0.2
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if int(self.num_classes) < 2:
            raise ConfigurationError("num_classes", "must be >= 2")
        if int(self.samples_per_class) < 2:
            raise ConfigurationError("samples_per_class", "must be >= 2")
        if int(self.latent_dim) < 1:
            raise ConfigurationError("latent_dim", "must be positive")
        if int(self.input_dim) < int(self.latent_dim):
            raise ConfigurationError("input_dim", "must be >= latent_dim")
        if float(self.intra_class_noise) < 0:
            raise ConfigurationError("intra_class_noise", "must be nonnegative")
        if float(self.domain_shift) < 0:
            raise ConfigurationError("domain_shift", "must be nonnegative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError("seed", "must be a nonnegative 64-bit integer")
        return self


@dataclass
class SyntheticWorld:
    """Class centres and the seeded transform from latent to input space"""

    centers: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    noise: float

    @property
    def latent_dim(self) -> int:
        return self.centers.shape[1]

    def render(self, latents: np.ndarray) -> np.ndarray:
        return np.tanh(latents @ self.weight.T + self.bias)

    def sample_latents(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        jitter = rng.normal(0.0, self.noise, size=(len(labels), self.latent_dim))
        return self.centers[labels] + jitter


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    latents: Optional[np.ndarray] = None
    world: Optional[SyntheticWorld] = field(default=None, repr=False)
    domain_shift: float = 0.0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ConfigurationError("inputs", "must be a 2-D matrix")
        if len(self.labels) != len(self.inputs) or len(self.sample_ids) != len(self.inputs):
            raise ConfigurationError("labels", "labels, sample_ids and inputs must have equal length")
        if len(self.labels) and self.labels.min() < 0:
            raise ConfigurationError("labels", "class ids must be nonnegative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def class_index(self) -> Dict[int, np.ndarray]:
        """Class id -> row indices (ascending)"""
        order = np.argsort(self.labels, kind="stable")
        classes, starts = np.unique(self.labels[order], return_index=True)
        groups = np.split(order, starts[1:])
        return {int(c): rows for c, rows in zip(classes, groups)}

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(
            inputs=self.inputs[rows],
            labels=self.labels[rows],
            sample_ids=self.sample_ids[rows],
            latents=None if self.latents is None else self.latents[rows],
            world=self.world,
            domain_shift=self.domain_shift,
        )

    def equals(self, other: "LabeledDataset") -> bool:
        """Bit-exact comparison of inputs, labels and sample ids"""
        return (
            np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.sample_ids, other.sample_ids)
        )


@dataclass
class DataSplit:
    scenario: Scenario
    old_set: LabeledDataset
    new_set: LabeledDataset
    old_fraction: float = 0.3
    seed: int = DEFAULT_SPLIT_SEED

    @property
    def old_classes(self) -> set:
        return set(self.old_set.class_ids.tolist())

    @property
    def new_classes(self) -> set:
        return set(self.new_set.class_ids.tolist())

    @property
    def all_classes(self) -> np.ndarray:
        return np.union1d(self.old_set.class_ids, self.new_set.class_ids)

    def verify(self) -> "DataSplit":
        """Raise AllocationError unless the scenario's set relations hold"""
        old_ids = set(self.old_set.sample_ids.tolist())
        new_ids = set(self.new_set.sample_ids.tolist())
        old_cls, new_cls = self.old_classes, self.new_classes
        checks = {
            Scenario.EXTENDED_DATA: old_ids < new_ids and old_cls == new_cls,
            Scenario.OPEN_DATA: not (old_ids & new_ids) and old_cls == new_cls,
            Scenario.EXTENDED_CLASS: old_cls < new_cls and old_ids <= new_ids,
            Scenario.OPEN_CLASS: not (old_ids & new_ids) and not (old_cls & new_cls),
            Scenario.IDENTICAL_DATA: self.old_set.equals(self.new_set),
        }
        if not checks[self.scenario]:
            raise AllocationError(f"split violates the {self.scenario.value} allocation")
        return self


@dataclass
class EvalSet:
    query: LabeledDataset
    gallery: LabeledDataset

    def validate(self) -> "EvalSet":
        missing = set(self.query.class_ids.tolist()) - set(self.gallery.class_ids.tolist())
        if missing:
            raise ConfigurationError("gallery", f"no gallery samples for classes {sorted(missing)[:5]}")
        if np.intersect1d(self.query.sample_ids, self.gallery.sample_ids).size:
            raise ConfigurationError("query", "query and gallery share samples")
        return self


def generate_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Draw ``num_classes * samples_per_class`` samples from a seeded world"""
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    centers = rng.normal(size=(spec.num_classes, spec.latent_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    weight = rng.normal(size=(spec.input_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    bias = rng.normal(0.0, 0.1, size=spec.input_dim)
    world = SyntheticWorld(centers=centers, weight=weight, bias=bias, noise=float(spec.intra_class_noise))

    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.samples_per_class)
    latents = world.sample_latents(labels, rng)
    return LabeledDataset(
        inputs=world.render(latents),
        labels=labels,
        sample_ids=np.arange(len(labels), dtype=np.int64),
        latents=latents,
        world=world,
        domain_shift=float(spec.domain_shift),
    )


def _shift_new_rows(data: LabeledDataset, rows: np.ndarray, seed: int) -> LabeledDataset:
    """Re-render new-only rows with a per-class latent offset"""
    subset = data.subset(rows)
    if data.domain_shift <= 0 or data.world is None or data.latents is None:
        return subset
    rng = np.random.default_rng([int(seed), 1])
    directions = rng.normal(size=(int(data.labels.max()) + 1, data.world.latent_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    subset.latents = subset.latents + data.domain_shift * directions[subset.labels]
    subset.inputs = data.world.render(subset.latents)
    return subset


def allocate_split(data: LabeledDataset,
                   scenario: Union[str, Scenario],
                   old_fraction: float = 0.3,
                   seed: int = DEFAULT_SPLIT_SEED) -> DataSplit:
    """Allocate old/new training sets for one of the five scenarios."""
    scenario = Scenario.parse(scenario)
    if not 0.0 < old_fraction < 1.0:
        raise AllocationError(f"old_fraction must lie in (0, 1), got {old_fraction}")
    rng = np.random.default_rng(int(seed))
    index = data.class_index
    class_ids = np.array(sorted(index), dtype=np.int64)

    if scenario.is_class_based:
        n_old = int(round(old_fraction * len(class_ids)))
        if n_old < 1:
            raise AllocationError(f"fraction {old_fraction} keeps no class out of {len(class_ids)}")
        if scenario is Scenario.OPEN_CLASS and n_old >= len(class_ids):
            raise AllocationError("open-class split leaves no class for the new set")
        old_classes = np.sort(rng.permutation(class_ids)[:n_old])
        small = [int(c) for c in old_classes if len(index[int(c)]) < 2]
        if small:
            raise AllocationError(f"classes {small} have fewer than 2 samples")
        old_rows = np.sort(np.concatenate([index[int(c)] for c in old_classes]))
        if scenario is Scenario.EXTENDED_CLASS:
            new_rows = np.arange(len(data))
        else:
            new_rows = np.sort(np.concatenate(
                [index[int(c)] for c in class_ids if c not in set(old_classes.tolist())]))
    else:
        old_parts: List[np.ndarray] = []
        rest_parts: List[np.ndarray] = []
        for c in class_ids:
            rows = index[int(c)]
            k = int(round(old_fraction * len(rows)))
            if k < 2:
                raise AllocationError(
                    f"fraction {old_fraction} keeps {k} of {len(rows)} samples in class {int(c)}")
            if scenario is Scenario.OPEN_DATA and len(rows) - k < 1:
                raise AllocationError(f"class {int(c)} has no samples left for the new set")
            perm = rng.permutation(rows)
            old_parts.append(perm[:k])
            rest_parts.append(perm[k:])
        old_rows = np.sort(np.concatenate(old_parts))
        if scenario is Scenario.EXTENDED_DATA:
            new_rows = np.arange(len(data))
        elif scenario is Scenario.OPEN_DATA:
            new_rows = np.sort(np.concatenate(rest_parts))
        else:
            new_rows = old_rows

    old_set = data.subset(old_rows)
    if scenario.applies_domain_shift:
        new_set = _shift_new_rows(data, new_rows, seed)
    else:
        new_set = data.subset(new_rows)
    split = DataSplit(scenario=scenario, old_set=old_set, new_set=new_set,
                      old_fraction=float(old_fraction), seed=int(seed)).verify()
    logger.debug("allocated %s: old %d rows / %d classes, new %d rows / %d classes",
                 scenario.value, len(old_set), old_set.num_classes, len(new_set), new_set.num_classes)
    return split


def generate_eval_set(data: LabeledDataset,
                      queries_per_class: int = 10,
                      gallery_per_class: int = 10,
                      seed: int = 0) -> EvalSet:
    """Fresh held-out query/gallery samples for every class of ``data``"""
    if data.world is None:
        raise ConfigurationError("data", "evaluation samples need the generating world")
    if queries_per_class < 1 or gallery_per_class < 1:
        raise ConfigurationError("queries_per_class", "query and gallery sizes must be positive")
    rng = np.random.default_rng([int(seed), 2])
    class_ids = data.class_ids
    per_class = queries_per_class + gallery_per_class
    labels = np.repeat(class_ids, per_class)
    latents = data.world.sample_latents(labels, rng)
    inputs = data.world.render(latents)
    ids = int(data.sample_ids.max()) + 1 + np.arange(len(labels), dtype=np.int64)

    is_query = np.tile(np.arange(per_class) < queries_per_class, len(class_ids))
    query = LabeledDataset(inputs[is_query], labels[is_query], ids[is_query],
                           latents=latents[is_query], world=data.world)
    gallery = LabeledDataset(inputs[~is_query], labels[~is_query], ids[~is_query],
                             latents=latents[~is_query], world=data.world)
    return EvalSet(query=query, gallery=gallery).validate()


def describe_split(split: DataSplit) -> dict:
    """Summary counts of a split, in the layout of the allocation table"""
    return {
        'scenario': split.scenario.value,
        'old_images': len(split.old_set),
        'old_classes': split.old_set.num_classes,
        'new_images': len(split.new_set),
        'new_classes': split.new_set.num_classes,
        'shared_classes': len(split.old_classes & split.new_classes),
    }


def get_all_scenarios() -> dict:
    """Returns all allocation scenarios with metadata"""
    return {
        Scenario.EXTENDED_DATA: {
            'description': 'old: fraction of rows; new: all rows',
            'category': 'close-set',
        },
        Scenario.OPEN_DATA: {
            'description': 'old and new rows disjoint, same classes',
            'category': 'open-set',
        },
        Scenario.EXTENDED_CLASS: {
            'description': 'old: fraction of classes; new: all classes',
            'category': 'open-set',
        },
        Scenario.OPEN_CLASS: {
            'description': 'old and new classes disjoint',
            'category': 'open-set',
        },
        Scenario.IDENTICAL_DATA: {
            'description': 'old and new sets identical',
            'category': 'close-set',
        },
    }


def save_dataset(directory: Union[str, Path], data: LabeledDataset) -> Path:
    """Write inputs.csv, labels.csv and sample_ids.csv into ``directory``"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "inputs.csv", data.inputs, fmt="%.17g", delimiter=",")
    np.savetxt(directory / "labels.csv", data.labels, fmt="%d")
    np.savetxt(directory / "sample_ids.csv", data.sample_ids, fmt="%d")
    return directory


def load_dataset(directory: Union[str, Path]) -> LabeledDataset:
    directory = Path(directory)
    inputs = np.loadtxt(directory / "inputs.csv", delimiter=",", ndmin=2, dtype=np.float64)
    labels = np.loadtxt(directory / "labels.csv", ndmin=1, dtype=np.int64)
    ids_path = directory / "sample_ids.csv"
    if ids_path.exists():
        sample_ids = np.loadtxt(ids_path, ndmin=1, dtype=np.int64)
    else:
        warnings.warn(f"{ids_path} missing; numbering samples by row", RuntimeWarning)
        sample_ids = np.arange(len(labels), dtype=np.int64)
    return LabeledDataset(inputs=inputs, labels=labels, sample_ids=sample_ids)
