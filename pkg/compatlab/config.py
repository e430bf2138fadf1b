"""
Experiment configuration: typed sections, YAML files and shipped presets.

Resolution order is defaults < preset < config file < command-line flags.
"""

import copy
import logging
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import yaml

from compatlab.compat_losses import CompatLossSpec, LossKind
from compatlab.embedding_model import ArcFaceParams, ModelConfig
from compatlab.errors import ConfigurationError
from compatlab.evaluation import EvalConfig
from compatlab.prototype_engine import PrototypeVariant, RefinementConfig
from compatlab.synthetic_data import DEFAULT_SPLIT_SEED, DatasetSpec, Scenario
from compatlab.trainer import TrainConfig

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"
OUTPUT_ROOT_ENV = "COMPATLAB_OUTPUT_ROOT"

TOP_LEVEL_KEYS = ("name", "seed", "dataset", "split", "model_old", "model_new", "train",
                  "refinement", "loss", "eval", "output_dir", "dump_features")

# s=64, m=0.5 stalls the small desk MLPs at lr 0.05; presets/paper.yaml restores it
DESK_ARCFACE = {"scale": 16.0, "margin": 0.2}


def desk_train_config() -> TrainConfig:
    return TrainConfig(arcface=ArcFaceParams(**DESK_ARCFACE),
                       loss_spec=CompatLossSpec(arcface=ArcFaceParams(**DESK_ARCFACE)))


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _section(cls, name: str, data: Optional[dict], skip: Tuple[str, ...] = ()):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys"""
    data = dict(data or {})
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{name}.{unknown[0]}", "unknown key")
    return cls(**data)


def deep_merge(base: dict, override: Optional[dict]) -> dict:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    scenario: Scenario = Scenario.EXTENDED_DATA
    old_fraction: float = 0.3
    split_seed: int = DEFAULT_SPLIT_SEED
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model_old: ModelConfig = field(default_factory=lambda: ModelConfig(hidden_dims=[32], init_seed=0))
    model_new: ModelConfig = field(default_factory=lambda: ModelConfig(hidden_dims=[64, 64], init_seed=1))
    train: TrainConfig = field(default_factory=desk_train_config)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/experiment"
    dump_features: bool = False

    @property
    def loss(self) -> CompatLossSpec:
        return self.train.loss_spec

    def validate(self) -> "ExperimentConfig":
        self.scenario = Scenario.parse(self.scenario)
        self.dataset.validate()
        if not 0.0 < self.old_fraction < 1.0:
            raise ConfigurationError("split.old_fraction", "must lie in (0, 1)")
        if int(self.split_seed) < 0:
            raise ConfigurationError("split.seed", "must be nonnegative")
        for section, model in (("model_old", self.model_old), ("model_new", self.model_new)):
            try:
                model.validate()
            except ConfigurationError as exc:
                raise ConfigurationError(f"{section}.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
            if model.input_dim != self.dataset.input_dim:
                raise ConfigurationError(f"{section}.input_dim", "must equal dataset.input_dim")
        if self.model_old.embed_dim != self.model_new.embed_dim:
            raise ConfigurationError("model_new.embed_dim", "must equal model_old.embed_dim for cross tests")
        self.train.validate()
        self.refinement.validate()
        self.eval.validate()
        if self.loss.kind is LossKind.BCT and self.scenario.is_open_set:
            raise ConfigurationError("loss.kind",
                                     f"bct is inapplicable to the open-set {self.scenario.value} scenario")
        return self

    @property
    def variant_label(self) -> str:
        if self.loss.kind is LossKind.UNIBCT:
            return self.refinement.variant.value
        if self.loss.kind is LossKind.UNIBCT_VANILLA:
            return PrototypeVariant.VANILLA.value
        return "none"

    @property
    def run_label(self) -> str:
        return f"{self.scenario.value}/{self.loss.kind.value}-{self.variant_label}/seed-{self.seed}"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed except the split seed derived from ``seed``"""
        cfg = copy.deepcopy(self)
        cfg.seed = int(seed)
        cfg.dataset.seed = int(seed)
        cfg.train.seed = int(seed)
        cfg.eval.seed = int(seed)
        cfg.model_old.init_seed = int(seed)
        cfg.model_new.init_seed = int(seed) + 1
        return cfg

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "scenario": self.scenario.value,
            "loss": self.loss.kind.value,
            "variant": self.variant_label,
            "seed": self.seed,
            "eta": self.loss.eta,
        }

    def to_dict(self) -> dict:
        train = {f.name: getattr(self.train, f.name) for f in fields(self.train)
                 if f.name not in ("loss_spec", "arcface", "checkpoint_path", "progress")}
        if self.train.checkpoint_path:
            train["checkpoint_path"] = self.train.checkpoint_path
        loss = {
            "kind": self.loss.kind,
            "eta": self.loss.eta,
            "contrastive_temperature": self.loss.contrastive_temperature,
            "arcface": {"scale": self.loss.arcface.scale, "margin": self.loss.arcface.margin},
        }
        return _plain({
            "name": self.name,
            "seed": self.seed,
            "dataset": {f.name: getattr(self.dataset, f.name) for f in fields(self.dataset)},
            "split": {"scenario": self.scenario, "old_fraction": self.old_fraction, "seed": self.split_seed},
            "model_old": {f.name: getattr(self.model_old, f.name) for f in fields(self.model_old)},
            "model_new": {f.name: getattr(self.model_new, f.name) for f in fields(self.model_new)},
            "train": train,
            "refinement": {f.name: getattr(self.refinement, f.name) for f in fields(self.refinement)},
            "loss": loss,
            "eval": {f.name: getattr(self.eval, f.name) for f in fields(self.eval)},
            "output_dir": self.output_dir,
            "dump_features": self.dump_features,
        })

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "ExperimentConfig":
        """Build from a (partial) nested mapping on top of the defaults"""
        data = dict(data or {})
        unknown = sorted(set(data) - set(TOP_LEVEL_KEYS))
        if unknown:
            raise ConfigurationError(unknown[0], "unknown section")
        dataset = _section(DatasetSpec, "dataset", data.get("dataset"))

        split = dict(data.get("split") or {})
        unknown = sorted(set(split) - {"scenario", "old_fraction", "seed"})
        if unknown:
            raise ConfigurationError(f"split.{unknown[0]}", "unknown key")

        def model(section: str, defaults: dict) -> ModelConfig:
            values = deep_merge(defaults, data.get(section))
            values.setdefault("input_dim", dataset.input_dim)
            return _section(ModelConfig, section, values)

        loss_data = dict(data.get("loss") or {})
        arcface = _section(ArcFaceParams, "loss.arcface",
                           deep_merge(DESK_ARCFACE, loss_data.pop("arcface", None)))
        loss_spec = _section(CompatLossSpec, "loss", loss_data, skip=("arcface",))
        loss_spec.arcface = arcface
        train = _section(TrainConfig, "train", data.get("train"), skip=("loss_spec", "arcface"))
        train.loss_spec = loss_spec
        train.arcface = copy.deepcopy(arcface)

        defaults = cls()
        config = cls(
            name=str(data.get("name", defaults.name)),
            seed=int(data.get("seed", defaults.seed)),
            scenario=Scenario.parse(split.get("scenario", defaults.scenario)),
            old_fraction=float(split.get("old_fraction", defaults.old_fraction)),
            split_seed=int(split.get("seed", defaults.split_seed)),
            dataset=dataset,
            model_old=model("model_old", {"hidden_dims": [32], "init_seed": 0}),
            model_new=model("model_new", {"hidden_dims": [64, 64], "init_seed": 1}),
            train=train,
            refinement=_section(RefinementConfig, "refinement", data.get("refinement")),
            eval=_section(EvalConfig, "eval", data.get("eval")),
            output_dir=str(data.get("output_dir", defaults.output_dir)),
            dump_features=bool(data.get("dump_features", defaults.dump_features)),
        )
        return config.validate()

    def dump_yaml(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True, default_flow_style=False)
        return path


@dataclass
class GridSpec:
    """Cartesian product of scenarios, losses, prototype variants and seeds"""

    scenarios: List[str] = field(default_factory=lambda: [s.value for s in Scenario])
    losses: List[str] = field(default_factory=lambda: ["unibct", "unibct-vanilla", "regress", "contrastive"])
    variants: List[str] = field(default_factory=lambda: ["refined"])
    seeds: List[int] = field(default_factory=lambda: [0])

    def expand(self, base: ExperimentConfig) -> Iterator[ExperimentConfig]:
        root = base.output_dir
        for scenario in self.scenarios:
            for loss in self.losses:
                kind = LossKind.parse(loss)
                # variants only matter for the refined-capable loss
                variants = self.variants if kind is LossKind.UNIBCT else [base.refinement.variant.value]
                for variant in variants:
                    for seed in self.seeds:
                        cfg = base.with_seed(seed)
                        cfg.scenario = Scenario.parse(scenario)
                        cfg.train.loss_spec.kind = kind
                        cfg.refinement.variant = PrototypeVariant.parse(variant)
                        if kind is LossKind.BCT and cfg.scenario.is_open_set:
                            logger.info("skipping bct on open-set scenario %s", scenario)
                            continue
                        cfg.output_dir = str(Path(root) / cfg.run_label)
                        yield cfg.validate()


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


def load_yaml(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError("config", f"file not found: {path}")
    with open(path) as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError("config", f"{path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config", f"{path} must hold a mapping")
    return data


def load_preset(name: str) -> dict:
    path = PRESET_DIR / f"{name}.yaml"
    if not path.is_file():
        raise ConfigurationError("preset", f"unknown preset {name!r}, available: {list_presets()}")
    return load_yaml(path)


def resolve_config(preset: Optional[str] = None,
                   config_path: Optional[Union[str, Path]] = None,
                   seed: Optional[int] = None,
                   output_dir: Optional[str] = None) -> Tuple[ExperimentConfig, Optional[GridSpec]]:
    """Layer preset, file and flags over the defaults.

    A ``grid`` section in the preset or file is returned separately.
    """
    data: Dict[str, Any] = {}
    if preset:
        data = deep_merge(data, load_preset(preset))
    if config_path:
        data = deep_merge(data, load_yaml(config_path))
    grid_data = data.pop("grid", None)
    config = ExperimentConfig.from_dict(data)
    if seed is not None:
        config = config.with_seed(seed)
    if output_dir is not None:
        config.output_dir = str(output_dir)
    grid = _section(GridSpec, "grid", grid_data) if grid_data is not None else None
    return config.validate(), grid
