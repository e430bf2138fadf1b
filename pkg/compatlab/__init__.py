from .compat_losses import CompatLossSpec, LossKind, build_compat_loss
from .config import ExperimentConfig, resolve_config
from .embedding_model import ArcFaceParams, EmbeddingModel, ModelConfig, PrototypeMatrix
from .evaluation import CompatReport, EvalConfig, evaluate_pair
from .prototype_engine import PrototypeVariant, RefinementConfig, build_pseudo_classifier
from .synthetic_data import DatasetSpec, Scenario, allocate_split, generate_dataset
from .trainer import TrainConfig, TrainLog, train_new_model, train_old_model

__all__ = [
    'ArcFaceParams', 'CompatLossSpec', 'CompatReport', 'DatasetSpec', 'EmbeddingModel', 'EvalConfig',
    'ExperimentConfig', 'LossKind', 'ModelConfig', 'PrototypeMatrix', 'PrototypeVariant',
    'RefinementConfig', 'Scenario', 'TrainConfig', 'TrainLog', 'allocate_split', 'build_compat_loss',
    'build_pseudo_classifier', 'evaluate_pair', 'generate_dataset', 'resolve_config',
    'train_new_model', 'train_old_model',
]
