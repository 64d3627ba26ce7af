"""Adaptive domain generalization with prototypical domain embeddings."""
from .adaptive import AdaptiveModel, Penalty, TrainConfig, adaptive_infer, adaptive_train, build_augmented
from .benchgen import BenchmarkSplit, LtConfig, MotherSpec, ShiftKind, generate_lt_benchmark
from .numcore import MlpParams, NumericError, SgdConfig, ShapeError
from .protoembed import DomainPrototype, EmbeddingVariant, ProtoConfig, compute_prototype, proto_train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveModel",
    "BenchmarkSplit",
    "DomainPrototype",
    "EmbeddingVariant",
    "LtConfig",
    "MlpParams",
    "MotherSpec",
    "NumericError",
    "Penalty",
    "ProtoConfig",
    "SgdConfig",
    "ShapeError",
    "ShiftKind",
    "TrainConfig",
    "adaptive_infer",
    "adaptive_train",
    "build_augmented",
    "compute_prototype",
    "generate_lt_benchmark",
    "proto_train",
]
