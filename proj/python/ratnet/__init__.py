"""Relevance-weighted knowledge transfer on synthetic multi-domain data."""

from ._ratnet import (
    Benchmark,
    BenchmarkConfig,
    ConfigError,
    Dataset,
    Model,
    ModelConfig,
    RatnetError,
    TrainConfig,
    auc,
    average_precision,
    category_map,
    f1_score,
    few_shot,
    linear_probe,
    make_benchmark,
    mcc,
    pretrain,
    run_cli,
    welch_t_test,
    zero_shot,
)

__all__ = [
    "Benchmark",
    "BenchmarkConfig",
    "ConfigError",
    "Dataset",
    "Model",
    "ModelConfig",
    "RatnetError",
    "TrainConfig",
    "auc",
    "average_precision",
    "category_map",
    "f1_score",
    "few_shot",
    "linear_probe",
    "make_benchmark",
    "mcc",
    "pretrain",
    "run_cli",
    "welch_t_test",
    "zero_shot",
]
