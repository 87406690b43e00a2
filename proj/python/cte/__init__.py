"""Acoustic word embeddings with a correspondence transformer encoder."""

from ._core import (
    ConfigError,
    Error,
    Model,
    NumericalError,
    check_loss_gradients,
    collapse_metric,
    corpus_spec_defaults,
    downsampling_baseline,
    dtw_distance,
    generate_corpus,
    log_mel,
    pca_project,
    pr_ap,
    psed,
    read_features,
    read_wav,
    roc_auc,
    run,
    same_different,
    train_config_defaults,
)

__all__ = [
    "ConfigError",
    "Error",
    "Model",
    "NumericalError",
    "check_loss_gradients",
    "collapse_metric",
    "corpus_spec_defaults",
    "downsampling_baseline",
    "dtw_distance",
    "generate_corpus",
    "log_mel",
    "pca_project",
    "pr_ap",
    "psed",
    "read_features",
    "read_wav",
    "roc_auc",
    "run",
    "same_different",
    "train_config_defaults",
]
