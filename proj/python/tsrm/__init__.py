"""Python bindings for the TSRM C++ core.

Configs are plain dicts using the same keys as the JSON run configs.
"""

import json

from ._tsrm import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Model,
    NumericError,
    SeriesDataset,
    Split,
    Task,
    TsrmError,
    conv1d_out_len,
    entmax15,
    forecast_loss,
    generate_mask,
    imputation_loss,
    load_csv,
    real_bits,
    run_cli,
    split_and_standardize,
    synthetic_sine,
)
from . import _tsrm

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError", "Model", "NumericError",
    "SeriesDataset", "Split", "Task", "TsrmError", "conv1d_out_len", "entmax15", "evaluate",
    "explain", "forecast_loss", "generate_mask", "imputation_loss", "load_csv", "model",
    "model_config", "real_bits", "run_cli", "split_and_standardize", "synthetic_sine", "train",
]


def _task(task):
    return getattr(Task, task) if isinstance(task, str) else task


def _split(split):
    return getattr(Split, split) if isinstance(split, str) else split


def model(config, seed=0, force_ranges=False):
    """Builds and initializes a model from a config dict."""
    m = Model(json.dumps(config), force_ranges)
    m.init(seed)
    return m


def model_config(m):
    return json.loads(m.config_json())


def train(m, dataset, task="forecast", **train_config):
    """Trains in place; keyword arguments are TrainConfig keys (lr, max_epochs, ...)."""
    history, best_epoch, best_val, stopped = _tsrm.train(m, dataset, _task(task), json.dumps(train_config))
    return {
        "history": json.loads(history),
        "best_epoch": best_epoch,
        "best_val_mse": best_val,
        "stopped_early": stopped,
    }


def evaluate(m, dataset, split="test", task="forecast", missing_ratio=0.25, seed=0, max_windows=0):
    return json.loads(_tsrm.evaluate(m, dataset, _split(split), _task(task), missing_ratio, seed, max_windows))


def explain(m, x, threshold=0.85, per_head=False):
    """Attention report for one [T, F] window as a dict."""
    return json.loads(_tsrm.explain(m, x, threshold, per_head))
