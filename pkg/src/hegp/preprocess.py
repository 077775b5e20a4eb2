"""Config-declared preprocessing applied symmetrically at fit and predict."""

import numpy as np

from .data import Dataset
from .exceptions import ConfigError

LOGIT_CLIP = 1e-10


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), LOGIT_CLIP, 1.0 - LOGIT_CLIP)
    return np.log(p / (1.0 - p))


def expit(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def fit_scalers(dataset, config):
    """Scaler parameters from the training data, per the config block."""
    scalers = {
        "y_logit": "logit" in config.preprocess_y,
        "y_zscore": "zscore" in config.preprocess_y,
        "x_zscore": config.preprocess_x == "zscore",
    }
    y = dataset.y.copy()
    if scalers["y_logit"]:
        if np.any((y[dataset.mask] < 0) | (y[dataset.mask] > 1)):
            raise ConfigError("logit preprocessing needs responses in [0, 1]")
        y = np.where(dataset.mask, logit(y), 0.0)
    if scalers["y_zscore"]:
        means, stds = [], []
        for j in range(dataset.n_outputs):
            obs = dataset.mask[:, j]
            means.append(float(y[obs, j].mean()) if obs.any() else 0.0)
            sd = float(y[obs, j].std()) if obs.any() else 1.0
            stds.append(sd if sd > 0 else 1.0)
        scalers["y_mean"] = means
        scalers["y_std"] = stds
    if scalers["x_zscore"]:
        scalers["x_mean"] = dataset.x.mean(axis=0).tolist()
        sd = dataset.x.std(axis=0)
        scalers["x_std"] = np.where(sd > 0, sd, 1.0).tolist()
    return scalers


def transform_dataset(dataset, scalers):
    y = dataset.y.copy()
    if scalers.get("y_logit"):
        y = np.where(dataset.mask, logit(y), 0.0)
    if scalers.get("y_zscore"):
        mean = np.asarray(scalers["y_mean"])
        std = np.asarray(scalers["y_std"])
        y = np.where(dataset.mask, (y - mean) / std, 0.0)
    x = transform_x(dataset.x, scalers)
    return Dataset(x, y, dataset.mask.copy())


def transform_x(x, scalers):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if scalers.get("x_zscore"):
        mean = np.asarray(scalers["x_mean"])
        std = np.asarray(scalers["x_std"])
        return (x - mean) / std
    return x


def inverse_y(values, scalers):
    """Map model-space response values back to the original units.

    Both steps are monotone, so quantile bounds map through exactly.
    """
    out = np.asarray(values, dtype=float).copy()
    if scalers.get("y_zscore"):
        out = out * np.asarray(scalers["y_std"]) + np.asarray(scalers["y_mean"])
    if scalers.get("y_logit"):
        out = expit(out)
    return out
