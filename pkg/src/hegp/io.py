"""Model-file serialization: JSON with explicit shapes, row-major data.

Floats go through Python's shortest round-trip repr, so a load after a
save restores bit-identical values.
"""

import json

import numpy as np

from .config import FitConfig
from .data import Dataset
from .exceptions import ConfigError
from .gp_core import Kernel, MeanFunction
from .precision import PrecisionMixture
from .vem import EMState, GPParams, VariationalState, _prior_from_config

FORMAT_VERSION = 1


def _mat(arr):
    arr = np.asarray(arr, dtype=float)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _unmat(doc):
    return np.asarray(doc["data"], dtype=float).reshape(doc["shape"])


def save_model(path, dataset, state):
    doc = model_document(dataset, state)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def model_document(dataset, state):
    gp = state.gp
    vs = state.var_state
    doc = {
        "version": FORMAT_VERSION,
        "config": state.config.to_dict() if state.config else None,
        "data": {
            "x": _mat(dataset.x),
            "y": _mat(dataset.y),
            "mask": _mat(dataset.mask.astype(float)),
        },
        "gp": {
            "kernel_family": gp.kernel.family,
            "log_signal": gp.kernel.log_signal,
            "log_decay": gp.kernel.log_decay,
            "output_chol": _mat(gp.output_chol),
            "mean_form": gp.mean.form,
            "mean_offset": None if gp.mean.offset is None else _mat(gp.mean.offset),
            "mean_slope": None if gp.mean.slope is None else _mat(gp.mean.slope),
        },
        "mixture": {
            "anchors": _mat(state.mixture.anchors),
            "bases": _mat(state.mixture.bases),
            "bandwidths": _mat(state.mixture.bandwidths),
            "diagonal": bool(state.mixture.diagonal),
        },
        "scale_mixture": None
        if state.scale_mixture is None
        else {
            "anchors": _mat(state.scale_mixture.anchors),
            "bases": _mat(state.scale_mixture.bases),
            "bandwidths": _mat(state.scale_mixture.bandwidths),
            "diagonal": bool(state.scale_mixture.diagonal),
        },
        "factors": None
        if vs is None
        else {
            "means": _mat(vs.means),
            "covs": _mat(vs.covs),
            "scales": None if vs.scales is None else _mat(vs.scales),
        },
        "r_hat": float(state.r_hat),
        "sigma0": None if state.sigma0 is None else float(state.sigma0),
        "metadata": {
            "iterations": int(state.iteration),
            "converged": bool(state.converged),
            "elbo_tail": [float(v) for v in state.elbo_trace[-10:]],
            "loglik_tail": [float(v) for v in state.loglik_trace[-10:]],
            "r_trace_tail": [float(v) for v in state.r_trace[-10:]],
        },
    }
    return doc


def load_model(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid model file {path}: {exc}") from exc
    if doc.get("version") != FORMAT_VERSION:
        raise ConfigError(
            f"unsupported model-file version: {doc.get('version')!r}"
        )
    data = doc["data"]
    dataset = Dataset(
        _unmat(data["x"]), _unmat(data["y"]), _unmat(data["mask"]).astype(bool)
    )
    g = doc["gp"]
    kernel = Kernel(
        family=g["kernel_family"],
        log_signal=g["log_signal"],
        log_decay=g["log_decay"],
    )
    mean = MeanFunction(
        form=g["mean_form"],
        offset=None if g["mean_offset"] is None else _unmat(g["mean_offset"]),
        slope=None if g["mean_slope"] is None else _unmat(g["mean_slope"]),
    )
    gp = GPParams(
        kernel=kernel,
        output_chol=_unmat(g["output_chol"]),
        mean=mean,
        n_covariates=dataset.n_covariates,
    )
    m = doc["mixture"]
    mixture = PrecisionMixture(
        anchors=_unmat(m["anchors"]),
        bases=_unmat(m["bases"]),
        bandwidths=_unmat(m["bandwidths"]),
        diagonal=m["diagonal"],
    )
    scale_mixture = None
    if doc.get("scale_mixture") is not None:
        sm = doc["scale_mixture"]
        scale_mixture = PrecisionMixture(
            anchors=_unmat(sm["anchors"]),
            bases=_unmat(sm["bases"]),
            bandwidths=_unmat(sm["bandwidths"]),
            diagonal=sm["diagonal"],
        )
    vs = None
    if doc.get("factors") is not None:
        f = doc["factors"]
        vs = VariationalState(
            means=_unmat(f["means"]),
            covs=_unmat(f["covs"]),
            scales=None if f["scales"] is None else _unmat(f["scales"]),
        )
    config = None
    if doc.get("config") is not None:
        config = FitConfig.from_dict(doc["config"])
    from .vem import _build_obs_model

    obs_model = (
        _build_obs_model(config, dataset) if config is not None else None
    )
    state = EMState(
        gp=gp,
        mixture=mixture,
        obs_model=obs_model,
        var_state=vs,
        r_hat=doc["r_hat"],
        iteration=doc["metadata"]["iterations"],
        sigma0=doc.get("sigma0"),
        scale_mixture=scale_mixture,
        converged=doc["metadata"]["converged"],
        config=config,
        prior=None if config is None else _prior_from_config(
            config, dataset.n_outputs
        ),
    )
    state.elbo_trace = list(doc["metadata"].get("elbo_tail", []))
    state.loglik_trace = list(doc["metadata"].get("loglik_tail", []))
    state.r_trace = list(doc["metadata"].get("r_trace_tail", []))
    return dataset, state
