"""Synthetic data generators and evaluation metrics.

Each scenario is a pure function of its seed: heteroscedastic bivariate
series with smoothly mixed residual correlation, a univariate variant
with injected outliers, a two-circle label field for classification, a
three-output state-space signal with fixed nonlinear links, and a
homoscedastic control.  Metrics cover the mean KL divergence from the
generative predictive to the fitted one, chi-square calibration of
standardized residuals, and central-band coverage.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, kstest

from ._linalg import inv_psd, jittered_cholesky
from .data import Dataset
from .exceptions import ParameterError
from .gp_core import GaussianDist, gaussian_kl

SCENARIOS = (
    "hetero-bivariate",
    "hetero-outliers",
    "classification-circles",
    "state-space-3d",
    "homoscedastic-control",
)


@dataclass
class GroundTruth:
    """Generative quantities kept alongside a simulated dataset."""

    scenario: str
    seed: int
    mean_grid: np.ndarray  # (G, Q) generative mean over eval_grid
    cov_grid: np.ndarray  # (G, Q, Q) generative covariance over eval_grid
    eval_grid: np.ndarray  # (G, P)
    outlier_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    label_prob_grid: np.ndarray | None = None  # classification scenarios
    latent: np.ndarray | None = None  # state-space hidden signals
    meta: dict = field(default_factory=dict)

    def to_json(self, path):
        doc = {
            "scenario": self.scenario,
            "seed": int(self.seed),
            "eval_grid": self.eval_grid.tolist(),
            "mean_grid": self.mean_grid.tolist(),
            "cov_grid": self.cov_grid.tolist(),
            "outlier_idx": self.outlier_idx.tolist(),
            "label_prob_grid": None
            if self.label_prob_grid is None
            else self.label_prob_grid.tolist(),
            "latent": None if self.latent is None else self.latent.tolist(),
            "meta": self.meta,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls(
            scenario=doc["scenario"],
            seed=doc["seed"],
            mean_grid=np.asarray(doc["mean_grid"], dtype=float),
            cov_grid=np.asarray(doc["cov_grid"], dtype=float),
            eval_grid=np.asarray(doc["eval_grid"], dtype=float),
            outlier_idx=np.asarray(doc.get("outlier_idx", []), dtype=int),
            label_prob_grid=None
            if doc.get("label_prob_grid") is None
            else np.asarray(doc["label_prob_grid"], dtype=float),
            latent=None
            if doc.get("latent") is None
            else np.asarray(doc["latent"], dtype=float),
            meta=doc.get("meta", {}),
        )


def random_correlation(rng, q):
    """Correlation matrix of A A^T for A with standard normal entries."""
    a = rng.standard_normal((q, q))
    s = a @ a.T
    d = np.sqrt(np.diag(s))
    return s / np.outer(d, d)


def _gp_draw(rng, x, cov_qq, decay_sq=1.0):
    """One multi-output GP path over 1-D covariates (squared-exponential)."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    n = x.shape[0]
    k = np.exp(-decay_sq * (x - x.T) ** 2)
    joint = np.kron(np.atleast_2d(cov_qq), k)
    chol, _ = jittered_cholesky(joint, name="generator covariance")
    q = np.atleast_2d(cov_qq).shape[0]
    vec = chol @ rng.standard_normal(n * q)
    return vec.reshape(q, n).T  # (N, Q)


def _mixture_cov(x, centers, mats):
    """Kernel-mixed covariance field: sum_k exp(-|x-c_k|^2) V_k, normalized."""
    x = np.asarray(x, dtype=float).ravel()
    logits = -((x[:, None] - centers[None, :]) ** 2)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("nk,kpq->npq", w, mats)


def simulate(scenario, seed, n=None, eval_points=201):
    """Draw one dataset plus its ground truth; pure in (scenario, seed)."""
    if scenario not in SCENARIOS:
        raise ParameterError(f"unknown scenario: {scenario!r}")
    rng = np.random.default_rng(seed)
    if scenario == "hetero-bivariate":
        return _sim_hetero(rng, scenario, seed, n or 500, eval_points, q=2)
    if scenario == "hetero-outliers":
        return _sim_hetero(
            rng, scenario, seed, n or 500, eval_points, q=1, outliers=0.05
        )
    if scenario == "homoscedastic-control":
        return _sim_homoscedastic(rng, seed, n or 500, eval_points)
    if scenario == "classification-circles":
        return _sim_circles(rng, seed, n or 1000)
    return _sim_state_space(rng, seed, n or 400, eval_points)


def _sim_hetero(rng, scenario, seed, n, eval_points, q, outliers=0.0):
    centers = np.array([2.0 * k - 6.0 for k in range(1, 6)])
    if q == 1:
        # the correlation recipe degenerates to 1 for scalar responses;
        # keep the noise heteroscedastic by drawing plain variances
        # (a a^T for a standard normal a)
        mats = rng.standard_normal((5, 1, 1)) ** 2 + 0.05
    else:
        mats = np.stack([random_correlation(rng, q) for _ in range(5)])
    x = rng.uniform(-5.0, 5.0, size=n)
    x.sort()
    grid = np.linspace(-5.0, 5.0, eval_points)
    sigma = random_correlation(rng, q) if q > 1 else np.eye(1)
    mu_all = _gp_draw(rng, np.concatenate([x, grid]), sigma)
    mu_x, mu_grid = mu_all[:n], mu_all[n:]
    cov_x = _mixture_cov(x, centers, mats)
    cov_grid = _mixture_cov(grid, centers, mats)
    y = np.empty((n, q))
    for i in range(n):
        chol, _ = jittered_cholesky(cov_x[i], name="noise")
        y[i] = mu_x[i] + chol @ rng.standard_normal(q)
    outlier_idx = np.zeros(0, dtype=int)
    if outliers > 0:
        k = int(outliers * n)
        outlier_idx = np.sort(rng.choice(n, size=k, replace=False))
        lo, hi = np.quantile(y[:, 0], [0.05, 0.95])
        y[outlier_idx, 0] = rng.uniform(lo, hi, size=k)
    ds = Dataset(x.reshape(-1, 1), y)
    truth = GroundTruth(
        scenario=scenario,
        seed=seed,
        mean_grid=mu_grid,
        cov_grid=cov_grid,
        eval_grid=grid.reshape(-1, 1),
        outlier_idx=outlier_idx,
        meta={"n": n, "centers": centers.tolist(), "contamination": outliers},
    )
    return ds, truth


def _sim_homoscedastic(rng, seed, n, eval_points):
    q = 1
    x = rng.uniform(-5.0, 5.0, size=n)
    x.sort()
    grid = np.linspace(-5.0, 5.0, eval_points)
    mu_all = _gp_draw(rng, np.concatenate([x, grid]), np.eye(1))
    mu_x, mu_grid = mu_all[:n], mu_all[n:]
    var = 0.3**2
    y = mu_x + math.sqrt(var) * rng.standard_normal((n, q))
    ds = Dataset(x.reshape(-1, 1), y)
    truth = GroundTruth(
        scenario="homoscedastic-control",
        seed=seed,
        mean_grid=mu_grid,
        cov_grid=np.tile(var * np.eye(1), (eval_points, 1, 1)),
        eval_grid=grid.reshape(-1, 1),
        meta={"n": n, "noise_var": var},
    )
    return ds, truth


def circle_label_probability(x, radius=1.0):
    """True p(red) over the plane: biased inside each circle, even outside."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d_a = np.hypot(x[:, 0] + 1.0, x[:, 1] + 1.0)
    d_b = np.hypot(x[:, 0] - 1.0, x[:, 1] - 1.0)
    p = np.full(x.shape[0], 0.5)
    p[d_a <= radius] = 0.95
    p[d_b <= radius] = 0.05
    return p


def _sim_circles(rng, seed, n, radius=1.0, grid_side=50):
    x = rng.uniform(-2.0, 2.0, size=(n, 2))
    p = circle_label_probability(x, radius)
    y = (rng.uniform(size=n) < p).astype(float).reshape(-1, 1)
    gx = np.linspace(-2.0, 2.0, grid_side)
    gg = np.stack(np.meshgrid(gx, gx, indexing="ij"), axis=-1).reshape(-1, 2)
    p_grid = circle_label_probability(gg, radius)
    ds = Dataset(x, y)
    truth = GroundTruth(
        scenario="classification-circles",
        seed=seed,
        mean_grid=np.zeros((gg.shape[0], 1)),
        cov_grid=np.tile(np.eye(1), (gg.shape[0], 1, 1)),
        eval_grid=gg,
        label_prob_grid=p_grid,
        meta={"n": n, "radius": radius, "grid_side": grid_side},
    )
    return ds, truth


def state_space_links():
    """The fixed observation links of the three-output scenario."""
    from .third_level import affine_term, exp_term, power_term

    return (
        (affine_term(1.0, 0.0),),
        (exp_term(1.0, 1.0), affine_term(1.0, 0.0)),
        (exp_term(1.0, 0.5), power_term(1.0, 3)),
    )


def _sim_state_space(rng, seed, n, eval_points):
    q = 3
    centers = np.array([1.5 * k - 4.5 for k in range(1, 6)])
    u = rng.uniform(0.0, 0.3, size=(5, q, q))
    mats = np.einsum("kpq,krq->kpr", u, u)
    x = np.linspace(-3.0, 3.0, n)
    grid = np.linspace(-3.0, 3.0, eval_points)
    sigma = random_correlation(rng, q) / 9.0
    mu_all = _gp_draw(rng, np.concatenate([x, grid]), sigma, decay_sq=2.0)
    mu_x, mu_grid = mu_all[:n], mu_all[n:]
    cov_x = _mixture_cov(x, centers, mats)
    cov_grid = _mixture_cov(grid, centers, mats)
    f = np.empty((n, q))
    for i in range(n):
        chol, _ = jittered_cholesky(cov_x[i], name="state covariance")
        f[i] = mu_x[i] + chol @ rng.standard_normal(q)
    scales = np.array([0.05, 0.10, 0.15])
    t_noise = rng.standard_t(6, size=(n, q))
    links = state_space_links()
    from .third_level import StateSpaceLink

    link_model = StateSpaceLink(links=links, noise_scales=scales)
    y = np.empty((n, q))
    for qi in range(q):
        y[:, qi] = link_model.link_value(qi, f[:, qi]) + scales[qi] * t_noise[:, qi]
    ds = Dataset(x.reshape(-1, 1), y)
    truth = GroundTruth(
        scenario="state-space-3d",
        seed=seed,
        mean_grid=mu_grid,
        cov_grid=cov_grid,
        eval_grid=grid.reshape(-1, 1),
        latent=f,
        meta={"n": n, "noise_scales": scales.tolist(), "noise": "student_t(6)"},
    )
    return ds, truth


# ---------------------------------------------------------------------------
# Metrics


def mean_kl_divergence(truth, fitted_means, fitted_covs):
    """Mean KL from the generative Gaussian to the fitted predictive,
    over the ground-truth evaluation grid."""
    g = truth.eval_grid.shape[0]
    if fitted_means.shape[0] != g:
        raise ParameterError("evaluate the fitted predictive on the truth grid")
    total = 0.0
    for i in range(g):
        p = GaussianDist(truth.mean_grid[i], truth.cov_grid[i])
        q = GaussianDist(fitted_means[i], fitted_covs[i])
        total += gaussian_kl(p, q)
    return total / g


def label_kl(p_true, p_hat):
    """Mean Bernoulli KL of the true label field from the fitted one."""
    p_true = np.clip(np.asarray(p_true, dtype=float), 1e-12, 1 - 1e-12)
    p_hat = np.clip(np.asarray(p_hat, dtype=float), 1e-12, 1 - 1e-12)
    kl = p_true * np.log(p_true / p_hat) + (1 - p_true) * np.log(
        (1 - p_true) / (1 - p_hat)
    )
    return float(np.mean(kl))


@dataclass
class EvalReport:
    """Fit-quality summary for one model on one dataset."""

    mean_kl: float | None = None
    coverage_percent: float | None = None
    ks_statistic: float | None = None
    ks_pvalue: float | None = None
    cvm: float | None = None
    label_kl: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        out = {}
        for k in (
            "mean_kl",
            "coverage_percent",
            "ks_statistic",
            "ks_pvalue",
            "cvm",
            "label_kl",
        ):
            v = getattr(self, k)
            out[k] = None if v is None else float(v)
        out.update(self.extras)
        return out


def residual_calibration(fitted, dataset=None, rescale=True):
    """Chi-square calibration of the squared standardized residuals.

    Residuals are whitened with the target predictive covariance
    (outlier-rescaled when applicable); their squared norms are tested
    against the chi-square law with one degree per output, and the
    central 95% band coverage is reported.
    """
    ds = fitted.dataset if dataset is None else dataset
    q = ds.n_outputs
    means, covs = fitted.predict_target(ds.x, rescale=rescale)
    norms = np.empty(ds.n)
    for i in range(ds.n):
        prec = inv_psd(covs[i], name="predictive covariance")
        r = ds.y[i] - means[i]
        norms[i] = float(r @ prec @ r)
    ks = kstest(norms, chi2(df=q).cdf)
    coverage = fitted.band_coverage(ds, rescale=rescale)
    return EvalReport(
        coverage_percent=coverage,
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        extras={"squared_norms_mean": float(norms.mean())},
    )


def evaluate_regression(fitted, truth, rescale=True):
    """Full report against a known generative model."""
    means, covs = fitted.predict_target(truth.eval_grid, rescale=rescale)
    report = residual_calibration(fitted, rescale=rescale)
    report.mean_kl = float(mean_kl_divergence(truth, means, covs))
    try:
        report.cvm = float(fitted.cvm_score()[0])
    except ParameterError:
        report.cvm = None
    return report


def evaluate_classification(fitted, truth):
    p_hat = fitted.predict_class_prob(truth.eval_grid)
    return EvalReport(label_kl=label_kl(truth.label_prob_grid, p_hat))


def compare_methods(dataset, truth, methods, config, select_scale=False):
    """Fit each requested method and tabulate the evaluation metrics.

    ``methods`` names are "homoscedastic" (single-component control),
    "gaussian", or "outlier"; the outlier method optionally re-selects
    its scale on the provided grid.
    """
    from .predictors import FittedModel, select_outlier_scale
    from .vem import fit, replace_config

    if not methods:
        raise ParameterError("no methods requested")
    table = {}
    for name in methods:
        if name == "homoscedastic":
            cfg = replace_config(config, model_family="gaussian", d=1)
            fitted = FittedModel(dataset, fit(dataset, cfg))
        elif name == "gaussian":
            cfg = replace_config(config, model_family="gaussian")
            fitted = FittedModel(dataset, fit(dataset, cfg))
        elif name == "outlier":
            if select_scale:
                report = select_outlier_scale(
                    dataset, config, keep_models=True
                )
                fitted = report.models[report.chosen]
                table.setdefault("_outlier_scale_report", report.to_dict())
            else:
                cfg = replace_config(config, model_family="outlier")
                fitted = FittedModel(dataset, fit(dataset, cfg))
        else:
            raise ParameterError(f"unknown method: {name!r}")
        table[name] = evaluate_regression(fitted, truth).to_dict()
    return table
