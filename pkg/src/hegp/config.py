"""Training configuration: the JSON-facing schema and its defaults."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError

MODEL_FAMILIES = ("gaussian", "student_t", "outlier", "probit", "state_space")

DEFAULT_R_GRID = [1.0 + 0.5 * i for i in range(39)]  # 1, 1.5, ..., 20
DEFAULT_SIGMA0_GRID = [0.025 * i for i in range(13)]  # 0, 0.025, ..., 0.3


@dataclass
class SparseConfig:
    enabled: bool = False
    m: int = 50

    def validate(self):
        if self.enabled and self.m < 1:
            raise ConfigError("sparse approximation needs at least one inducing point")


@dataclass
class FitConfig:
    """Everything the training loop needs, JSON round-trippable."""

    model_family: str = "gaussian"
    kernel: str = "squared_exponential"
    mean: str = "constant"
    d: int = 100
    induced_points: object = "auto"  # "auto" or explicit (D, P) list
    r_grid: list = field(default_factory=lambda: list(DEFAULT_R_GRID))
    adjacent_percent_a: float = 5.0
    sigma0_grid: list = field(default_factory=lambda: list(DEFAULT_SIGMA0_GRID))
    sigma0: float = 0.1  # used when fitting the outlier family at a fixed value
    nu: float = 6.0
    delta: float = 0.1
    outer_iters: int = 300
    estep_iters: int = 100
    upsilon_steps: int = 6
    mc_samples: int = 64
    seed: int = 0
    diagonal_mode: bool = False
    upsilon_in_estep: bool = False
    prior: str = "flat"  # or "inverse_wishart"
    prior_scale: object = None
    prior_dof: float = None
    sparse: SparseConfig = field(default_factory=SparseConfig)
    links: object = None  # state-space link terms, per output
    noise_scales: object = None
    state_noise: str = "student_t"
    free_offsets: list = field(default_factory=list)
    preprocess_y: str = "none"  # none | logit | zscore | logit+zscore
    preprocess_x: str = "none"  # none | zscore
    convergence_tol: float = 1e-6
    convergence_patience: int = 5

    def validate(self):
        if self.model_family not in MODEL_FAMILIES:
            raise ConfigError(f"unknown model family: {self.model_family!r}")
        if self.d < 1:
            raise ConfigError("number of mixture components must be >= 1")
        if not self.r_grid:
            raise ConfigError("the bandwidth percentage grid cannot be empty")
        if any(not (0 < r <= 100) for r in self.r_grid):
            raise ConfigError("bandwidth percentages must lie in (0, 100]")
        if not (0 < self.adjacent_percent_a <= 100):
            raise ConfigError("adjacent percentage must lie in (0, 100]")
        if self.nu <= 0:
            raise ConfigError("degrees of freedom must be positive")
        if not (0 <= self.delta < 0.5):
            raise ConfigError("mislabel probability must lie in [0, 1/2)")
        if self.outer_iters < 0 or self.estep_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.mc_samples < 2:
            raise ConfigError("need at least two Monte Carlo samples")
        if self.prior not in ("flat", "inverse_wishart"):
            raise ConfigError(f"unknown base-matrix prior: {self.prior!r}")
        if self.preprocess_y not in ("none", "logit", "zscore", "logit+zscore"):
            raise ConfigError(f"unknown response preprocessing: {self.preprocess_y!r}")
        if self.preprocess_x not in ("none", "zscore"):
            raise ConfigError(f"unknown covariate preprocessing: {self.preprocess_x!r}")
        self.sparse.validate()
        return self

    def to_dict(self):
        out = asdict(self)
        if isinstance(out.get("induced_points"), np.ndarray):
            out["induced_points"] = out["induced_points"].tolist()
        return out

    def to_json(self, path=None):
        doc = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(doc + "\n")
        return doc

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        doc = dict(doc)
        sparse_doc = doc.pop("sparse", None)
        cfg = cls(**doc)
        if sparse_doc is not None:
            if not isinstance(sparse_doc, dict):
                raise ConfigError("'sparse' must be an object {enabled, m}")
            cfg.sparse = SparseConfig(**sparse_doc)
        return cfg.validate()

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(doc)
