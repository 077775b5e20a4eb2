"""Observation models linking the latent target function to the data.

Each model exposes a per-datum log-likelihood and its gradient in the
latent value; families with closed-form expectations under a Gaussian
variational factor implement those too, which lets the training engine
skip Monte Carlo entirely for them.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr

from ._linalg import inv_psd
from .exceptions import ParameterError

LOG_2PI = math.log(2.0 * math.pi)


class ObservationModel:
    """Interface for third-level models p(y | f; theta)."""

    exact_gaussian = False
    needs_scale_factors = False  # per-datum variational scale factors
    needs_mc = False  # Monte Carlo for the expected log-likelihood

    def loglik(self, y, f, scale=None):
        raise NotImplementedError

    def grad_f(self, y, f, scale=None):
        raise NotImplementedError

    # Free-parameter surface; default is no trainable parameters.
    def get_params(self):
        return np.zeros(0)

    def set_params(self, theta):
        return self

    def grad_params(self, y, f, scale=None):
        return np.zeros(0)


@dataclass(frozen=True)
class IdentityGaussian(ObservationModel):
    """Degenerate third level: the response is the latent value itself.

    The engine treats this family exactly (no variational factor over a
    separate latent), so the per-point log-likelihood is never evaluated
    through the generic path.
    """

    exact_gaussian = True

    def loglik(self, y, f, scale=None):
        raise ParameterError(
            "identity-Gaussian family is handled by the exact engine path"
        )

    def grad_f(self, y, f, scale=None):
        raise ParameterError(
            "identity-Gaussian family is handled by the exact engine path"
        )


@dataclass(frozen=True)
class StudentTObservation(ObservationModel):
    """Multivariate Student-t residuals around the latent value.

    ``phi_source`` selects how the t scale matrix varies over covariates:
    "mixture" uses a free anchored precision mixture of its own, while
    "tied" locks it to outlier_scale^2 times the second-level noise
    covariance (the outlier-nullifying variant).
    """

    nu: float = 6.0
    phi_source: str = "mixture"
    outlier_scale: float = 0.1  # sigma_0, used only by the tied source

    needs_scale_factors = True

    def __post_init__(self):
        if self.nu <= 0:
            raise ParameterError("degrees of freedom must be positive")
        if self.phi_source not in ("mixture", "tied"):
            raise ParameterError(f"unknown phi source: {self.phi_source!r}")
        if self.outlier_scale < 0:
            raise ParameterError("outlier scale must be nonnegative")

    def loglik(self, y, f, scale=None):
        """Exact multivariate t log-density; ``scale`` is the Q x Q matrix."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        f = np.atleast_1d(np.asarray(f, dtype=float))
        if not np.all(np.isfinite(f)):
            raise ParameterError("latent value must be finite")
        scale = np.atleast_2d(np.asarray(scale, dtype=float))
        q = y.shape[0]
        dev = y - f
        prec = inv_psd(scale, name="t scale")
        m = float(dev @ prec @ dev)
        _, logdet = np.linalg.slogdet(scale)
        nu = self.nu
        return float(
            gammaln((nu + q) / 2.0)
            - gammaln(nu / 2.0)
            - 0.5 * q * math.log(nu * math.pi)
            - 0.5 * logdet
            - 0.5 * (nu + q) * math.log1p(m / nu)
        )

    def grad_f(self, y, f, scale=None):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        f = np.atleast_1d(np.asarray(f, dtype=float))
        scale = np.atleast_2d(np.asarray(scale, dtype=float))
        q = y.shape[0]
        dev = y - f
        prec = inv_psd(scale, name="t scale")
        m = float(dev @ prec @ dev)
        return (self.nu + q) / (self.nu + m) * (prec @ dev)


@dataclass(frozen=True)
class ProbitClassifier(ObservationModel):
    """Binary labels through a hard sign indicator with mislabel mass.

    p(y=1 | f) is 1 - delta on f > 0 and delta on f <= 0 (and mirrored
    for y = 0).  The expectation of the log-likelihood under a Gaussian
    factor is closed form, so training never needs samples; the pointwise
    gradient is defined through the smoothed surrogate
    delta + (1 - 2 delta) * Phi(s f).
    """

    delta: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.delta < 0.5):
            raise ParameterError("mislabel probability must lie in [0, 1/2)")

    @staticmethod
    def _sign(y):
        y = np.asarray(y)
        if np.any((y != 0) & (y != 1)):
            raise ParameterError("labels must be 0 or 1")
        return 2.0 * np.asarray(y, dtype=float) - 1.0

    def _safe_delta(self):
        return max(self.delta, 1e-12)

    def loglik(self, y, f, scale=None):
        s = float(self._sign(np.atleast_1d(y)[0]))
        fv = float(np.atleast_1d(f)[0])
        if not np.isfinite(fv):
            raise ParameterError("latent value must be finite")
        d = self._safe_delta()
        return math.log(1.0 - d) if s * fv > 0 else math.log(d)

    def smoothed_loglik(self, y, f):
        """log of the surrogate delta + (1 - 2 delta) Phi(s f)."""
        s = float(self._sign(np.atleast_1d(y)[0]))
        fv = float(np.atleast_1d(f)[0])
        d = self._safe_delta()
        return math.log(d + (1.0 - 2.0 * d) * float(ndtr(s * fv)))

    def grad_f(self, y, f, scale=None):
        s = float(self._sign(np.atleast_1d(y)[0]))
        fv = float(np.atleast_1d(f)[0])
        d = self._safe_delta()
        p = d + (1.0 - 2.0 * d) * float(ndtr(s * fv))
        dens = math.exp(-0.5 * fv * fv) / math.sqrt(2.0 * math.pi)
        return np.array([(1.0 - 2.0 * d) * dens * s / p])

    def expected_loglik(self, y, eta, psi):
        """E[log p(y | f)] for f ~ N(eta, psi), exactly.

        ``eta`` and ``psi`` are scalars (Q = 1).  Returns the value and
        its gradients in eta and psi.
        """
        s = float(self._sign(np.atleast_1d(y)[0]))
        sd = math.sqrt(float(psi))
        z = s * float(eta) / sd
        d = self._safe_delta()
        la, lb = math.log(1.0 - d), math.log(d)
        pa = float(ndtr(z))
        value = la * pa + lb * (1.0 - pa)
        dens = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        dv_dz = (la - lb) * dens
        return (
            value,
            dv_dz * s / sd,
            dv_dz * (-s * float(eta)) / (2.0 * float(psi) ** 1.5),
        )

    def predictive_prob(self, mean, var):
        """p(y = 1) under a Gaussian latent: delta + (1-2 delta) Phi(m/sd)."""
        z = np.asarray(mean, dtype=float) / np.sqrt(np.asarray(var, dtype=float))
        return self.delta + (1.0 - 2.0 * self.delta) * ndtr(z)


def affine_term(scale=1.0, offset=0.0):
    return {"kind": "affine", "scale": scale, "offset": offset}


def exp_term(scale=1.0, rate=1.0):
    return {"kind": "exp", "scale": scale, "rate": rate}


def power_term(scale=1.0, degree=2):
    return {"kind": "power", "scale": scale, "degree": int(degree)}


@dataclass(frozen=True)
class StateSpaceLink(ObservationModel):
    """Fixed per-output links with independent additive noise.

    ``links`` holds, per output q, a list of term dicts (affine, exp,
    integer power) summed to give y_q = h_q(f_q) + noise_scale_q * eps.
    ``noise`` is "gaussian" or "student_t" (with ``noise_nu`` dof).
    Affine offsets may be marked trainable through ``free_offsets``.
    """

    links: tuple = ()
    noise_scales: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    noise: str = "gaussian"
    noise_nu: float = 6.0
    free_offsets: tuple = ()  # output indices with a trainable affine offset

    needs_mc = True

    def __post_init__(self):
        object.__setattr__(
            self, "noise_scales", np.atleast_1d(np.asarray(self.noise_scales, float))
        )
        if np.any(self.noise_scales <= 0):
            raise ParameterError("noise scales must be positive")
        if self.noise not in ("gaussian", "student_t"):
            raise ParameterError(f"unknown noise family: {self.noise!r}")
        links = tuple(tuple(dict(t) for t in terms) for terms in self.links)
        object.__setattr__(self, "links", links)

    @property
    def n_outputs(self):
        return len(self.links)

    def link_value(self, q, fq):
        total = np.zeros_like(np.asarray(fq, dtype=float))
        for t in self.links[q]:
            if t["kind"] == "affine":
                total = total + t["scale"] * fq + t["offset"]
            elif t["kind"] == "exp":
                total = total + t["scale"] * np.exp(t["rate"] * fq)
            elif t["kind"] == "power":
                total = total + t["scale"] * np.asarray(fq, float) ** t["degree"]
            else:
                raise ParameterError(f"unknown link term: {t['kind']!r}")
        return total

    def link_slope(self, q, fq):
        total = np.zeros_like(np.asarray(fq, dtype=float))
        for t in self.links[q]:
            if t["kind"] == "affine":
                total = total + t["scale"]
            elif t["kind"] == "exp":
                total = total + t["scale"] * t["rate"] * np.exp(t["rate"] * fq)
            elif t["kind"] == "power":
                k = t["degree"]
                total = total + t["scale"] * k * np.asarray(fq, float) ** (k - 1)
        return total

    def _noise_logpdf(self, u):
        if self.noise == "gaussian":
            return -0.5 * (u * u + LOG_2PI)
        nu = self.noise_nu
        return (
            gammaln((nu + 1.0) / 2.0)
            - gammaln(nu / 2.0)
            - 0.5 * math.log(nu * math.pi)
            - 0.5 * (nu + 1.0) * np.log1p(u * u / nu)
        )

    def _noise_score(self, u):
        # d/du log p(u)
        if self.noise == "gaussian":
            return -u
        nu = self.noise_nu
        return -(nu + 1.0) * u / (nu + u * u)

    def loglik(self, y, f, scale=None):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        f = np.atleast_1d(np.asarray(f, dtype=float))
        if not np.all(np.isfinite(f)):
            raise ParameterError("latent value must be finite")
        total = 0.0
        for q in range(self.n_outputs):
            s = self.noise_scales[q]
            u = (y[q] - self.link_value(q, f[q])) / s
            total += float(self._noise_logpdf(u)) - math.log(s)
        return total

    def grad_f(self, y, f, scale=None):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        f = np.atleast_1d(np.asarray(f, dtype=float))
        g = np.zeros_like(f)
        for q in range(self.n_outputs):
            s = self.noise_scales[q]
            u = (y[q] - self.link_value(q, f[q])) / s
            g[q] = float(self._noise_score(u)) * (-self.link_slope(q, f[q]) / s)
        return g

    # -- trainable affine offsets -----------------------------------------

    def get_params(self):
        vals = []
        for q in self.free_offsets:
            off = sum(t["offset"] for t in self.links[q] if t["kind"] == "affine")
            vals.append(off)
        return np.asarray(vals, dtype=float)

    def set_params(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        links = [list(dict(t) for t in terms) for terms in self.links]
        for val, q in zip(theta, self.free_offsets):
            placed = False
            for t in links[q]:
                if t["kind"] == "affine" and not placed:
                    t["offset"] = float(val)
                    placed = True
                elif t["kind"] == "affine":
                    t["offset"] = 0.0
            if not placed:
                links[q].append(affine_term(scale=0.0, offset=float(val)))
        return replace(self, links=tuple(tuple(t for t in l) for l in links))

    def grad_params(self, y, f, scale=None):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        f = np.atleast_1d(np.asarray(f, dtype=float))
        g = []
        for q in self.free_offsets:
            s = self.noise_scales[q]
            u = (y[q] - self.link_value(q, f[q])) / s
            # d loglik / d offset = score * d u / d offset = score * (-1/s)
            g.append(float(self._noise_score(u)) * (-1.0 / s))
        return np.asarray(g, dtype=float)


def gaussian_to_student_t_gap(nu, points):
    """Max |log t_nu - log N| over scalar points; sanity helper for tests."""
    t = StudentTObservation(nu=nu)
    gaps = []
    for p in points:
        lt = t.loglik([p], [0.0], scale=np.eye(1))
        ln = -0.5 * (p * p + LOG_2PI)
        gaps.append(abs(lt - ln))
    return max(gaps)


# -- variational scale-factor algebra (Student-t families) -----------------


def scale_factor_moments(nu, q, log_xi):
    """Moments of the inverse-Gamma variational factor for one datum.

    The factor is IG(a, a / xi^2) with a = (nu + q)/2.  Returns
    (E[alpha^-1], E[log alpha]) = (xi^2, -2 log xi + log a - digamma(a)).
    """
    from scipy.special import digamma

    a = 0.5 * (nu + q)
    xi2 = math.exp(2.0 * log_xi)
    return xi2, -2.0 * log_xi + math.log(a) - float(digamma(a))


def scale_factor_kl(nu, q, log_xi):
    """KL(q(alpha) || p(alpha)), elementwise over ``log_xi``.

    q = IG(a, a xi^-2) with a = (nu + q)/2, p = IG(nu/2, nu/2).
    """
    from scipy.special import digamma

    a = 0.5 * (nu + q)
    b0 = 0.5 * nu
    log_xi = np.asarray(log_xi, dtype=float)
    xi2 = np.exp(2.0 * log_xi)
    log_b = math.log(a) - 2.0 * log_xi
    e_log_alpha = log_b - float(digamma(a))
    log_q = a * log_b - float(gammaln(a)) - (a + 1.0) * e_log_alpha - a
    log_p = (
        b0 * math.log(b0)
        - float(gammaln(b0))
        - (b0 + 1.0) * e_log_alpha
        - b0 * xi2
    )
    out = log_q - log_p
    return float(out) if out.ndim == 0 else out
