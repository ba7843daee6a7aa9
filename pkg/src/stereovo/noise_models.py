"""Feature-noise models under one probabilistic cost.

Every model contributes a per-measurement cost rho(e) in nats; a model with
density p(e) = exp(-rho(e)) / Z turns robust estimation into (approximate)
maximum likelihood, and the total objective over measurements is

    E = sum_i w_i * rho(e_i) + normalization(model),

where the normalization only matters when model parameters are optimized
(the Cauchy covariance); constant partition terms are dropped from costs and
available separately through log_partition().

The a-contrario model (AcRansac) is the exception: it scores a hypothesis by
its Number of False Alarms over the whole residual set rather than by a sum
of per-error costs, so rho()/total_cost() reject it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln

from .errors import NoValidModel
from .geometry import StereoCalibration

DEFAULT_INLIER_THRESHOLD = 2.79  # pixels; 95% chi-square(3) bound at sigma=1


@dataclass(frozen=True)
class Ransac:
    """Top-hat inlier model: rho = 0 inside the threshold, 1 outside."""

    threshold: float = 2.0

    def __post_init__(self) -> None:
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class Msac:
    """Truncated quadratic: rho = min(||e||^2, T^2)."""

    threshold: float = 2.0

    def __post_init__(self) -> None:
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class Mlesac:
    """Gaussian-plus-uniform mixture with inlier ratio gamma.

    cov is the (fixed) inlier covariance, nu the volume of the uniform
    outlier domain, gamma the mixture weight of the inlier component
    (typically re-estimated per hypothesis by EM, starting from this value).
    """

    cov: np.ndarray
    nu: float
    gamma: float = 0.5

    def __post_init__(self) -> None:
        cov = np.array(self.cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("cov must be square")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("cov must be symmetric")
        if np.any(np.linalg.eigvalsh(cov) <= 0.0):
            raise ValueError("cov must be positive definite")
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)
        if self.nu <= 0.0:
            raise ValueError("outlier domain volume nu must be positive")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.cov.shape[0]


@dataclass(frozen=True)
class Amlesac(Mlesac):
    """Mlesac whose covariance is additionally re-estimated per hypothesis."""


@dataclass(frozen=True)
class AcRansac:
    """A-contrario model scored by the Number of False Alarms.

    alpha0 is the probability that a random correspondence has reprojection
    error of at most one pixel under the background model; epsilon the NFA
    acceptance level; min_sample the minimal-sample size Ns; dim the error
    dimension d.
    """

    alpha0: float
    epsilon: float = 1.0
    min_sample: int = 4
    dim: int = 3

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha0 <= 1.0):
            raise ValueError("alpha0 must lie in (0, 1]")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.min_sample < 3:
            raise ValueError("min_sample must be at least 3")
        if self.dim < 1:
            raise ValueError("dim must be positive")


@dataclass(frozen=True)
class PseudoHuber:
    """Smooth quadratic-to-linear kernel: rho = 2 b^2 (sqrt(1+||e||^2/b^2)-1).

    threshold is not part of rho; it is the inlier classification bound used
    by the direct (sample-free) initializer built on this kernel.
    """

    b: float = 2.0
    threshold: float = DEFAULT_INLIER_THRESHOLD

    def __post_init__(self) -> None:
        if self.b <= 0.0:
            raise ValueError("shape parameter b must be positive")
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class Gaussian:
    """Plain quadratic cost rho = ||e||^2 (unit isotropic covariance)."""


@dataclass(frozen=True)
class Cauchy:
    """Heavy-tailed cost rho = log(1 + e^T Sigma^-1 e).

    Parameterized by the square-root information matrix: sqrt_info is lower
    triangular with positive diagonal and Sigma^-1 = sqrt_info^T @ sqrt_info.
    """

    sqrt_info: np.ndarray

    def __post_init__(self) -> None:
        L = np.array(self.sqrt_info, dtype=np.float64)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("sqrt_info must be square")
        if np.max(np.abs(np.triu(L, 1))) != 0.0:
            raise ValueError("sqrt_info must be lower triangular")
        if np.any(np.diag(L) <= 0.0):
            raise ValueError("sqrt_info must have a positive diagonal")
        L.setflags(write=False)
        object.__setattr__(self, "sqrt_info", L)

    @classmethod
    def identity(cls, dim: int) -> "Cauchy":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.sqrt_info.shape[0]

    def log_det_sigma(self) -> float:
        """log|Sigma| = -log|Sigma^-1| = -2 sum(log diag(sqrt_info))."""
        return float(-2.0 * np.sum(np.log(np.diag(self.sqrt_info))))


NoiseModel = Union[Ransac, Msac, Mlesac, Amlesac, AcRansac, PseudoHuber,
                   Gaussian, Cauchy]


@dataclass(frozen=True)
class CostBreakdown:
    data_cost: float
    normalization_cost: float

    @property
    def total(self) -> float:
        return self.data_cost + self.normalization_cost


def _sqnorms(e: np.ndarray) -> np.ndarray:
    return np.sum(e * e, axis=-1)


def _gaussian_density(e: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """N(e; 0, cov) along the last axis; rows with non-finite e get 0."""
    d = cov.shape[0]
    cov_inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    finite = np.all(np.isfinite(e), axis=-1)
    e_safe = np.where(finite[..., None], e, 0.0)
    m2 = np.einsum("...i,ij,...j->...", e_safe, cov_inv, e_safe)
    log_norm = 0.5 * (d * np.log(2.0 * np.pi) + logdet)
    g = np.exp(-0.5 * m2 - log_norm)
    return np.where(finite, g, 0.0)


def rho(model: NoiseModel, e) -> float | np.ndarray:
    """Per-measurement cost in nats; accepts one (d,) error or a (..., d) stack."""
    e = np.asarray(e, dtype=float)
    single = e.ndim == 1
    if isinstance(model, AcRansac):
        raise TypeError("AcRansac is scored by NFA over a residual set, "
                        "not by a per-error cost")
    if isinstance(model, Ransac):
        out = np.where(_sqnorms(e) < model.threshold ** 2, 0.0, 1.0)
    elif isinstance(model, Msac):
        out = np.minimum(_sqnorms(e), model.threshold ** 2)
    elif isinstance(model, PseudoHuber):
        b2 = model.b * model.b
        out = 2.0 * b2 * (np.sqrt(1.0 + _sqnorms(e) / b2) - 1.0)
    elif isinstance(model, Gaussian):
        out = _sqnorms(e)
    elif isinstance(model, Cauchy):
        if e.shape[-1] != model.dim:
            raise ValueError("error dimension does not match sqrt_info")
        out = np.log1p(_sqnorms(e @ model.sqrt_info.T))
    elif isinstance(model, Mlesac):  # covers Amlesac
        if e.shape[-1] != model.dim:
            raise ValueError("error dimension does not match cov")
        g = _gaussian_density(e, model.cov)
        out = -np.log(model.gamma * g + (1.0 - model.gamma) / model.nu)
    else:
        raise TypeError(f"unknown noise model {type(model).__name__}")
    return float(out) if single else out


def total_cost(model: NoiseModel, errors, weights=None) -> CostBreakdown:
    """Weighted sum of rho over (N, d) errors plus the model normalization.

    normalization_cost carries only parameter-dependent terms: it is
    N/(d+1) * log|Sigma| for Cauchy and 0 for every fixed model (constant
    partition terms are dropped; see log_partition for the true constants).
    """
    errors = np.asarray(errors, dtype=float)
    if errors.ndim != 2:
        raise ValueError("errors must be an (N, d) array")
    costs = rho(model, errors)
    if weights is None:
        data = float(np.sum(costs))
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (errors.shape[0],):
            raise ValueError("weights must be an (N,) array")
        if np.any(weights < 0.0):
            raise ValueError("weights must be non-negative")
        data = float(np.sum(weights * costs))
    norm = 0.0
    if isinstance(model, Cauchy):
        n, d = errors.shape
        norm = n / (d + 1.0) * model.log_det_sigma()
    return CostBreakdown(data, norm)


def prob_of_cost(rho_value, log_partition_value: float):
    """Density exp(-rho)/Z for a cost value and the model's log partition."""
    return np.exp(-np.asarray(rho_value, dtype=float) - log_partition_value)


def _log_sphere_area(d: int) -> float:
    """log surface area of the unit (d-1)-sphere embedded in R^d."""
    return float(np.log(2.0) + (d / 2.0) * np.log(np.pi) - gammaln(d / 2.0))


def _log_ball_volume(d: int, radius: float) -> float:
    return float((d / 2.0) * np.log(np.pi) - gammaln(d / 2.0 + 1.0)
                 + d * np.log(radius))


def log_partition(model: NoiseModel, dim: int, *, domain_volume=None,
                  radius=None) -> float:
    """log of Z = integral of exp(-rho(e)) over the error domain.

    Models with flat tails (Ransac, Msac) are only normalizable over a finite
    domain and require domain_volume (which must contain the inlier ball).
    Cauchy requires a truncation radius, measured in whitened units
    ||sqrt_info @ e||. Gaussian and PseudoHuber integrate over all of R^dim
    unless radius is given. Mlesac densities integrate to 1 by construction.
    """
    if isinstance(model, Gaussian):
        if radius is None:
            return float(dim / 2.0) * np.log(np.pi)
        val, _ = quad(lambda r: r ** (dim - 1) * np.exp(-r * r), 0.0, radius)
        return float(_log_sphere_area(dim) + np.log(val))
    if isinstance(model, Cauchy):
        if model.dim != dim:
            raise ValueError("dim does not match sqrt_info")
        if radius is None:
            raise ValueError("Cauchy partition needs a truncation radius")
        val, _ = quad(lambda r: r ** (dim - 1) / (1.0 + r * r), 0.0, radius)
        return float(model.log_det_sigma() / 2.0
                     + _log_sphere_area(dim) + np.log(val))
    if isinstance(model, PseudoHuber):
        b2 = model.b * model.b
        upper = np.inf if radius is None else radius
        val, _ = quad(lambda r: r ** (dim - 1) * np.exp(
            -2.0 * b2 * (np.sqrt(1.0 + r * r / b2) - 1.0)), 0.0, upper)
        return float(_log_sphere_area(dim) + np.log(val))
    if isinstance(model, Mlesac):
        return 0.0
    if isinstance(model, (Ransac, Msac)):
        if domain_volume is None:
            raise ValueError(f"{type(model).__name__} is not normalizable "
                             "without a finite domain_volume")
        t = model.threshold
        ball = np.exp(_log_ball_volume(dim, t))
        if domain_volume < ball:
            raise ValueError("domain_volume smaller than the inlier ball")
        if isinstance(model, Ransac):
            z = ball + (domain_volume - ball) * np.exp(-1.0)
        else:
            val, _ = quad(lambda r: r ** (dim - 1) * np.exp(-r * r), 0.0, t)
            z = (np.exp(_log_sphere_area(dim)) * val
                 + (domain_volume - ball) * np.exp(-t * t))
        return float(np.log(z))
    raise TypeError(f"no partition function for {type(model).__name__}")


def mlesac_estimate_gamma(errors, cov, nu, gamma0: float = 0.5, *,
                          tol: float = 1e-6, max_iter: int = 100) -> float:
    """EM estimate of the inlier ratio of a Gaussian+uniform mixture.

    errors: (N, d) residuals; cov: fixed inlier covariance; nu: outlier
    domain volume. Iterates responsibilities/ratio until |delta gamma| < tol
    or max_iter, starting at gamma0. The result is clamped to [0, 1].
    """
    errors = np.asarray(errors, dtype=float).reshape(-1, np.shape(cov)[0])
    g = _gaussian_density(errors, np.asarray(cov, dtype=float))
    gamma = float(gamma0)
    for _ in range(max_iter):
        gam = np.clip(gamma, 1e-12, 1.0 - 1e-12)
        num = gam * g
        r = num / (num + (1.0 - gam) / nu)
        new = float(np.mean(r))
        done = abs(new - gamma) < tol
        gamma = new
        if done:
            break
    return float(np.clip(gamma, 0.0, 1.0))


def amlesac_estimate(errors, cov0, nu, gamma0: float = 0.5, *,
                     tol: float = 1e-6, max_iter: int = 100,
                     eig_floor: float = 1e-4):
    """EM estimate of both the inlier ratio and the inlier covariance.

    Same mixture and stopping rule as mlesac_estimate_gamma, with an M-step
    covariance update from responsibility-weighted outer products. The
    covariance eigenvalues are floored at eig_floor to keep it well
    conditioned. Returns (gamma, cov).
    """
    errors = np.asarray(errors, dtype=float).reshape(-1, np.shape(cov0)[0])
    finite = np.all(np.isfinite(errors), axis=-1)
    e_safe = np.where(finite[:, None], errors, 0.0)
    cov = np.array(cov0, dtype=np.float64)
    gamma = float(gamma0)
    for _ in range(max_iter):
        g = _gaussian_density(errors, cov)
        gam = np.clip(gamma, 1e-12, 1.0 - 1e-12)
        num = gam * g
        r = num / (num + (1.0 - gam) / nu)
        r = np.where(finite, r, 0.0)
        new = float(np.mean(r))
        mass = float(np.sum(r))
        if mass > 0.0:
            cov = (r[:, None] * e_safe).T @ e_safe / mass
            vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
            vals = np.maximum(vals, eig_floor)
            cov = (vecs * vals) @ vecs.T
            # the reconstruction rounds asymmetrically at large magnitudes
            cov = 0.5 * (cov + cov.T)
        done = abs(new - gamma) < tol
        gamma = new
        if done:
            break
    return float(np.clip(gamma, 0.0, 1.0)), cov


def _log_comb(n, k):
    n = np.asarray(n, dtype=float)
    k = np.asarray(k, dtype=float)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


_MIN_ERROR = 1e-12


def nfa(sorted_errors, q: int, n: int, ns: int, d: int, alpha0: float) -> float:
    """log Number of False Alarms for the q smallest of n residual norms.

    sorted_errors must be ascending residual norms (pixels). Exact zeros are
    clamped at 1e-12 before the log.
    """
    if not ns < q <= n:
        raise ValueError(f"require ns < q <= n, got ns={ns} q={q} n={n}")
    sorted_errors = np.asarray(sorted_errors, dtype=float)
    if sorted_errors.shape[0] < q:
        raise ValueError("fewer errors than q")
    e_q = max(float(sorted_errors[q - 1]), _MIN_ERROR)
    return float(np.log(n - ns) + _log_comb(n, q) + _log_comb(q, ns)
                 + (q - ns) * (d * np.log(e_q) + np.log(alpha0)))


def best_nfa(sorted_errors, n: int, ns: int, d: int, alpha0: float,
             epsilon: float | None = None):
    """Minimize log-NFA over q in (ns, n]; returns (q, log_nfa, threshold).

    threshold is the q-th smallest residual norm, the adaptive inlier bound.
    When epsilon is given, raises NoValidModel if min log-NFA > log(epsilon).
    """
    sorted_errors = np.asarray(sorted_errors, dtype=float)
    if sorted_errors.shape[0] != n:
        raise ValueError("sorted_errors must have length n")
    if n <= ns:
        raise ValueError("need more residuals than the minimal sample size")
    qs = np.arange(ns + 1, n + 1)
    e_q = np.maximum(sorted_errors[qs - 1], _MIN_ERROR)
    log_nfa = (np.log(n - ns) + _log_comb(n, qs) + _log_comb(qs, ns)
               + (qs - ns) * (d * np.log(e_q) + np.log(alpha0)))
    i = int(np.argmin(log_nfa))
    best = float(log_nfa[i])
    if epsilon is not None and best > np.log(epsilon):
        raise NoValidModel(f"min log-NFA {best:.3g} > log eps "
                           f"{np.log(epsilon):.3g}")
    return int(qs[i]), best, float(sorted_errors[qs[i] - 1])


def alpha0_stereo(calib: StereoCalibration) -> float:
    """Background-model probability of a <=1 pixel stereo error.

    Ratio of the volume of the unit ball in (ul, ur, v) error space to the
    volume of the reachable measurement domain, image area times disparity
    range: 4*pi / (3 * W * H * D).
    """
    return float(4.0 * np.pi / (3.0 * calib.image_width * calib.image_height
                                * calib.disparity_range))
