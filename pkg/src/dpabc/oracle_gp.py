"""Ground truth for the Gamma-Poisson model under the epsilon-Laplace mechanism.

Two independent routes to the posterior are provided: the closed form built
from integer-shape incomplete gamma functions, and a brute-force truncated sum
over the latent count. Both work in log space; the closed form folds the
``exp(theta * e**eps)`` factor into the finite incomplete-gamma sum before
anything is exponentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import minimize_scalar
from scipy.special import gammaln, logsumexp

from .rngkit import DomainError


class OracleError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GpSetting:
    alpha: float = 25.0
    beta: float = 1.0
    epsilon: float = 0.2
    s_obs: float = 37.4

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.epsilon > 0):
            raise DomainError("alpha, beta and epsilon must be positive")
        if not math.isfinite(self.s_obs):
            raise DomainError("s_obs must be finite")

    @property
    def bandwidth(self) -> float:
        return 1.0 / self.epsilon

    @property
    def n_ceil(self) -> int:
        return int(math.ceil(self.s_obs))


COUNT_SETTING = GpSetting()


# -- integer-shape incomplete gamma -------------------------------------------

def _log_partial_exp_sum(n: int, x) -> np.ndarray:
    """``log sum_{k<n} x**k / k!`` for n >= 1, elementwise in x >= 0."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = np.arange(n, dtype=float)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        logx = np.log(x)[None, :]
        terms = np.where(k == 0, 0.0, k * logx) - gammaln(k + 1.0)
    return logsumexp(terms, axis=0)


def log_upper_incomplete_gamma_int(n: int, x) -> np.ndarray:
    """Log of the regularized upper incomplete gamma ``Gamma(n, x) / Gamma(n)``."""
    if int(n) != n or n < 1:
        raise DomainError(f"shape must be a positive integer, got {n}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0):
        raise DomainError("x must be nonnegative")
    return -x + _log_partial_exp_sum(int(n), x)


def upper_incomplete_gamma_int(n: int, x):
    """Regularized ``Gamma(n, x) / Gamma(n)`` via the exact finite Poisson sum."""
    out = np.exp(log_upper_incomplete_gamma_int(n, x))
    return float(out[0]) if np.ndim(x) == 0 else out


def log_lower_incomplete_gamma_int(n: int, x) -> np.ndarray:
    """Log of ``gamma(n, x) / Gamma(n)`` for integer n; zero (log 0 = 0) when n <= 0.

    Summed as the Poisson upper tail ``e**-x sum_{k>=n} x**k/k!`` so no
    cancellation occurs when the value is tiny.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if n <= 0:
        return np.zeros_like(x)
    xmax = float(np.max(x)) if x.size else 0.0
    kmax = max(int(n), int(math.ceil(xmax + 12.0 * math.sqrt(xmax) + 50.0))) + 50
    k = np.arange(int(n), kmax + 1, dtype=float)[:, None]
    with np.errstate(divide="ignore"):
        logx = np.log(x)[None, :]
    terms = k * logx - gammaln(k + 1.0)
    out = -x + logsumexp(terms, axis=0)
    return np.where(x == 0, -np.inf, out)


# -- posterior, two routes ------------------------------------------------------

def log_posterior_unnorm_eq10(setting: GpSetting, theta) -> np.ndarray:
    """Closed-form unnormalized log posterior at ``theta`` (any shape)."""
    th = np.asarray(theta, dtype=float)
    flat = th.reshape(-1)
    if np.any(flat <= 0):
        raise DomainError("theta must be positive")
    a, b, eps, so = setting.alpha, setting.beta, setting.epsilon, setting.s_obs
    n = setting.n_ceil
    t_plus = flat * math.exp(eps)
    t_minus = flat * math.exp(-eps)
    # Gamma-term: Q(n, t+) e^{t+} = sum_{k<n} t+^k / k!; empty when n <= 0
    if n >= 1:
        log_first = _log_partial_exp_sum(n, t_plus) - eps * so
    else:
        log_first = np.full(flat.shape, -np.inf)
    log_second = log_lower_incomplete_gamma_int(n, t_minus) + t_minus + eps * so
    log_bracket = np.logaddexp(log_first, log_second)
    out = (a - 1.0) * np.log(flat) - (b + 1.0) * flat + log_bracket
    if not np.all(np.isfinite(out)):
        raise OracleError(f"non-finite log posterior for setting {setting}")
    return out.reshape(th.shape)


def _relative_exp(logv: np.ndarray):
    logv = np.asarray(logv)
    return np.exp(logv - np.max(logv))


def posterior_unnorm_eq10(setting: GpSetting, theta) -> np.ndarray:
    """Closed-form posterior up to a constant, scaled so its max over ``theta`` is 1."""
    return _relative_exp(log_posterior_unnorm_eq10(setting, theta))


def brute_force_smax(theta_max: float, s_obs: float) -> int:
    return int(max(math.ceil(theta_max + 12.0 * math.sqrt(theta_max) + 50.0), math.ceil(s_obs) + 50))


def _log_latent_sum(setting: GpSetting, flat: np.ndarray, smax: int | None = None) -> np.ndarray:
    """``log sum_s Pois(s | theta) (eps/2) exp(-eps |s_obs - s|)`` for each theta."""
    if smax is None:
        smax = brute_force_smax(float(np.max(flat)), setting.s_obs)
    s = np.arange(smax + 1, dtype=float)[:, None]
    eps = setting.epsilon
    terms = (
        s * np.log(flat)[None, :]
        - flat[None, :]
        - gammaln(s + 1.0)
        + math.log(eps / 2.0)
        - eps * np.abs(setting.s_obs - s)
    )
    return logsumexp(terms, axis=0)


def log_brute_force_unnorm(setting: GpSetting, theta, smax: int | None = None) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    flat = th.reshape(-1)
    if np.any(flat <= 0):
        raise DomainError("theta must be positive")
    prior = stats.gamma.logpdf(flat, setting.alpha, scale=1.0 / setting.beta)
    return (prior + _log_latent_sum(setting, flat, smax)).reshape(th.shape)


def brute_force_unnorm(setting: GpSetting, theta, smax: int | None = None) -> np.ndarray:
    return _relative_exp(log_brute_force_unnorm(setting, theta, smax))


# -- grids -------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityGrid:
    theta: np.ndarray
    values: np.ndarray
    normalized: bool
    label: str = ""

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.theta))

    def cdf_values(self) -> np.ndarray:
        inc = 0.5 * (self.values[1:] + self.values[:-1]) * np.diff(self.theta)
        c = np.concatenate([[0.0], np.cumsum(inc)])
        return c / c[-1]

    def cdf(self, x) -> np.ndarray:
        return np.interp(x, self.theta, self.cdf_values(), left=0.0, right=1.0)

    def inverse_cdf(self, q) -> np.ndarray:
        c = self.cdf_values()
        # cdf is flat where density underflows to zero; keep strictly increasing knots
        keep = np.concatenate([[True], np.diff(c) > 0])
        return np.interp(q, c[keep], self.theta[keep])

    def moment(self, k: int = 1, central: bool = False) -> float:
        w = self.values / self.mass
        if central:
            m = float(np.trapezoid(self.theta * w, self.theta))
            return float(np.trapezoid((self.theta - m) ** k * w, self.theta))
        return float(np.trapezoid(self.theta**k * w, self.theta))

    def mean(self) -> float:
        return self.moment(1)

    def variance(self) -> float:
        return self.moment(2, central=True)


def normalize_on_grid(f, lo: float, hi: float, n_points: int = 20001, label: str = "") -> DensityGrid:
    """Evaluate ``f`` on a uniform grid and normalize it by the trapezoid rule.

    ``f`` receives the whole grid at once. Use :func:`normalize_log_on_grid`
    for functions known only in log space.
    """
    if not lo < hi:
        raise DomainError(f"need lo < hi, got [{lo}, {hi}]")
    theta = np.linspace(lo, hi, int(n_points))
    v = np.asarray(f(theta), dtype=float)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise OracleError("density values must be finite and nonnegative")
    mass = float(np.trapezoid(v, theta))
    if mass <= 0:
        raise OracleError("density integrates to zero on the grid")
    return DensityGrid(theta, v / mass, True, label)


def normalize_log_on_grid(logf, lo, hi, n_points: int = 20001, label: str = "") -> DensityGrid:
    return normalize_on_grid(lambda t: _relative_exp(logf(t)), lo, hi, n_points, label)


def naive_conjugate_posterior(setting: GpSetting) -> tuple[float, float]:
    """Gamma(shape, rate) posterior obtained by treating ``s_obs`` as a noiseless count."""
    shape = setting.alpha + setting.s_obs
    if shape <= 0:
        raise DomainError(f"alpha + s_obs must be positive, got {shape}")
    return shape, setting.beta + 1.0


def default_grid(setting: GpSetting) -> tuple[float, float]:
    """Grid bounds covering the prior and the noiseless-likelihood regions."""
    prior = stats.gamma(setting.alpha, scale=1.0 / setting.beta)
    lo, hi = prior.ppf(1e-4), prior.ppf(1 - 1e-4)
    if setting.alpha + setting.s_obs > 0:
        shape, rate = naive_conjugate_posterior(setting)
        naive = stats.gamma(shape, scale=1.0 / rate)
        lo, hi = min(lo, naive.ppf(1e-4)), max(hi, naive.ppf(1 - 1e-4))
        # the Laplace tail lets the likelihood reach well beyond s_obs
        hi = max(hi, setting.s_obs + 12.0 * math.sqrt(max(setting.s_obs, 1.0)))
    pad = 0.2 * (hi - lo)
    return max(1e-6, lo - pad), hi + pad


def true_posterior_grid(setting: GpSetting, lo=None, hi=None, n_points: int = 20001) -> DensityGrid:
    if lo is None or hi is None:
        lo, hi = default_grid(setting)
    return normalize_log_on_grid(lambda t: log_posterior_unnorm_eq10(setting, t), lo, hi, n_points, "true_posterior")


def figure_grids(setting: GpSetting, n_points: int = 20001) -> dict[str, DensityGrid]:
    """Prior, naive conjugate and true posterior on one shared grid."""
    lo, hi = default_grid(setting)
    shape, rate = naive_conjugate_posterior(setting)
    return {
        "prior": normalize_on_grid(
            lambda t: stats.gamma.pdf(t, setting.alpha, scale=1.0 / setting.beta), lo, hi, n_points, "prior"
        ),
        "naive": normalize_on_grid(lambda t: stats.gamma.pdf(t, shape, scale=1.0 / rate), lo, hi, n_points, "naive"),
        "true_posterior": true_posterior_grid(setting, lo, hi, n_points),
    }


# -- evidence and marginal likelihood ----------------------------------------------

def log_evidence(setting: GpSetting, proper: bool = False) -> float:
    """Log marginal probability of ``s_obs`` under prior times likelihood.

    The prior predictive of ``s`` is negative binomial, so the integral over
    theta is exact and only the latent count is summed. With
    ``proper=False`` the kernel is ``eta((s_obs - s)/h)`` without the
    ``1/h`` Jacobian, matching the rejection sampler's acceptance rule.
    """
    a, b, eps, so = setting.alpha, setting.beta, setting.epsilon, setting.s_obs
    mean = a / b
    sd = math.sqrt(a / b + a / b**2)
    smax = int(max(math.ceil(mean + 40 * sd + 100), math.ceil(so) + 100))
    s = np.arange(smax + 1, dtype=float)
    log_nb = stats.nbinom.logpmf(s, a, b / (b + 1.0))
    log_eta = math.log(0.5) - eps * np.abs(so - s)
    if proper:
        log_eta = log_eta + math.log(eps)
    return float(logsumexp(log_nb + log_eta))


def marginal_loglik(setting: GpSetting, theta) -> np.ndarray | float:
    """Observed-data log likelihood ``log sum_s Pois(s|theta) eta_obs(s_obs|s)``."""
    th = np.asarray(theta, dtype=float)
    flat = th.reshape(-1)
    if np.any(flat <= 0):
        raise DomainError("theta must be positive")
    out = _log_latent_sum(setting, flat)
    return float(out[0]) if th.ndim == 0 else out.reshape(th.shape)


def marginal_loglik_derivatives(setting: GpSetting, theta: float, rel_step: float = 1e-4) -> tuple[float, float]:
    """Central-difference first and second derivatives of :func:`marginal_loglik`."""
    h = rel_step * theta
    f0, fp, fm = marginal_loglik(setting, np.array([theta, theta + h, theta - h]))
    return (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h**2


@dataclass(frozen=True)
class MleOracle:
    argmax: float
    neg_second_derivative: float


def mle_oracle(setting: GpSetting, lo: float = 1.0, hi: float = 100.0) -> MleOracle:
    res = minimize_scalar(
        lambda t: -marginal_loglik(setting, t), bounds=(lo, hi), method="bounded", options={"xatol": 1e-10}
    )
    t = float(res.x)
    _, d2 = marginal_loglik_derivatives(setting, t)
    return MleOracle(t, -d2)


def conditional_mean_s(setting: GpSetting, theta: float) -> float:
    """``E(s | s_obs, theta)`` by truncated summation over the latent count."""
    smax = brute_force_smax(theta, setting.s_obs)
    s = np.arange(smax + 1, dtype=float)
    lw = s * math.log(theta) - theta - gammaln(s + 1.0) - setting.epsilon * np.abs(setting.s_obs - s)
    w = np.exp(lw - lw.max())
    return float(np.sum(w * s) / np.sum(w))


def eta_obs_moments(setting: GpSetting, theta: float) -> tuple[float, float]:
    """``E eta_obs`` (the likelihood of ``s_obs``) and ``E eta_obs**2`` under ``s ~ Pois(theta)``."""
    smax = brute_force_smax(theta, setting.s_obs)
    s = np.arange(smax + 1, dtype=float)
    log_pois = s * math.log(theta) - theta - gammaln(s + 1.0)
    log_eta = math.log(setting.epsilon / 2.0) - setting.epsilon * np.abs(setting.s_obs - s)
    return float(np.exp(logsumexp(log_pois + log_eta))), float(np.exp(logsumexp(log_pois + 2 * log_eta)))


def ks_statistic(samples, cdf) -> float:
    """One-sample Kolmogorov-Smirnov distance between ``samples`` and ``cdf``."""
    return float(stats.kstest(np.asarray(samples, dtype=float).reshape(-1), cdf).statistic)


def ks_threshold(n: int, alpha: float = 1e-3) -> float:
    """Critical KS distance at significance ``alpha`` for ``n`` samples."""
    return float(stats.kstwo.ppf(1.0 - alpha, int(n)))
