"""Bayesian model abstraction and the Gamma-Poisson count model.

Parameters are handled as vectors throughout: a batch of ``n`` parameter
values has shape ``(n, d)`` and a batch of noiseless queries has shape
``(n, p)``. Only the prior sampler and the likelihood simulator are required;
the remaining callables unlock MCEM and Fisher-information estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln

from .mechanisms import AdditiveMechanism, ShapeError, mechanism_from_descriptor
from .rngkit import DomainError, as_generator, poisson_quantile, sample_gamma, sample_poisson


@dataclass(frozen=True)
class BayesModel:
    prior_sampler: Callable  # (rng, n) -> (n, d)
    prior_density: Callable  # (n, d) -> (n,)
    likelihood_simulator: Callable  # (theta (n, d), rng) -> (n, p)
    dim_theta: int = 1
    dim_s: int = 1
    likelihood_log_density: Optional[Callable] = None  # (s (n, p), theta (d,)) -> (n,)
    sufficient_stat: Optional[Callable] = None  # (n, p) -> (n, k)
    score: Optional[Callable] = None  # (s, theta) -> (n, d)
    score_jacobian: Optional[Callable] = None  # (s, theta) -> (n, d, d)
    # Inverse-CDF simulator at a single theta, (u (n, p), theta (d,)) -> (n, p).
    # Lets MCEM reuse one set of uniforms across iterations.
    likelihood_quantile: Optional[Callable] = None
    # Closed-form complete-data maximizer given E[b(s)], for exponential families.
    complete_data_mle: Optional[Callable] = None
    name: str = "model"


@dataclass(frozen=True)
class PrivatizedQuery:
    value: np.ndarray
    mechanism_descriptor: dict

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        object.__setattr__(self, "value", v)
        if v.ndim != 1 or v.shape[0] != int(self.mechanism_descriptor["p"]):
            raise ShapeError(
                f"query of length {v.shape} does not match mechanism dimension {self.mechanism_descriptor['p']}"
            )

    @classmethod
    def from_mechanism(cls, value, mech: AdditiveMechanism) -> "PrivatizedQuery":
        return cls(value, mech.descriptor())

    def mechanism(self) -> AdditiveMechanism:
        return mechanism_from_descriptor(self.mechanism_descriptor)


def gamma_poisson_model(alpha: float, beta: float) -> BayesModel:
    """Gamma(alpha, beta) prior (rate parametrization) on a Poisson mean."""
    if not (alpha > 0 and beta > 0):
        raise DomainError(f"hyperparameters must be positive, got alpha={alpha}, beta={beta}")
    log_norm = alpha * math.log(beta) - math.lgamma(alpha)

    def prior_sampler(rng, n):
        return np.asarray(sample_gamma(rng, alpha, beta, size=(int(n), 1)), dtype=float)

    def prior_density(theta):
        th = np.asarray(theta, dtype=float)[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = log_norm + (alpha - 1.0) * np.log(th) - beta * th
        return np.where(th > 0, np.exp(logp), 0.0)

    def simulator(theta, rng):
        th = np.asarray(theta, dtype=float)
        return sample_poisson(rng, th).astype(float)

    def log_density(s, theta):
        s = np.asarray(s, dtype=float)[..., 0]
        th = float(np.asarray(theta).reshape(-1)[0])
        return s * math.log(th) - th - gammaln(s + 1.0)

    def suff(s):
        return np.asarray(s, dtype=float)

    def score(s, theta):
        th = float(np.asarray(theta).reshape(-1)[0])
        return np.asarray(s, dtype=float) / th - 1.0

    def score_jac(s, theta):
        th = float(np.asarray(theta).reshape(-1)[0])
        s = np.asarray(s, dtype=float)
        return (-s / th**2)[..., None]

    def quantile(u, theta):
        th = float(np.asarray(theta).reshape(-1)[0])
        return poisson_quantile(u, th).astype(float)

    def mle(b_mean):
        return np.array([m_step_exact_poisson(float(np.asarray(b_mean).reshape(-1)[0]))])

    return BayesModel(
        prior_sampler=prior_sampler,
        prior_density=prior_density,
        likelihood_simulator=simulator,
        likelihood_log_density=log_density,
        sufficient_stat=suff,
        score=score,
        score_jacobian=score_jac,
        likelihood_quantile=quantile,
        complete_data_mle=mle,
        name=f"gamma-poisson(alpha={alpha}, beta={beta})",
    )


def m_step_exact_poisson(e_estimate: float) -> float:
    """Maximizer of ``E[s] log(theta) - theta``, which is ``E[s]`` itself."""
    if not e_estimate > 0:
        raise DomainError(f"the Poisson M-step needs a positive E-step estimate, got {e_estimate}")
    return float(e_estimate)


def simulate_pair(model: BayesModel, rng, n: int | None = None):
    """Joint draw(s) of ``(theta, s)`` from prior times likelihood.

    With ``n=None`` a single pair of 1-D arrays is returned, otherwise
    batches of ``n`` rows.
    """
    g = as_generator(rng)
    theta = model.prior_sampler(g, 1 if n is None else n)
    s = model.likelihood_simulator(theta, g)
    if n is None:
        return theta[0], s[0]
    return theta, s
