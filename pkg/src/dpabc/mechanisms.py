"""Sensitivity calculus and additive perturbation mechanisms.

An additive mechanism releases ``S = s + h * u`` where ``u`` has a known
zero-mean density ``eta`` and ``h`` is the bandwidth. Mechanisms are immutable;
they carry enough metadata to be serialized and rebuilt from JSON so that any
inference run can check it is using the mechanism that produced the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rngkit import sample_standard_laplace, sample_standard_normal

# The smooth-sensitivity smoothing rate is eps / (4 * (d + log(2/delta))).
# ``d`` is read as the query dimension p; change it here if that reading is wrong.
XI_DIMENSION_TERM: Callable[[int], float] = lambda p: float(p)


class MechanismError(ValueError):
    pass


class BudgetMismatchError(MechanismError):
    pass


class DegenerateSensitivityError(MechanismError):
    pass


class UnverifiableSensitivityError(MechanismError):
    pass


class IncompleteProfileError(MechanismError):
    pass


class ShapeError(MechanismError):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise MechanismError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (0.0 <= self.delta < 1.0):
            raise MechanismError(f"delta must lie in [0, 1), got {self.delta}")

    @property
    def pure(self) -> bool:
        return self.delta == 0.0


@dataclass(frozen=True)
class SensitivityProfile:
    """Sensitivity information for one query.

    ``radius_max(k)`` is the largest local sensitivity over datasets at
    Hamming distance ``k`` from the data at hand; it may return ``None`` for
    radii the caller cannot bound.
    """

    global_: float | None = None
    local_at: Callable[[object], float] | None = None
    radius_max: Callable[[int], float | None] | None = None

    @classmethod
    def counting_query(cls) -> "SensitivityProfile":
        return cls(global_=1.0, local_at=lambda x: 1.0, radius_max=lambda k: 1.0)

    @classmethod
    def from_sequence(cls, values, global_: float | None = None) -> "SensitivityProfile":
        vals = [float(v) for v in values]
        return cls(
            global_=global_,
            local_at=lambda x: vals[0],
            radius_max=lambda k: vals[k] if 0 <= k < len(vals) else None,
        )


def smooth_sensitivity(profile: SensitivityProfile, xi: float, k_max: int) -> tuple[float, bool]:
    """Smooth sensitivity ``max_k exp(-xi k) A(k)`` truncated at ``k_max``.

    Returns the value and a flag telling whether the truncation is provably
    harmless, i.e. ``exp(-xi k_max) * GS`` does not exceed the value found.
    """
    if not xi > 0:
        raise MechanismError(f"xi must be positive, got {xi}")
    if profile.radius_max is None:
        raise IncompleteProfileError("profile has no radius_max function")
    best = 0.0
    for k in range(int(k_max) + 1):
        a = profile.radius_max(k)
        if a is None:
            raise IncompleteProfileError(f"radius_max undefined at k={k}")
        if a < 0:
            raise MechanismError(f"radius_max({k}) = {a} is negative")
        best = max(best, math.exp(-xi * k) * a)
    if profile.global_ is None:
        valid = False
    else:
        valid = math.exp(-xi * k_max) * profile.global_ <= best
    return best, valid


def smoothing_rate(budget: PrivacyBudget, p: int) -> float:
    return budget.epsilon / (4.0 * (XI_DIMENSION_TERM(p) + math.log(2.0 / budget.delta)))


@dataclass(frozen=True)
class NoiseKernel:
    """A zero-mean product noise density on R^p.

    ``log_density`` maps an ``(n, p)`` (or ``(p,)``) array to log densities;
    ``mode_density`` is the maximum of the density.
    """

    name: str
    log_density: Callable[[np.ndarray], np.ndarray]
    mode_density: float
    sampler: Callable[..., np.ndarray]
    dimension: int

    def density(self, u) -> np.ndarray:
        return np.exp(self.log_density(u))


def _laplace_logpdf(u):
    u = np.asarray(u, dtype=float)
    return np.sum(-np.abs(u) - math.log(2.0), axis=-1)


def _normal_logpdf(u):
    u = np.asarray(u, dtype=float)
    return np.sum(-0.5 * u * u - 0.5 * math.log(2.0 * math.pi), axis=-1)


def laplace_kernel(p: int) -> NoiseKernel:
    return NoiseKernel("laplace", _laplace_logpdf, 0.5**p, sample_standard_laplace, int(p))


def gaussian_kernel(p: int) -> NoiseKernel:
    return NoiseKernel("gaussian", _normal_logpdf, (2.0 * math.pi) ** (-p / 2.0), sample_standard_normal, int(p))


_KERNELS = {"laplace-eps": laplace_kernel, "laplace-smooth": laplace_kernel, "gaussian": gaussian_kernel}


@dataclass(frozen=True)
class GeneralMechanism:
    """Arbitrary perturbation mechanism given by its conditional density.

    ``conditional_density(s_obs, s)`` is vectorized over rows of ``s`` and
    ``density_bound`` must dominate it.
    """

    conditional_density: Callable[[np.ndarray, np.ndarray], np.ndarray]
    density_bound: float
    sampler: Callable[..., np.ndarray]
    descriptor: dict | None = None

    def __post_init__(self):
        if not self.density_bound > 0:
            raise MechanismError("density_bound must be positive")


@dataclass(frozen=True)
class AdditiveMechanism:
    kernel: NoiseKernel
    bandwidth: float
    budget: PrivacyBudget
    label: str
    sensitivity: float = field(default=1.0)

    def __post_init__(self):
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise DegenerateSensitivityError(f"bandwidth must be positive and finite, got {self.bandwidth}")

    @property
    def dimension(self) -> int:
        return self.kernel.dimension

    def _scaled(self, s_obs, s) -> np.ndarray:
        s_obs = np.asarray(s_obs, dtype=float).reshape(-1)
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.dimension or s_obs.shape[0] != self.dimension:
            raise ShapeError(f"expected trailing dimension {self.dimension}")
        return (s_obs - s) / self.bandwidth

    def log_kernel(self, s_obs, s) -> np.ndarray:
        """``log eta((s_obs - s) / h)``, without the ``h**-p`` Jacobian."""
        return self.kernel.log_density(self._scaled(s_obs, s))

    def log_obs_density(self, s_obs, s) -> np.ndarray:
        """Proper conditional log density of ``s_obs`` given ``s``."""
        return self.log_kernel(s_obs, s) - self.dimension * math.log(self.bandwidth)

    def perturb(self, s, rng) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[-1:] != (self.dimension,):
            raise ShapeError(f"query has shape {s.shape}, mechanism dimension is {self.dimension}")
        if s.ndim == 1:
            return s + self.bandwidth * self.kernel.sampler(rng, self.dimension)
        return s + self.bandwidth * self.kernel.sampler(rng, self.dimension, size=s.shape[0])

    def as_general(self) -> GeneralMechanism:
        """View as a general mechanism using the unnormalized kernel convention."""
        return GeneralMechanism(
            conditional_density=lambda s_obs, s: np.exp(self.log_kernel(s_obs, s)),
            density_bound=self.kernel.mode_density,
            sampler=lambda rng, s: self.perturb(s, rng),
            descriptor=self.descriptor(),
        )

    def descriptor(self) -> dict:
        return {
            "kind": self.label,
            "epsilon": self.budget.epsilon,
            "delta": self.budget.delta,
            "gs": self.sensitivity,
            "p": self.dimension,
        }


def make_epsilon_laplace(budget: PrivacyBudget, gs: float, p: int = 1) -> AdditiveMechanism:
    if not budget.pure:
        raise BudgetMismatchError("the epsilon-Laplace mechanism needs delta = 0")
    if not gs > 0:
        raise DegenerateSensitivityError(f"global sensitivity must be positive, got {gs}")
    return AdditiveMechanism(laplace_kernel(p), gs / budget.epsilon, budget, "laplace-eps", float(gs))


def _smooth_value(budget, profile, p, k_max) -> float:
    if budget.pure:
        raise BudgetMismatchError("smooth-sensitivity mechanisms need delta > 0")
    ss, valid = smooth_sensitivity(profile, smoothing_rate(budget, p), k_max)
    if ss <= 0:
        raise DegenerateSensitivityError("smooth sensitivity is zero; the query is constant")
    if not valid:
        raise UnverifiableSensitivityError(
            f"terms beyond k_max={k_max} may exceed the truncated smooth sensitivity {ss}"
        )
    return ss


def make_smooth_laplace(budget: PrivacyBudget, profile: SensitivityProfile, p: int = 1, k_max: int = 100) -> AdditiveMechanism:
    ss = _smooth_value(budget, profile, p, k_max)
    return AdditiveMechanism(laplace_kernel(p), ss / budget.epsilon, budget, "laplace-smooth", ss)


def gaussian_bandwidth(budget: PrivacyBudget, ss: float) -> float:
    return 5.0 * math.sqrt(2.0 * math.log(2.0 / budget.delta)) * ss / budget.epsilon


def make_gaussian(budget: PrivacyBudget, profile: SensitivityProfile, p: int = 1, k_max: int = 100) -> AdditiveMechanism:
    ss = _smooth_value(budget, profile, p, k_max)
    return AdditiveMechanism(gaussian_kernel(p), gaussian_bandwidth(budget, ss), budget, "gaussian", ss)


def perturb(mech: AdditiveMechanism, s, rng) -> np.ndarray:
    return mech.perturb(s, rng)


def mechanism_from_descriptor(d: dict) -> AdditiveMechanism:
    """Rebuild a mechanism from its JSON descriptor.

    For the smooth-sensitivity kinds ``gs`` holds the smooth sensitivity that
    was used, so the bandwidth is recovered without the full profile.
    """
    try:
        kind, eps, delta, gs, p = d["kind"], float(d["epsilon"]), float(d.get("delta", 0.0)), float(d["gs"]), int(d["p"])
    except KeyError as exc:
        raise MechanismError(f"mechanism descriptor missing key {exc}") from None
    budget = PrivacyBudget(eps, delta)
    if kind == "laplace-eps":
        return make_epsilon_laplace(budget, gs, p)
    if kind not in _KERNELS:
        raise MechanismError(f"unknown mechanism kind {kind!r}")
    if budget.pure:
        raise BudgetMismatchError(f"{kind} needs delta > 0")
    if not gs > 0:
        raise DegenerateSensitivityError("sensitivity must be positive")
    h = gs / eps if kind == "laplace-smooth" else gaussian_bandwidth(budget, gs)
    return AdditiveMechanism(_KERNELS[kind](p), h, budget, kind, gs)


@dataclass(frozen=True)
class DpCheck:
    passed: bool
    max_ratio: float


def verify_dp_bound(mech: AdditiveMechanism, gs: float, grid) -> DpCheck:
    """Check the pure-DP density ratio bound for a 1-D additive mechanism.

    Neighboring outputs are placed at ``0`` and ``gs``; the ratio is taken in
    both directions at every grid point.
    """
    if mech.dimension != 1:
        raise ShapeError("verify_dp_bound handles one-dimensional mechanisms only")
    t = np.asarray(grid, dtype=float).reshape(-1, 1)
    h = mech.bandwidth
    log_a = mech.kernel.log_density(t / h)
    log_b = mech.kernel.log_density((t - gs) / h)
    log_ratio = float(np.max(np.abs(log_a - log_b)))
    max_ratio = math.exp(log_ratio)
    bound = math.exp(mech.budget.epsilon)
    return DpCheck(passed=max_ratio <= bound * (1.0 + 1e-12), max_ratio=max_ratio)
