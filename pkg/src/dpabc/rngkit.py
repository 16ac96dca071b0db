"""Reproducible random streams and the samplers used by mechanisms and models.

Every stream is an immutable ``(seed, stream_id)`` descriptor. A numpy
``Generator`` backed by the counter-based Philox bit generator is derived from
it on demand, so two runs with the same descriptor see the same draws and
workers never share mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

DEFAULT_SEED = 0
_U64 = (1 << 64) - 1


class InvalidDimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class RngStream:
    seed: int = DEFAULT_SEED
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _U64 and 0 <= self.stream_id <= _U64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def split(self, index: int) -> "RngStream":
        """Child stream ``index`` of this stream; children of distinct parents never collide."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, 0x5EED, int(index)))
        child_id = int(ss.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.seed, child_id)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def _check_dim(p: int) -> int:
    if int(p) != p or p < 1:
        raise InvalidDimensionError(f"dimension must be a positive integer, got {p}")
    return int(p)


def laplace_inverse_cdf(u):
    """Quantile function of the standard Laplace law (density ``exp(-|x|)/2``)."""
    u = np.asarray(u, dtype=float)
    c = u - 0.5
    return -np.sign(c) * np.log1p(-2.0 * np.abs(c))


def sample_standard_laplace(rng, p: int, size: int | None = None) -> np.ndarray:
    """Draw iid standard Laplace coordinates by inversion.

    Returns shape ``(p,)`` or, when ``size`` is given, ``(size, p)``.
    """
    p = _check_dim(p)
    g = as_generator(rng)
    shape = (p,) if size is None else (int(size), p)
    # open interval keeps the log finite
    u = g.random(shape)
    while np.any(u == 0.0):
        u = np.where(u == 0.0, g.random(shape), u)
    return laplace_inverse_cdf(u)


def sample_standard_normal(rng, p: int, size: int | None = None) -> np.ndarray:
    p = _check_dim(p)
    g = as_generator(rng)
    shape = (p,) if size is None else (int(size), p)
    return g.standard_normal(shape)


def sample_gamma(rng, shape: float, rate: float, size=None):
    """Gamma(shape, rate) draws; mean ``shape / rate``.

    Uses numpy's Marsaglia-Tsang squeeze sampler, which applies the
    ``U**(1/shape)`` boost for shape < 1.
    """
    if not (shape > 0 and rate > 0):
        raise DomainError(f"gamma parameters must be positive, got shape={shape}, rate={rate}")
    g = as_generator(rng)
    return g.standard_gamma(shape, size=size) / rate


def sample_poisson(rng, mean, size=None):
    """Poisson draws for scalar or array ``mean``.

    numpy switches from sequential multiplication of uniforms (the
    exponential-interarrival method) to PTRS transformed rejection at mean 10.
    """
    m = np.asarray(mean, dtype=float)
    if np.any(m < 0) or np.any(~np.isfinite(m)):
        raise DomainError("Poisson mean must be finite and nonnegative")
    g = as_generator(rng)
    return g.poisson(m, size=size)


def poisson_quantile(u, mean: float) -> np.ndarray:
    """Inverse-CDF Poisson draws from uniforms ``u`` at a scalar ``mean``.

    Monotone in both ``u`` and ``mean``, which makes it the sampler of choice
    when the same uniforms are reused across parameter values.
    """
    if not (mean >= 0 and np.isfinite(mean)):
        raise DomainError(f"Poisson mean must be finite and nonnegative, got {mean}")
    u = np.asarray(u, dtype=float)
    if mean == 0:
        return np.zeros(u.shape, dtype=np.int64)
    kmax = int(np.ceil(mean + 40.0 * np.sqrt(mean) + 60.0))
    k = np.arange(kmax + 1)
    logpmf = k * np.log(mean) - mean - gammaln(k + 1.0)
    cdf = np.cumsum(np.exp(logpmf))
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right").astype(np.int64)
