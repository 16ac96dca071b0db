"""Mechanism-matched ABC samplers.

When the rejection kernel and bandwidth are exactly the privacy mechanism's
noise density and bandwidth, rejection ABC draws from the true posterior of
the privatized query rather than an approximation of it. Simulation runs in
fixed-size chunks, each on its own substream, so results do not depend on
how many threads execute them.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mechanisms import AdditiveMechanism, GeneralMechanism, MechanismError, NoiseKernel
from .model import BayesModel, PrivatizedQuery
from .rngkit import RngStream

DEFAULT_CHUNK = 1 << 16
_PROB_SLACK = 1e-12


class AbcError(RuntimeError):
    pass


class MechanismMismatchError(MechanismError):
    pass


class BoundViolationError(AbcError):
    pass


class InvalidProposalError(AbcError):
    pass


class DegenerateWeightsError(ArithmeticError):
    pass


class BudgetExhaustedError(AbcError):
    def __init__(self, msg, partial: "AbcResult"):
        super().__init__(msg)
        self.partial = partial


@dataclass
class AbcResult:
    samples: np.ndarray  # (n, d)
    attempts: int
    chunk: np.ndarray
    index: np.ndarray
    seed: int
    stream_id: int
    chunk_size: int
    mechanism: dict | None = None

    @property
    def acceptance_rate(self) -> float:
        return len(self.samples) / self.attempts if self.attempts else 0.0

    def metadata(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "n": int(len(self.samples)),
            "attempts": int(self.attempts),
            "acceptance_rate": self.acceptance_rate,
            "seed": int(self.seed),
            "stream_id": int(self.stream_id),
            "chunk_size": int(self.chunk_size),
        }


@dataclass
class WeightedSample:
    thetas: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)
    proposal: str = "prior"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        if self.thetas.ndim == 1:
            self.thetas = self.thetas[:, None]
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.thetas) != len(self.weights):
            raise ValueError("thetas and weights must have equal length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")


def check_mechanism(q: PrivatizedQuery, mech: AdditiveMechanism) -> None:
    """Refuse to run when the sampler's mechanism differs from the one that produced ``q``."""
    mine = mech.descriptor()
    theirs = q.mechanism_descriptor
    same = mine["kind"] == theirs.get("kind") and int(mine["p"]) == int(theirs.get("p", -1))
    for key in ("epsilon", "delta", "gs"):
        same = same and math.isclose(float(mine[key]), float(theirs.get(key, math.nan)), rel_tol=1e-12, abs_tol=0.0)
    if not same:
        raise MechanismMismatchError(f"sampler mechanism {mine} does not match query mechanism {theirs}")


def _run_chunks(fn: Callable[[int], object], indices, threads: int):
    if threads <= 1:
        return [fn(j) for j in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, indices))


def _rejection(model, s_obs, general: GeneralMechanism, n, rng: RngStream, max_attempts, chunk_size, threads, descriptor):
    if n < 1:
        raise ValueError("n must be positive")
    if max_attempts is None:
        max_attempts = 1000 * n
    m = general.density_bound

    def chunk(j):
        g = rng.split(j).generator()
        theta = model.prior_sampler(g, chunk_size)
        s = model.likelihood_simulator(theta, g)
        u = g.random(chunk_size)
        dens = np.asarray(general.conditional_density(s_obs, s), dtype=float)
        if np.any(dens > m * (1.0 + _PROB_SLACK)):
            raise BoundViolationError(
                f"conditional density {dens.max()} exceeds declared bound {m}; draws would be biased"
            )
        keep = np.flatnonzero(u < dens / m)
        return theta[keep], keep

    accepted, chunks, idx = [], [], []
    total, attempts, next_chunk = 0, 0, 0
    wave = max(1, threads)
    while total < n:
        if attempts >= max_attempts:
            break
        js = list(range(next_chunk, next_chunk + wave))
        next_chunk += wave
        for j, (th, keep) in zip(js, _run_chunks(chunk, js, threads)):
            if total >= n or attempts >= max_attempts:
                break
            need = n - total
            if len(keep) >= need:
                # stop at the attempt that produced the n-th acceptance
                th, keep = th[:need], keep[:need]
                attempts += int(keep[-1]) + 1
            else:
                attempts += chunk_size
            accepted.append(th)
            chunks.append(np.full(len(keep), j, dtype=np.int64))
            idx.append(keep.astype(np.int64))
            total += len(keep)
    d = model.dim_theta
    result = AbcResult(
        samples=np.concatenate(accepted) if accepted else np.empty((0, d)),
        attempts=attempts,
        chunk=np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64),
        index=np.concatenate(idx) if idx else np.empty(0, dtype=np.int64),
        seed=rng.seed,
        stream_id=rng.stream_id,
        chunk_size=chunk_size,
        mechanism=descriptor,
    )
    if total < n:
        raise BudgetExhaustedError(
            f"only {total} of {n} acceptances after {attempts} attempts (max_attempts={max_attempts})", result
        )
    return result


def rejection_abc(
    model: BayesModel,
    q: PrivatizedQuery,
    mech: AdditiveMechanism,
    n: int,
    rng: RngStream,
    max_attempts: int | None = None,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> AbcResult:
    """Exact posterior draws given a privatized query.

    Each proposal ``theta ~ prior, s ~ likelihood`` is accepted with probability
    ``eta((s_obs - s) / h) / max(eta)``. Runs until ``n`` acceptances.
    """
    check_mechanism(q, mech)
    return _rejection(model, q.value, mech.as_general(), n, rng, max_attempts, chunk_size, threads, mech.descriptor())


def rejection_abc_general(
    model: BayesModel,
    q: PrivatizedQuery,
    mech: GeneralMechanism,
    n: int,
    rng: RngStream,
    max_attempts: int | None = None,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> AbcResult:
    """Rejection ABC for any mechanism with a known conditional density bounded by ``mech.density_bound``."""
    if mech.descriptor is not None and mech.descriptor != q.mechanism_descriptor:
        raise MechanismMismatchError(f"sampler mechanism {mech.descriptor} does not match {q.mechanism_descriptor}")
    return _rejection(model, q.value, mech, n, rng, max_attempts, chunk_size, threads, mech.descriptor)


def importance_abc(
    model: BayesModel,
    q: PrivatizedQuery,
    mech: AdditiveMechanism,
    n: int,
    rng: RngStream,
    proposal_sampler: Callable | None = None,
    proposal_density: Callable | None = None,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> WeightedSample:
    """Weighted posterior draws: no rejection, weight ``eta((s_obs-s)/h) * prior / proposal``.

    Without a proposal the prior is used and the weights reduce to the kernel.
    """
    check_mechanism(q, mech)
    if (proposal_sampler is None) != (proposal_density is None):
        raise ValueError("give both proposal_sampler and proposal_density, or neither")
    use_prior = proposal_sampler is None
    sampler = model.prior_sampler if use_prior else proposal_sampler
    s_obs = q.value

    def chunk(j):
        size = min(chunk_size, n - j * chunk_size)
        g = rng.split(j).generator()
        theta = sampler(g, size)
        s = model.likelihood_simulator(theta, g)
        w = np.exp(mech.log_kernel(s_obs, s))
        if not use_prior:
            gd = np.asarray(proposal_density(theta), dtype=float)
            if np.any(gd <= 0):
                raise InvalidProposalError("proposal density vanishes at a drawn parameter")
            w = w * model.prior_density(theta) / gd
        return theta, w

    n_chunks = -(-n // chunk_size)
    parts = _run_chunks(chunk, range(n_chunks), threads)
    return WeightedSample(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        "prior" if use_prior else "user",
        {"seed": rng.seed, "stream_id": rng.stream_id, "chunk_size": chunk_size, "mechanism": mech.descriptor()},
    )


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    s1 = w.sum()
    if s1 <= 0:
        raise DegenerateWeightsError("all weights are zero")
    wn = w / w.max()
    return float(wn.sum() ** 2 / np.sum(wn * wn))


@dataclass(frozen=True)
class WeightedEstimate:
    value: float
    se: float
    ess: float


def weighted_estimate(ws: WeightedSample, a: Callable[[np.ndarray], np.ndarray]) -> WeightedEstimate:
    """Self-normalized estimate of ``E(a(theta) | s_obs)`` with a delta-method standard error."""
    w = ws.weights
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("all weights are zero; the estimator is undefined")
    wn = w / total
    vals = np.asarray(a(ws.thetas), dtype=float).reshape(-1)
    if vals.shape[0] != len(w):
        raise ValueError("a(theta) must return one value per draw")
    nz = wn > 0
    est = float(np.sum(wn[nz] * vals[nz]))
    se = float(math.sqrt(np.sum((wn[nz] * (vals[nz] - est)) ** 2)))
    return WeightedEstimate(est, se, effective_sample_size(w))


def theoretical_acceptance_rate(evidence: float, kernel: NoiseKernel) -> float:
    """Overall acceptance probability of rejection ABC.

    ``evidence`` is the marginal probability of ``s_obs`` computed with the
    same unnormalized kernel ``eta((s_obs - s)/h)`` the sampler accepts on.
    """
    return evidence / kernel.mode_density
