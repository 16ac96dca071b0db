"""Monte Carlo EM for likelihood inference on a privatized query.

The latent variable is the noiseless query. Each E-step simulates it from the
likelihood at the current parameter and weights every draw by the mechanism's
conditional density of the observed value. Within a stage the same uniforms
are reused across iterations (common random numbers) when the model offers an
inverse-CDF simulator, so the iteration map is deterministic and a stage can
meet a tolerance far below the Monte Carlo error of a single E-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize

from .abc import DegenerateWeightsError, _run_chunks, check_mechanism
from .mechanisms import AdditiveMechanism
from .model import BayesModel, PrivatizedQuery
from .rngkit import RngStream

DEFAULT_CHUNK = 1 << 18
STAGE_ITERATION_CAP = 500
FULL_SCHEDULE = ((1e-3, 10**3), (1e-4, 10**5), (1e-5, 10**7))
DESK_SCHEDULE = ((1e-3, 10**3), (1e-4, 10**5), (1e-5, 10**6))


class McemError(RuntimeError):
    pass


class BracketError(McemError):
    pass


class NonConvergenceError(McemError):
    def __init__(self, msg, trace: "McemTrace"):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class McemSchedule:
    stages: tuple[tuple[float, int], ...]
    theta_init: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        tols = [t for t, _ in self.stages]
        ns = [n for _, n in self.stages]
        if any(t <= 0 for t in tols) or any(n < 1 for n in ns):
            raise ValueError("tolerances and sample sizes must be positive")
        if any(b >= a for a, b in zip(tols, tols[1:])):
            raise ValueError("tolerances must strictly decrease across stages")
        if any(b < a for a, b in zip(ns, ns[1:])):
            raise ValueError("sample sizes must not decrease across stages")

    @classmethod
    def parse(cls, text: str, theta_init=(1.0,)) -> "McemSchedule":
        """Parse ``"1e-3:1000,1e-4:100000"``."""
        stages = []
        for part in text.split(","):
            tol, n = part.split(":")
            stages.append((float(tol), int(float(n))))
        return cls(tuple(stages), tuple(np.atleast_1d(theta_init).astype(float)))

    def to_text(self) -> str:
        return ",".join(f"{t:g}:{n}" for t, n in self.stages)


@dataclass
class IterationRecord:
    t: int
    stage: int
    theta: np.ndarray
    e_estimate: np.ndarray
    ess: float
    n: int
    delta: float


@dataclass
class McemTrace:
    records: list[IterationRecord] = field(default_factory=list)
    theta_hat: np.ndarray | None = None
    observed_info: np.ndarray | None = None
    converged: bool = False
    # SE of the weighted mean score on the final-stage sample, at theta_hat
    final_score_se: np.ndarray | None = None


# -- weighted latent samples -----------------------------------------------------

@dataclass
class LatentSample:
    """Latent draws ``s_i`` with weights ``eta_obs(s_obs | s_i)`` stored as logs."""

    s: np.ndarray  # (n, p)
    log_w: np.ndarray  # (n,)

    @property
    def scaled_weights(self) -> np.ndarray:
        """Weights divided by their maximum; ratios are all the estimators need."""
        return np.exp(self.log_w - self.log_w.max())

    @property
    def weight_sum(self) -> float:
        return float(np.exp(self.log_w.max()) * self.scaled_weights.sum())

    @property
    def ess(self) -> float:
        w = self.scaled_weights
        return float(w.sum() ** 2 / np.sum(w * w))


def draw_latent(model, q, mech, theta, n, rng: RngStream, uniforms=None, chunk_size=DEFAULT_CHUNK, threads=1) -> LatentSample:
    """Simulate ``s_i ~ pi(s | theta)`` and weight each by ``eta_obs(s_obs | s_i)``.

    ``uniforms`` (a list of per-chunk arrays) switches to the model's
    inverse-CDF simulator so repeated calls share randomness.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n_chunks = -(-n // chunk_size)

    def chunk(j):
        if uniforms is not None:
            s = model.likelihood_quantile(uniforms[j], theta)
        else:
            size = min(chunk_size, n - j * chunk_size)
            g = rng.split(j).generator()
            s = model.likelihood_simulator(np.broadcast_to(theta, (size, theta.size)), g)
        return s, mech.log_obs_density(q.value, s)

    parts = _run_chunks(chunk, range(n_chunks), threads)
    return LatentSample(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def stage_uniforms(model: BayesModel, n: int, rng: RngStream, chunk_size=DEFAULT_CHUNK) -> list[np.ndarray]:
    out = []
    for j in range(-(-n // chunk_size)):
        size = min(chunk_size, n - j * chunk_size)
        out.append(rng.split(j).generator().random((size, model.dim_s)))
    return out


def _normalized(ls: LatentSample) -> np.ndarray:
    if not np.isfinite(ls.log_w.max()):
        raise DegenerateWeightsError("all importance weights vanished; s_obs is far outside the simulated range")
    w = ls.scaled_weights
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        raise DegenerateWeightsError("all importance weights vanished; s_obs is far outside the simulated range")
    return w / total


# -- E-step ------------------------------------------------------------------------

@dataclass(frozen=True)
class EStep:
    estimate: np.ndarray
    weight_sum: float
    ess: float


def e_step_estimate(model: BayesModel, ls: LatentSample) -> EStep:
    if model.sufficient_stat is None:
        raise McemError("model has no sufficient statistic; use the generic M-step")
    wn = _normalized(ls)
    b = np.asarray(model.sufficient_stat(ls.s), dtype=float).reshape(len(wn), -1)
    return EStep(wn @ b, ls.weight_sum, ls.ess)


def e_step_is(model, q, mech, theta_t, n, rng: RngStream, threads: int = 1) -> EStep:
    """Importance-sampled ``E(b(s) | s_obs, theta_t)`` with the weight sum and ESS."""
    check_mechanism(q, mech)
    return e_step_estimate(model, draw_latent(model, q, mech, theta_t, n, rng, threads=threads))


# -- M-steps -----------------------------------------------------------------------

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_max(f, lo: float, hi: float, xtol: float = 1e-10, max_iter: int = 500) -> float:
    a, b = lo, hi
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= xtol * max(1.0, abs(a) + abs(b)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _expand_bracket(f, lo: float, hi: float, lower_limit: float = 0.0, max_expand: int = 60, n_grid: int = 33):
    """Scan ``[lo, hi]`` and return the neighbours of the best interior grid point.

    The scan is geometric on positive ranges. When the best point sits on an
    edge, that edge moves outward and the scan repeats.
    """
    for _ in range(max_expand):
        grid = np.geomspace(lo, hi, n_grid) if lo > 0 else np.linspace(lo, hi, n_grid)
        vals = np.array([f(x) for x in grid])
        i = int(np.argmax(np.where(np.isfinite(vals), vals, -np.inf)))
        if 0 < i < n_grid - 1:
            return float(grid[i - 1]), float(grid[i + 1])
        width = hi - lo
        if i == 0:
            new_lo = max(lower_limit + 1e-12 * width, lo - width) if lower_limit is not None else lo - width
            if new_lo >= lo:
                break
            lo = new_lo
        else:
            hi = hi + width
    raise BracketError(f"no interior maximizer found around [{lo}, {hi}]")


def m_step_generic(samples, weights, model: BayesModel, theta_bracket=(1e-6, 1e3), lower_limit: float | None = 0.0) -> np.ndarray:
    """Maximize ``sum_i w_i log pi(s_i | theta)`` over theta.

    One-dimensional problems solve the weighted score equation by Brent's
    method when a score is available and fall back to golden-section search on
    the objective otherwise. Higher dimensions use L-BFGS with the weighted
    score as gradient.
    """
    if model.likelihood_log_density is None:
        raise McemError("the generic M-step needs likelihood_log_density")
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    w = np.asarray(weights, dtype=float)
    if not w.sum() > 0:
        raise DegenerateWeightsError("all weights are zero")
    w = w / w.sum()

    def q_hat(th):
        return float(w @ model.likelihood_log_density(s, np.atleast_1d(th)))

    if model.dim_theta == 1:
        lo, hi = (float(x) for x in theta_bracket)
        lo, hi = _expand_bracket(q_hat, lo, hi, lower_limit)
        if model.score is not None:
            def g(th):
                return float(w @ np.asarray(model.score(s, np.atleast_1d(th)), dtype=float).reshape(len(w)))

            glo, ghi = g(lo), g(hi)
            if glo > 0 > ghi:
                return np.array([brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)])
            if glo == 0:
                return np.array([lo])
            if ghi == 0:
                return np.array([hi])
        return np.array([golden_section_max(q_hat, lo, hi)])

    x0 = np.mean(np.asarray(theta_bracket, dtype=float), axis=0)
    jac = None
    if model.score is not None:
        jac = lambda th: -(w @ np.asarray(model.score(s, th), dtype=float))
    res = minimize(lambda th: -q_hat(th), x0, jac=jac, method="L-BFGS-B", options={"gtol": 1e-10})
    if not res.success:
        raise BracketError(f"M-step optimizer failed: {res.message}")
    return np.asarray(res.x, dtype=float)


# -- score and information ---------------------------------------------------------

def observed_score(samples, weights, model: BayesModel, theta) -> np.ndarray:
    """Weighted mean of complete-data scores, the observed-data score estimate."""
    if model.score is None:
        raise McemError("model has no score function")
    w = np.asarray(weights, dtype=float)
    if not w.sum() > 0:
        raise DegenerateWeightsError("all weights are zero")
    lam = np.asarray(model.score(samples, np.atleast_1d(theta)), dtype=float).reshape(len(w), -1)
    return (w / w.sum()) @ lam


def observed_score_se(samples, weights, model: BayesModel, theta) -> np.ndarray:
    """Delta-method standard error of :func:`observed_score`, per coordinate."""
    w = np.asarray(weights, dtype=float)
    if not w.sum() > 0:
        raise DegenerateWeightsError("all weights are zero")
    wn = w / w.sum()
    lam = np.asarray(model.score(samples, np.atleast_1d(theta)), dtype=float).reshape(len(w), -1)
    resid = lam - wn @ lam
    return np.sqrt(np.sum((wn[:, None] * resid) ** 2, axis=0))


def observed_information(samples, weights, model: BayesModel, theta) -> np.ndarray:
    """Louis-type observed information from weighted complete-data derivatives.

    The weighted double sum over pairs of scores equals the outer product of
    the weighted mean score, so the cost is linear in the sample size.
    """
    if model.score is None or model.score_jacobian is None:
        raise McemError("observed information needs score and score_jacobian")
    w = np.asarray(weights, dtype=float)
    if not w.sum() > 0:
        raise DegenerateWeightsError("all weights are zero")
    wn = w / w.sum()
    th = np.atleast_1d(theta)
    lam = np.asarray(model.score(samples, th), dtype=float).reshape(len(w), -1)
    jac = np.asarray(model.score_jacobian(samples, th), dtype=float).reshape(len(w), lam.shape[1], lam.shape[1])
    mean_score = wn @ lam
    complete = -np.einsum("i,ijk->jk", wn, jac) - np.einsum("i,ij,ik->jk", wn, lam, lam)
    info = complete + np.outer(mean_score, mean_score)
    return 0.5 * (info + info.T)


def observed_information_double_sum(samples, weights, model: BayesModel, theta) -> np.ndarray:
    """Reference O(N^2) evaluation of the pairwise score term, for testing."""
    w = np.asarray(weights, dtype=float)
    m = 1.0 / w.sum()
    th = np.atleast_1d(theta)
    lam = np.asarray(model.score(samples, th), dtype=float).reshape(len(w), -1)
    jac = np.asarray(model.score_jacobian(samples, th), dtype=float).reshape(len(w), lam.shape[1], lam.shape[1])
    d = lam.shape[1]
    first = np.zeros((d, d))
    for i in range(len(w)):
        first += w[i] * (-jac[i] - np.outer(lam[i], lam[i]))
    second = np.zeros((d, d))
    for i in range(len(w)):
        for j in range(len(w)):
            second += w[i] * w[j] * np.outer(lam[i], lam[j])
    return m * first + m * m * second


def ess_theoretical(evidence_at_theta: float, second_moment_eta: float, n: int) -> float:
    """``n * pi(s_obs|theta)**2 / E(eta_obs**2)``, both in proper-density units."""
    if not second_moment_eta > 0:
        raise DegenerateWeightsError("second moment of eta_obs must be positive")
    if not evidence_at_theta > 0:
        raise ValueError("evidence must be positive")
    return n * evidence_at_theta**2 / second_moment_eta


# -- driver ------------------------------------------------------------------------

def _m_step(model, ls: LatentSample, estep: EStep | None, theta_prev):
    if model.complete_data_mle is not None and estep is not None:
        return np.atleast_1d(np.asarray(model.complete_data_mle(estep.estimate), dtype=float))
    th = float(np.atleast_1d(theta_prev)[0]) if model.dim_theta == 1 else None
    bracket = (0.5 * th, 2.0 * th) if th is not None else np.vstack([theta_prev * 0.5, theta_prev * 2.0])
    return m_step_generic(ls.s, ls.scaled_weights, model, bracket)


def run_mcem(
    model: BayesModel,
    q: PrivatizedQuery,
    mech: AdditiveMechanism,
    schedule: McemSchedule,
    rng: RngStream,
    info_n: int | None = None,
    max_iter: int = STAGE_ITERATION_CAP,
    damping: float = 1.0,
    threads: int = 1,
    common_random_numbers: bool = True,
) -> McemTrace:
    """Run the staged MCEM schedule and estimate the observed information at the end.

    Each stage iterates E and M steps until successive parameters differ by
    less than its tolerance, then hands its final value to the next stage.
    The information is computed on a fresh substream with ``info_n`` draws
    (default: the last stage's sample size).
    """
    check_mechanism(q, mech)
    theta = np.atleast_1d(np.asarray(schedule.theta_init, dtype=float))
    trace = McemTrace()
    use_crn = common_random_numbers and model.likelihood_quantile is not None
    t = 0
    for k, (tol, n) in enumerate(schedule.stages):
        stage_rng = rng.split(k)
        uniforms = stage_uniforms(model, n, stage_rng) if use_crn else None
        converged = False
        for it in range(max_iter):
            iter_rng = stage_rng.split(1_000_000 + it)
            ls = draw_latent(model, q, mech, theta, n, iter_rng, uniforms, threads=threads)
            estep = e_step_estimate(model, ls) if model.sufficient_stat is not None else None
            new = _m_step(model, ls, estep, theta)
            new = theta + damping * (new - theta)
            delta = float(np.max(np.abs(new - theta)))
            t += 1
            trace.records.append(
                IterationRecord(
                    t=t,
                    stage=k,
                    theta=new,
                    e_estimate=estep.estimate if estep is not None else np.full(1, np.nan),
                    ess=ls.ess,
                    n=n,
                    delta=delta,
                )
            )
            theta = new
            if delta < tol:
                converged = True
                break
        if not converged:
            trace.theta_hat = theta
            raise NonConvergenceError(f"stage {k} (tol={tol}, n={n}) did not converge in {max_iter} iterations", trace)
    trace.theta_hat = theta
    trace.converged = True
    if model.score is not None:
        trace.final_score_se = observed_score_se(ls.s, ls.scaled_weights, model, theta)
    if model.score is not None and model.score_jacobian is not None:
        ls = draw_latent(model, q, mech, theta, info_n or schedule.stages[-1][1], rng.split(len(schedule.stages)), threads=threads)
        trace.observed_info = observed_information(ls.s, ls.scaled_weights, model, theta)
    return trace
