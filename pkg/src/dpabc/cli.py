"""Command-line entry point: one experiment per invocation, outputs in a directory.

Configuration is resolved from built-in defaults, then ``--config`` JSON, then
individual flags. The resolved configuration is echoed to ``config.json`` so a
run can be repeated exactly with ``--config <out>/config.json``.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .abc import AbcError, DegenerateWeightsError, importance_abc, rejection_abc, weighted_estimate
from .mcem import DESK_SCHEDULE, McemError, McemSchedule, run_mcem
from .mechanisms import MechanismError, mechanism_from_descriptor
from .model import PrivatizedQuery, gamma_poisson_model
from .oracle_gp import GpSetting, OracleError, figure_grids, mle_oracle
from .outputs import read_json, write_csv, write_json
from .reproduce import Scale, run_all
from .rngkit import DEFAULT_SEED, DomainError, RngStream

log = logging.getLogger("dpabc")

EXPERIMENTS = ("privatize", "abc", "abc-is", "mcem", "posterior", "mle-oracle", "reproduce-paper")
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str = "reproduce-paper"
    alpha: float = 25.0
    beta: float = 1.0
    mechanism: str = "laplace-eps"
    epsilon: float = 0.2
    delta: float = 0.0
    gs: float = 1.0
    p: int = 1
    s_obs: float | None = 37.4
    s: float | None = None
    n: int | None = None
    seed: int = DEFAULT_SEED
    schedule: str = ",".join(f"{t:g}:{n}" for t, n in DESK_SCHEDULE)
    theta_init: float = 1.0
    out: str = "out"
    threads: int | None = None
    abc_n: int | None = None
    full_scale: bool = False

    def mechanism_descriptor(self) -> dict:
        return {"kind": self.mechanism, "epsilon": self.epsilon, "delta": self.delta, "gs": self.gs, "p": self.p}

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        for name in ("alpha", "beta", "epsilon", "gs"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if not 0 <= self.delta < 1:
            raise ConfigError(f"delta must lie in [0, 1), got {self.delta}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.n is not None and self.n < 1:
            raise ConfigError("n must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be positive")
        try:
            mechanism_from_descriptor(self.mechanism_descriptor())
        except MechanismError as exc:
            raise ConfigError(str(exc)) from None
        if self.experiment == "privatize" and self.s is None:
            raise ConfigError("privatize needs the raw query value --s")
        if self.experiment != "privatize" and self.s_obs is None:
            raise ConfigError(f"{self.experiment} needs --s-obs")
        if self.experiment in ("posterior", "mle-oracle", "reproduce-paper"):
            if self.mechanism != "laplace-eps" or self.gs != 1 or self.p != 1:
                raise ConfigError(f"{self.experiment} covers the epsilon-Laplace counting query only (gs = 1, p = 1)")

    @property
    def n_threads(self) -> int:
        return self.threads or os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpabc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--mechanism", choices=("laplace-eps", "laplace-smooth", "gaussian"))
        p.add_argument("--epsilon", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--gs", type=float, help="sensitivity (global, or smooth for the smooth kinds)")
        p.add_argument("--p", type=int)
        p.add_argument("--s-obs", dest="s_obs", type=float)
        p.add_argument("--s", type=float, help="raw query value (privatize)")
        p.add_argument("--n", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--schedule", help="tol1:n1,tol2:n2,...")
        p.add_argument("--theta-init", dest="theta_init", type=float)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--abc-n", dest="abc_n", type=int)
        p.add_argument("--full-scale", dest="full_scale", action="store_const", const=True)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    if args.config is not None:
        try:
            data = read_json(args.config)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for k, v in data.items():
            setattr(cfg, k, v)
    for k in known:
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    cfg.experiment = args.experiment
    cfg.validate()
    return cfg


# -- experiments -------------------------------------------------------------------

def _mech_and_query(cfg: RunConfig):
    mech = mechanism_from_descriptor(cfg.mechanism_descriptor())
    if cfg.p != 1:
        raise ConfigError("the shipped count model is one-dimensional (p = 1)")
    return mech, PrivatizedQuery.from_mechanism(cfg.s_obs, mech)


def cmd_privatize(cfg: RunConfig, out: Path) -> dict:
    mech = mechanism_from_descriptor(cfg.mechanism_descriptor())
    s = np.full(cfg.p, float(cfg.s))
    s_obs = mech.perturb(s, RngStream(cfg.seed))
    result = {"s": s, "s_obs": s_obs, "mechanism": mech.descriptor(), "seed": cfg.seed}
    write_json(out / "privatize.json", result)
    return result


def _abc_csv(out: Path, res) -> None:
    write_csv(out / "abc_samples.csv", ["theta", "chunk", "index"], [res.samples[:, 0], res.chunk, res.index])


def cmd_abc(cfg: RunConfig, out: Path) -> dict:
    mech, q = _mech_and_query(cfg)
    model = gamma_poisson_model(cfg.alpha, cfg.beta)
    n = cfg.n or cfg.abc_n or 10**5
    res = rejection_abc(model, q, mech, n, RngStream(cfg.seed), threads=cfg.n_threads)
    _abc_csv(out, res)
    meta = res.metadata()
    write_json(out / "abc.json", meta)
    return meta


def cmd_abc_is(cfg: RunConfig, out: Path) -> dict:
    mech, q = _mech_and_query(cfg)
    model = gamma_poisson_model(cfg.alpha, cfg.beta)
    n = cfg.n or 10**6
    ws = importance_abc(model, q, mech, n, RngStream(cfg.seed), threads=cfg.n_threads)
    est = weighted_estimate(ws, lambda t: t[:, 0])
    write_csv(out / "abc_is_samples.csv", ["theta", "weight"], [ws.thetas[:, 0], ws.weights])
    meta = {
        "mechanism": mech.descriptor(),
        "n": n,
        "seed": cfg.seed,
        "proposal": ws.proposal,
        "posterior_mean": est.value,
        "posterior_mean_se": est.se,
        "ess": est.ess,
    }
    write_json(out / "abc_is.json", meta)
    return meta


def cmd_mcem(cfg: RunConfig, out: Path) -> dict:
    mech, q = _mech_and_query(cfg)
    model = gamma_poisson_model(cfg.alpha, cfg.beta)
    try:
        schedule = McemSchedule.parse(cfg.schedule, (cfg.theta_init,))
    except ValueError as exc:
        raise ConfigError(f"bad schedule {cfg.schedule!r}: {exc}") from None
    trace = run_mcem(model, q, mech, schedule, RngStream(cfg.seed), info_n=cfg.n, threads=cfg.n_threads)
    return _write_trace(out, trace, schedule, mech, cfg.seed)


def _write_trace(out: Path, trace, schedule: McemSchedule, mech, seed: int) -> dict:
    recs = trace.records
    write_csv(
        out / "mcem_trace.csv",
        ["t", "theta", "e_estimate", "ess", "n", "delta"],
        [
            [r.t for r in recs],
            [r.theta[0] for r in recs],
            [r.e_estimate[0] for r in recs],
            [r.ess for r in recs],
            [r.n for r in recs],
            [r.delta for r in recs],
        ],
    )
    summary = {
        "theta_hat": trace.theta_hat,
        "observed_info": trace.observed_info,
        "converged": trace.converged,
        "seed": seed,
        "schedule": schedule.to_text(),
        "theta_init": schedule.theta_init,
        "iterations": len(recs),
        "mechanism": mech.descriptor(),
    }
    write_json(out / "mcem.json", summary)
    return summary


def _write_grids(out: Path, grids: dict, setting: GpSetting) -> dict:
    prior, naive, truth = grids["prior"], grids["naive"], grids["true_posterior"]
    write_csv(
        out / "posterior_grid.csv",
        ["theta", "prior", "naive", "true_posterior"],
        [truth.theta, prior.values, naive.values, truth.values],
    )
    meta = {
        "setting": asdict(setting),
        "mechanism": {"kind": "laplace-eps", "epsilon": setting.epsilon, "delta": 0.0, "gs": 1.0, "p": 1},
        "n_points": len(truth.theta),
        "masses": {k: g.mass for k, g in grids.items()},
        "means": {k: g.mean() for k, g in grids.items()},
        "variances": {k: g.variance() for k, g in grids.items()},
    }
    write_json(out / "posterior.json", meta)
    return meta


def _setting(cfg: RunConfig) -> GpSetting:
    return GpSetting(cfg.alpha, cfg.beta, cfg.epsilon, cfg.s_obs)


def cmd_posterior(cfg: RunConfig, out: Path) -> dict:
    setting = _setting(cfg)
    return _write_grids(out, figure_grids(setting, n_points=cfg.n or 20001), setting)


def cmd_mle_oracle(cfg: RunConfig, out: Path) -> dict:
    res = mle_oracle(_setting(cfg))
    meta = {"argmax": res.argmax, "neg_second_derivative": res.neg_second_derivative, "setting": asdict(_setting(cfg))}
    write_json(out / "mle_oracle.json", meta)
    return meta


def cmd_reproduce_paper(cfg: RunConfig, out: Path) -> dict:
    setting = _setting(cfg)
    scale = Scale.full() if cfg.full_scale else Scale()
    if cfg.abc_n is not None:
        scale = Scale(cfg.abc_n, scale.is_n, scale.info_n, scale.schedule)
    res = run_all(setting, cfg.seed, scale, threads=cfg.n_threads)
    _write_grids(out, res["grids"], setting)
    _abc_csv(out, res["abc"])
    write_json(out / "abc.json", res["abc"].metadata())
    mech = mechanism_from_descriptor(cfg.mechanism_descriptor())
    _write_trace(out, res["trace"], McemSchedule(tuple(scale.schedule), (1.0,)), mech, cfg.seed)
    checks = res["checks"]
    decided = [c for c in checks if c["passed"] is not None]
    summary = {
        "all_passed": all(c["passed"] for c in decided),
        "checks": checks,
        "estimates": res["estimates"],
        "mle_oracle": {"argmax": res["oracle"].argmax, "neg_second_derivative": res["oracle"].neg_second_derivative},
        "reported": {"mle": 37.237, "observed_info": 1.582e-2, "noiseless_mle": 37.4, "noiseless_info": 2.674e-2},
        "seed": cfg.seed,
        "scale": {"abc_n": scale.abc_n, "is_n": scale.is_n, "info_n": scale.info_n, "schedule": list(scale.schedule)},
    }
    write_json(out / "summary.json", summary)
    for c in checks:
        status = "SKIP" if c["passed"] is None else ("PASS" if c["passed"] else "FAIL")
        print(f"{status}  {c['name']}  value={c['value']}  target={c['target']}  tol={c['tolerance']}  {c['note']}")
    return summary


COMMANDS = {
    "privatize": cmd_privatize,
    "abc": cmd_abc,
    "abc-is": cmd_abc_is,
    "mcem": cmd_mcem,
    "posterior": cmd_posterior,
    "mle-oracle": cmd_mle_oracle,
    "reproduce-paper": cmd_reproduce_paper,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", asdict(cfg))
        log.info("running %s into %s", cfg.experiment, out)
        COMMANDS[cfg.experiment](cfg, out)
    except (ConfigError, DomainError, MechanismError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, McemError, AbcError, OracleError, DegenerateWeightsError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
