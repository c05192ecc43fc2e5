"""Bayesian calibration with a Gaussian likelihood, random-walk Metropolis, and D-optimal design."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Box, Distribution, Empirical, ModelFunctional, RngSpec, _generator, lhs_sample
from .design import OptimizerOptions, pattern_search

__all__ = [
    "LikelihoodSpec",
    "PosteriorChain",
    "IdentifiabilityError",
    "DOptimalResult",
    "log_likelihood",
    "posterior_sample",
    "d_optimal_design",
    "write_chain_csv",
    "write_posterior_json",
]

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class IdentifiabilityError(RuntimeError):
    """Fisher information singular at every tried design."""


@dataclass(frozen=True)
class LikelihoodSpec:
    sigma: float
    observations: tuple  # of (x_cal, z_cal, y_exp)

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be positive")
        obs = tuple((np.asarray(x, dtype=float), None if z is None else np.atleast_1d(np.asarray(z, dtype=float)),
                     float(y)) for x, z, y in self.observations)
        if not obs:
            raise ValueError("at least one observation is required")
        object.__setattr__(self, "observations", obs)


def log_likelihood(spec: LikelihoodSpec, h_obs: ModelFunctional, theta) -> float:
    """Sum of independent Gaussian log densities of the residuals."""
    s = spec.sigma
    total = 0.0
    for x, z, y in spec.observations:
        r = h_obs.value(x, theta, z) - y
        total += -_LOG_SQRT_2PI - math.log(s) - r * r / (2 * s * s)
    return total


@dataclass
class PosteriorChain:
    samples: np.ndarray  # (n, d)
    log_density: np.ndarray
    accepted: np.ndarray
    burn_in: int

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self.accepted) else 0.0

    def kept(self) -> np.ndarray:
        return self.samples[self.burn_in:]

    def posterior(self) -> Empirical:
        """Post burn-in draws as a resampling distribution."""
        kept = self.kept()
        return Empirical(kept[:, 0] if kept.shape[1] == 1 else kept)

    def summary(self) -> dict:
        kept = self.kept()
        q = np.quantile(kept, [0.025, 0.5, 0.975], axis=0)
        return {
            "n": int(len(self.samples)),
            "burn_in": int(self.burn_in),
            "acceptance_rate": self.acceptance_rate,
            "mean": kept.mean(axis=0).tolist(),
            "cov": np.atleast_2d(np.cov(kept, rowvar=False)).tolist() if len(kept) > 1 else None,
            "quantiles": {"0.025": q[0].tolist(), "0.5": q[1].tolist(), "0.975": q[2].tolist()},
        }


def posterior_sample(spec: LikelihoodSpec, h_obs: ModelFunctional, prior: Distribution, n: int,
                     proposal_scale, rng, *, theta0=None, burn_in: int | None = None) -> PosteriorChain:
    """Random-walk Metropolis targeting likelihood times prior density.

    Coordinates where the prior is a point mass are never perturbed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = _generator(rng)
    theta = np.atleast_1d(np.asarray(prior.center() if theta0 is None else theta0, dtype=float)).copy()
    scale = np.broadcast_to(np.asarray(proposal_scale, dtype=float), theta.shape).copy()
    scale[np.asarray(prior.is_degenerate(), dtype=bool)] = 0.0

    def log_target(th):
        lp = prior.logpdf(th if th.size > 1 else th[0])
        if lp == -math.inf:
            return -math.inf
        return lp + log_likelihood(spec, h_obs, th)

    cur = log_target(theta)
    if cur == -math.inf:
        raise ValueError("prior density is zero at the initial point")
    d = theta.size
    out = np.empty((n, d))
    dens = np.empty(n)
    acc = np.zeros(n, dtype=bool)
    for i in range(n):
        step = scale * gen.standard_normal(d)
        prop = theta + step
        new = log_target(prop) if np.any(step) else cur
        if math.log(gen.uniform()) < new - cur:
            theta, cur = prop, new
            acc[i] = True
        out[i] = theta
        dens[i] = cur
    b = int(0.2 * n) if burn_in is None else int(burn_in)
    return PosteriorChain(out, dens, acc, min(max(b, 0), n - 1))


@dataclass
class DOptimalResult:
    point: np.ndarray
    log_det: float
    per_start: list = field(default_factory=list)


def _logdet(fisher, p) -> float:
    info = np.asarray(fisher(p), dtype=float)
    sign, val = np.linalg.slogdet(0.5 * (info + info.T))
    return val if sign > 0 else -math.inf


def d_optimal_design(fisher: Callable, box: Box, opts: OptimizerOptions | None = None,
                     starts=None) -> DOptimalResult:
    """Maximise ``log det I(p)`` over the box by multistart pattern search."""
    opts = opts or OptimizerOptions()
    if starts is None:
        starts = lhs_sample(box, opts.n_starts, opts.rng.with_stream(3))
    starts = np.atleast_2d(np.asarray(starts, dtype=float))

    def neg(p):
        return -_logdet(fisher, p)

    runs = []
    for s in starts:
        if not math.isfinite(neg(s)):
            continue
        r = pattern_search(neg, s, box, opts)
        runs.append((s, r.x, -r.f))
    if not runs:
        raise IdentifiabilityError("Fisher information is singular at every start: "
                                   "the parameters are not identifiable from this design")
    best = max(runs, key=lambda t: t[2])
    return DOptimalResult(best[1], best[2], runs)


def write_chain_csv(path, chain: PosteriorChain, names: Sequence[str] = ()) -> None:
    d = chain.samples.shape[1]
    names = list(names) or [f"theta{i + 1}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + names + ["log_density", "accepted"])
        for i, (row, ld, a) in enumerate(zip(chain.samples, chain.log_density, chain.accepted)):
            w.writerow([i] + [f"{v:.17g}" for v in row] + [f"{ld:.17g}", int(a)])


def write_posterior_json(path, chain: PosteriorChain, names: Sequence[str] = ()) -> None:
    data = chain.summary()
    data["names"] = list(names)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
