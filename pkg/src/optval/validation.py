"""Discrepancy sampling, validation metrics and the end-to-end validation workflow."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    Box,
    Distribution,
    Empirical,
    EmpiricalCDF,
    ModelFunctional,
    RngSpec,
    _generator,
    as_rows,
    sample,
)

log = logging.getLogger(__name__)

__all__ = [
    "DiscrepancySample",
    "ValidationVerdict",
    "WorkflowConfig",
    "WorkflowResult",
    "WorkflowError",
    "propagate",
    "discrepancy",
    "reliability_metric",
    "area_metric",
    "run_validation_workflow",
    "NOT_INVALIDATED",
    "INVALIDATED",
]

NOT_INVALIDATED = "not-invalidated"
INVALIDATED = "invalidated"
PROCEED = "proceed"
TOO_UNCERTAIN = "uncertainty-too-large"


class WorkflowError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _values(h: ModelFunctional, x, draws, z) -> np.ndarray:
    try:
        vals = np.asarray(h.values(x, draws, z), dtype=float)
    except Exception:
        # locate the failing sample
        rows = as_rows(draws)
        for k, th in enumerate(rows):
            try:
                h.value(x, th, z)
            except Exception as exc:
                raise RuntimeError(f"evaluation of {h.id} failed at sample {k}: {exc}") from exc
        raise
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise RuntimeError(f"evaluation of {h.id} is not finite at sample {int(np.argmax(bad))}")
    return vals


def propagate(h: ModelFunctional, x, theta_dist: Distribution, n: int, rng, z=None) -> Empirical:
    """Push ``n`` draws of the model parameters through ``h``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    draws = sample(theta_dist, n, rng)
    return Empirical(_values(h, np.asarray(x, dtype=float), draws, z))


@dataclass(frozen=True)
class DiscrepancySample:
    e_values: np.ndarray
    x: tuple
    z: tuple | None
    n_exp: int
    n_model: int
    seed: RngSpec | None = None

    def __post_init__(self):
        e = np.asarray(self.e_values, dtype=float).ravel()
        if e.size == 0:
            raise ValueError("discrepancy sample is empty")
        if not np.all(np.isfinite(e)):
            raise ValueError("discrepancy values must be finite")
        e.setflags(write=False)
        object.__setattr__(self, "e_values", e)

    def abs_cdf(self) -> EmpiricalCDF:
        return EmpiricalCDF(np.abs(self.e_values))


def discrepancy(y_exp_samples, h_obs: ModelFunctional, x, z, theta_dist: Distribution, n: int,
                rng: RngSpec) -> DiscrepancySample:
    """``n`` draws of ``Y_exp - h_obs(x, Theta, z)`` with both factors drawn independently.

    Experimental values are resampled from ``y_exp_samples`` on one child
    stream; model parameters come from another.
    """
    y = np.asarray(y_exp_samples, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("no experimental samples")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = RngSpec(rng) if isinstance(rng, int) else rng
    gy = rng.child(0).generator()
    ys = y[gy.integers(0, y.size, size=n)]
    model = _values(h_obs, np.asarray(x, dtype=float), sample(theta_dist, n, rng.child(1)), z)
    zt = None if z is None else tuple(float(v) for v in np.atleast_1d(z))
    return DiscrepancySample(ys - model, tuple(float(v) for v in np.atleast_1d(x)), zt,
                             int(y.size), int(n), rng)


def reliability_metric(d: DiscrepancySample, epsilon: float) -> float:
    """Fraction of discrepancy draws with ``|e| < epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    e = d.e_values if isinstance(d, DiscrepancySample) else np.asarray(d, dtype=float)
    return float(np.count_nonzero(np.abs(e) < epsilon)) / e.size


def _as_cdf(F) -> EmpiricalCDF:
    if isinstance(F, EmpiricalCDF):
        return F
    if isinstance(F, Empirical):
        return F.cdf()
    if callable(F):
        raise ValueError("area_metric needs step CDFs with explicit breakpoints")
    return EmpiricalCDF(F)


def area_metric(F1, F2) -> float:
    """Exact ``int |F1 - F2| ds`` for two step CDFs (or raw samples)."""
    a, b = _as_cdf(F1), _as_cdf(F2)
    pts = np.union1d(a.breakpoints(), b.breakpoints())
    if pts.size < 2:
        return 0.0
    left = pts[:-1]
    diff = np.abs(np.asarray(a(left)) - np.asarray(b(left)))
    return float(np.sum(diff * np.diff(pts)))


# ---------------------------------------------------------------------------
# workflow


@dataclass(frozen=True)
class ValidationVerdict:
    gamma: float
    epsilon: float
    eta: float
    verdict: str | None
    propagation_flag: str = PROCEED
    cov: float = float("nan")

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if self.verdict is not None:
            expect = NOT_INVALIDATED if self.gamma >= self.eta else INVALIDATED
            if self.verdict != expect:
                raise ValueError("verdict inconsistent with gamma and eta")

    @classmethod
    def decide(cls, gamma, epsilon, eta, cov=float("nan")) -> "ValidationVerdict":
        return cls(gamma, epsilon, eta, NOT_INVALIDATED if gamma >= eta else INVALIDATED,
                   PROCEED, cov)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "epsilon": self.epsilon, "eta": self.eta,
                "verdict": self.verdict, "propagation_flag": self.propagation_flag,
                "cov": None if math.isnan(self.cov) else self.cov}


@dataclass
class WorkflowConfig:
    """Inputs of one validation run.

    ``data_source(x, z, n, rng)`` returns experimental draws at the chosen
    scenario and sensor.  ``x_val`` / ``sensor`` force the scenario or the
    ``(observable id, z)`` pair and skip the matching design step.
    """

    h_qoi: ModelFunctional
    x_pred: Sequence[float]
    prior: Distribution
    X_lab: Box
    H_lab: Sequence[ModelFunctional]
    Z_lab: object  # Box or grid, or callable(x_val) -> Box/grid
    epsilon: float
    eta: float
    data_source: Callable
    cov_budget: float = 0.5
    n_exp: int = 10_000
    n_model: int = 10_000
    n_prop: int = 10_000
    rng: RngSpec = field(default_factory=lambda: RngSpec(0))
    options: object = None  # design.OptimizerOptions
    calibration: object = None  # (LikelihoodSpec, h_obs, n, proposal_scale)
    x_val: Sequence[float] | None = None
    sensor: tuple | None = None


@dataclass
class WorkflowResult:
    verdict: ValidationVerdict
    artifacts: dict = field(default_factory=dict)


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except WorkflowError:
                raise
            except Exception as exc:
                raise WorkflowError(name, f"{type(exc).__name__}: {exc}") from exc
        return inner
    return wrap


def run_validation_workflow(cfg: WorkflowConfig, out_dir=None) -> WorkflowResult:
    """Calibrate (optional), propagate, gate on uncertainty, design, observe, decide."""
    from . import calibration, design

    opts = cfg.options or design.OptimizerOptions(rng=cfg.rng)
    art: dict = {}
    theta_dist = cfg.prior

    if cfg.calibration is not None:
        @_stage("calibration")
        def calibrate():
            spec, h_obs, n, scale = cfg.calibration
            chain = calibration.posterior_sample(spec, h_obs, cfg.prior, n, scale,
                                                 cfg.rng.with_stream(10))
            return chain
        chain = calibrate()
        art["posterior"] = chain.summary()
        theta_dist = chain.posterior()

    q = _stage("propagation")(propagate)(cfg.h_qoi, cfg.x_pred, theta_dist, cfg.n_prop,
                                         cfg.rng.with_stream(11))
    mean = float(np.mean(q.samples))
    std = float(np.std(q.samples))
    cov = std / abs(mean) if mean != 0 else (0.0 if std == 0 else math.inf)
    art["propagation"] = {"mean": mean, "std": std, "cov": cov, "samples": q.samples}
    if cov > cfg.cov_budget:
        v = ValidationVerdict(float("nan"), cfg.epsilon, cfg.eta, None, TOO_UNCERTAIN, cov)
        res = WorkflowResult(v, art)
        if out_dir is not None:
            _write_artifacts(out_dir, res)
        return res

    if cfg.x_val is None:
        scen = _stage("scenario-design")(design.optimize_scenario)(
            cfg.h_qoi, cfg.x_pred, theta_dist, cfg.X_lab, opts)
        x_val = scen.best_point
        art["scenario"] = scen.summary()
    else:
        x_val = np.asarray(cfg.x_val, dtype=float)
        art["scenario"] = {"best_point": x_val.tolist(), "forced": True}

    by_id = {h.id: h for h in cfg.H_lab}
    if cfg.sensor is None:
        Z = cfg.Z_lab(x_val) if callable(cfg.Z_lab) else cfg.Z_lab
        sens = _stage("sensor-design")(design.optimize_sensor)(
            list(cfg.H_lab), Z, x_val, cfg.h_qoi, theta_dist, opts)
        h_obs, z_val = by_id[sens.functional_id], sens.z
        art["sensor"] = {"functional": sens.functional_id, "z": z_val.tolist(),
                         "objective": sens.objective}
    else:
        hid, z_val = cfg.sensor
        if hid not in by_id:
            raise WorkflowError("sensor-design", f"unknown observable {hid!r}")
        h_obs, z_val = by_id[hid], np.atleast_1d(np.asarray(z_val, dtype=float))
        art["sensor"] = {"functional": hid, "z": z_val.tolist(), "forced": True}

    y = _stage("experiment")(cfg.data_source)(x_val, z_val, cfg.n_exp, cfg.rng.with_stream(12))
    y = np.asarray(y, dtype=float).ravel()
    art["observations"] = y
    d = _stage("discrepancy")(discrepancy)(y, h_obs, x_val, z_val, theta_dist, cfg.n_model,
                                           cfg.rng.with_stream(13))
    art["discrepancy"] = d.e_values
    gamma = reliability_metric(d, cfg.epsilon)
    v = ValidationVerdict.decide(gamma, cfg.epsilon, cfg.eta, cov)
    res = WorkflowResult(v, art)
    if out_dir is not None:
        _write_artifacts(out_dir, res)
    return res


def _write_column(path, name, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name])
        for v in values:
            w.writerow([f"{float(v):.17g}"])


def write_abs_cdf_csv(path, e_values) -> None:
    """Step points of the empirical CDF of ``|E|``."""
    cdf = EmpiricalCDF(np.abs(np.asarray(e_values, dtype=float)))
    pts = cdf.breakpoints()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["abs_e", "cdf"])
        for p, f in zip(pts, np.atleast_1d(cdf(pts))):
            w.writerow([f"{p:.17g}", f"{f:.17g}"])


def _write_artifacts(out_dir, res: WorkflowResult) -> None:
    from .design import write_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a = res.artifacts
    summary = {"verdict": res.verdict.to_dict()}
    if "propagation" in a:
        p = dict(a["propagation"])
        _write_column(out / "qoi_samples.csv", "q", p.pop("samples"))
        summary["propagation"] = p
    for key in ("posterior", "scenario", "sensor"):
        if key in a:
            summary[key] = a[key]
    if "observations" in a:
        _write_column(out / "observations.csv", "y_exp", a["observations"])
    if "discrepancy" in a:
        _write_column(out / "discrepancy.csv", "e", a["discrepancy"])
        write_abs_cdf_csv(out / "abs_discrepancy_cdf.csv", a["discrepancy"])
    write_json(out / "verdict.json", summary)
