"""Optimal validation scenarios and sensors by derivative-free search.

The scenario problem picks ``x`` in the laboratory box whose QoI influence
matrix is closest (spectral norm) to the one at the prediction scenario.  The
sensor problem picks an observable and sensor location whose trace-normalised
influence matrix is closest to the QoI's at the chosen scenario.

All influence matrices inside one optimisation share a single pinned set of
model-parameter draws (common random numbers), so the objective is a
deterministic function of the design variables.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import Box, Distribution, ModelFunctional, RngSpec, lhs_sample, sample
from .sensitivity import (
    DegenerateFunctionalError,
    InfluenceMatrix,
    default_threads,
    influence_matrix_from_draws,
    normalized_distance,
    spectral_distance,
)

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerOptions",
    "PatternResult",
    "StartResult",
    "DesignResult",
    "SensorResult",
    "SensorScan",
    "VerifyRow",
    "DesignError",
    "pattern_search",
    "multistart",
    "optimize_scenario",
    "optimize_sensor",
    "sensor_scan",
    "verify_recovery",
    "write_design_csv",
    "write_scan_csv",
    "write_verify_csv",
    "write_json",
]

# stream ids of the pinned random streams
STREAM_THETA = 1
STREAM_STARTS = 2


class DesignError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerOptions:
    max_evals: int = 6000
    initial_mesh: float = 0.25
    min_mesh: float = 1e-7
    n_starts: int = 10
    rng: RngSpec = field(default_factory=lambda: RngSpec(0))
    n_samples: int = 1000
    rotated_polls: bool = True
    vns_radii: tuple = (0.05, 0.1, 0.2, 0.4)
    surrogate_fraction: float = 0.5
    f_target: float = 0.0

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if not (0 < self.min_mesh < self.initial_mesh <= 1):
            raise ValueError("need 0 < min_mesh < initial_mesh <= 1")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0 <= self.surrogate_fraction < 1:
            raise ValueError("surrogate_fraction must lie in [0, 1)")
        if any(not 0 < r <= 1 for r in self.vns_radii):
            raise ValueError("vns_radii must lie in (0, 1]")


@dataclass
class PatternResult:
    x: np.ndarray
    f: float
    evals: int
    mesh: float
    trace: list = field(default_factory=list)


def _rotation(gen: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(gen.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _local_search(trial, x, fx, box: Box, opts: OptimizerOptions, gen, budget) -> tuple:
    mesh = opts.initial_mesh
    width = box.width
    active = np.nonzero(width > 0)[0]
    d = active.size
    eye = np.eye(d)
    trace = []
    while mesh >= opts.min_mesh and budget() and d:
        dirs = [eye]
        if opts.rotated_polls and d > 1:
            dirs.append(_rotation(gen, d))
        basis = np.hstack(dirs)
        moved = False
        polled = []

        def accept(p, fp):
            nonlocal x, fx
            # extrapolate while doubling the step keeps improving
            step = p - x
            x, fx = p, fp
            while budget():
                q = box.clip(x + 2 * step)
                if np.array_equal(q, x):
                    break
                fq = trial(q)
                if not fq < fx:
                    break
                step = q - x
                x, fx = q, fq

        for j in range(basis.shape[1]):
            for sign in (1.0, -1.0):
                if not budget():
                    break
                step = np.zeros_like(x)
                step[active] = sign * mesh * width[active] * basis[:, j]
                p = box.clip(x + step)
                if np.array_equal(p, x):
                    continue
                fp = trial(p)
                if fp < fx:
                    accept(p, fp)
                    moved = True
                    break
                if math.isfinite(fp):
                    polled.append(((p - x)[active] / width[active], fp - fx))
            if moved:
                break
        if not moved and len(polled) >= d and budget():
            # simplex-gradient search: at a kink of the objective every poll
            # direction can fail while the fitted slope still points downhill
            S = np.array([v for v, _ in polled])
            df = np.array([v for _, v in polled])
            grad = np.linalg.lstsq(S, df, rcond=None)[0]
            gn = np.linalg.norm(grad)
            if gn > 0:
                step = np.zeros_like(x)
                step[active] = -mesh * width[active] * grad / gn
                p = box.clip(x + step)
                if not np.array_equal(p, x):
                    fp = trial(p)
                    if fp < fx:
                        accept(p, fp)
                        moved = True
        trace.append((x.copy(), fx))
        mesh = min(2 * mesh, opts.initial_mesh) if moved else mesh / 2
    return x, fx, mesh, trace


def pattern_search(f: Callable[[np.ndarray], float], x0, box: Box,
                   opts: OptimizerOptions | None = None) -> PatternResult:
    """Pattern search on a closed box, in coordinates scaled by the box width.

    Each poll tries ``+-e_i`` and, with ``opts.rotated_polls``, the columns of
    a fresh random orthonormal basis (drawn from a stream seeded by the start
    point, so runs are reproducible).  The first improving point is accepted
    and followed by doubling steps along the same direction while they keep
    improving.  The mesh doubles after a successful poll (capped at the initial
    mesh) and halves after a failed one.  Trial points are projected onto the
    box; non-finite values are rejected.

    Once the mesh collapses, a variable-neighbourhood step perturbs the best
    point uniformly within ``r * width`` for ``r`` in ``opts.vns_radii`` and
    searches locally again from there.  Any improvement restarts the radius
    sequence; the search ends when every radius failed or the evaluation
    budget is spent, or once the objective is at most ``opts.f_target``.
    """
    opts = opts or OptimizerOptions()
    x0 = np.asarray(x0, dtype=float)
    if not box.contains(x0):
        raise ValueError("start point outside the box")
    fx = float(f(x0))
    if not math.isfinite(fx):
        raise ValueError("objective is not finite at the start point")
    evals = 1
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=int(opts.rng.master_seed),
        spawn_key=(7, *np.frombuffer(x0.tobytes(), dtype=np.uint32).tolist()))))

    def trial(p):
        nonlocal evals
        evals += 1
        try:
            v = float(f(p))
        except Exception as exc:  # candidate rejected
            log.debug("pattern_search: rejected %s (%s)", p, exc)
            return math.inf
        return v if math.isfinite(v) else math.inf

    def budget():
        return evals < opts.max_evals

    trace = [(x0.copy(), fx)]
    x, fx, mesh, local = _local_search(trial, x0.copy(), fx, box, opts, gen, budget)
    trace += local
    level = 0
    while level < len(opts.vns_radii) and budget() and fx > opts.f_target:
        r = opts.vns_radii[level]
        p = box.clip(x + r * box.width * gen.uniform(-1.0, 1.0, x.size))
        fp = trial(p)
        y, fy, m, _ = _local_search(trial, p, fp, box, opts, gen, budget)
        if fy < fx:
            x, fx, mesh, level = y, fy, m, 0
            trace.append((x.copy(), fx))
        else:
            level += 1
    return PatternResult(x, fx, evals, mesh, trace)


@dataclass
class StartResult:
    start: np.ndarray
    optimum: np.ndarray
    objective: float
    evals: int
    normalized: float = float("nan")


def multistart(f: Callable[[np.ndarray], float], box: Box, opts: OptimizerOptions,
               starts=None, threads: int | None = None,
               surrogate: Callable[[np.ndarray], float] | None = None) -> list[StartResult]:
    """Pattern search from every start (LHS in ``box`` when not given).

    With a ``surrogate`` (a smooth function sharing the minimiser of ``f``),
    each start first spends ``opts.surrogate_fraction`` of its budget on the
    surrogate and then polishes on ``f`` from there.
    """
    if starts is None:
        starts = lhs_sample(box, opts.n_starts, opts.rng.with_stream(STREAM_STARTS))
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    threads = default_threads() if threads is None else threads

    n1 = int(opts.surrogate_fraction * opts.max_evals) if surrogate is not None else 0

    def run(x0):
        x1, used = x0, 0
        if n1 >= 1:
            r1 = pattern_search(surrogate, x0, box, replace(opts, max_evals=n1, vns_radii=()))
            x1, used = r1.x, r1.evals
        r = pattern_search(f, x1, box, replace(opts, max_evals=max(opts.max_evals - used, 1)))
        return StartResult(np.asarray(x0, dtype=float), r.x, r.f, r.evals + used)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, starts))
    return [run(s) for s in starts]


@dataclass
class DesignResult:
    best_point: np.ndarray
    best_objective: float
    per_start: list[StartResult]
    normalized_objective: float
    target_norm: float
    coords: tuple[str, ...] = ()
    flat_coords: tuple[str, ...] = ()
    functional_id: str = ""

    def summary(self) -> dict:
        return {
            "functional": self.functional_id,
            "coords": list(self.coords),
            "best_point": [float(v) for v in self.best_point],
            "best_objective": float(self.best_objective),
            "normalized_objective": float(self.normalized_objective),
            "target_norm": float(self.target_norm),
            "flat_coords": list(self.flat_coords),
            "n_starts": len(self.per_start),
        }


class _ScenarioObjective:
    """``x -> ||M(x) - M(x_pred)||_2`` with pinned draws."""

    def __init__(self, h: ModelFunctional, draws, target: InfluenceMatrix):
        self.h = h
        self.draws = draws
        self.target = target

    def matrix(self, x) -> InfluenceMatrix:
        return influence_matrix_from_draws(self.h, x, None, self.draws, threads=1)

    def __call__(self, x) -> float:
        return spectral_distance(self.matrix(x), self.target)

    def frobenius(self, x) -> float:
        # smooth away from the minimiser, unlike the spectral norm whose
        # kinks (equal-magnitude extreme eigenvalues) stall direct search
        return float(np.linalg.norm(self.matrix(x).entries - self.target.entries))


def _flat_coords(f, x, box: Box, scale: float, names) -> tuple[str, ...]:
    # coordinates along which the objective does not move across 1% of the box width
    f0 = f(x)
    flat = []
    for i in range(box.dim):
        if box.width[i] == 0:
            continue
        vals = []
        for sign in (1.0, -1.0):
            p = x.copy()
            p[i] = min(max(p[i] + sign * 0.01 * box.width[i], box.lower[i]), box.upper[i])
            if p[i] != x[i]:
                vals.append(f(p))
        if vals and all(abs(v - f0) / scale < 1e-10 for v in vals):
            flat.append(names[i] if i < len(names) else str(i))
    return tuple(flat)


def optimize_scenario(h_qoi: ModelFunctional, x_pred, theta_dist: Distribution, box: Box,
                      opts: OptimizerOptions | None = None, *, starts=None,
                      threads: int | None = None) -> DesignResult:
    """Scenario in ``box`` whose QoI influence matrix best matches the one at ``x_pred``."""
    opts = opts or OptimizerOptions()
    draws = sample(theta_dist, opts.n_samples, opts.rng.with_stream(STREAM_THETA))
    obj = _ScenarioObjective(h_qoi, draws, None)
    target = obj.matrix(np.asarray(x_pred, dtype=float))
    obj.target = target
    tnorm = target.norm()
    # a scenario this close to the target is not worth further neighbourhood search
    opts = replace(opts, f_target=max(opts.f_target, 1e-7 * tnorm))
    runs = multistart(obj, box, opts, starts, threads, surrogate=obj.frobenius)
    ok = [r for r in runs if math.isfinite(r.objective)]
    if not ok:
        raise DesignError("every start failed")
    for r in runs:
        r.normalized = r.objective / tnorm if tnorm > 0 else float("nan")
    best = min(ok, key=lambda r: r.objective)
    names = h_qoi.control_names
    flat = _flat_coords(obj, best.optimum, box, tnorm if tnorm > 0 else 1.0, names)
    return DesignResult(best.optimum, best.objective, runs,
                        best.objective / tnorm if tnorm > 0 else float("nan"), tnorm,
                        tuple(names), flat, h_qoi.id)


# ---------------------------------------------------------------------------
# sensor problem


@dataclass
class SensorScan:
    grid: np.ndarray
    values: np.ndarray
    functional_id: str

    def argmin(self) -> int:
        if np.all(np.isnan(self.values)):
            raise DesignError(f"no valid scan value for {self.functional_id}")
        return int(np.nanargmin(self.values))


@dataclass
class SensorResult:
    functional_id: str
    z: np.ndarray
    objective: float
    candidates: dict = field(default_factory=dict)


class _SensorObjective:
    def __init__(self, h: ModelFunctional, x, draws, target: InfluenceMatrix):
        self.h, self.x, self.draws, self.target = h, np.asarray(x, dtype=float), draws, target

    def __call__(self, z) -> float:
        m = influence_matrix_from_draws(self.h, self.x, np.atleast_1d(z), self.draws, threads=1)
        return normalized_distance(m, self.target)


def _sensor_setup(h_qoi, x_val, theta_dist, opts):
    draws = sample(theta_dist, opts.n_samples, opts.rng.with_stream(STREAM_THETA))
    target = influence_matrix_from_draws(h_qoi, np.asarray(x_val, dtype=float), None, draws,
                                         threads=1)
    if not target.trace > 0:
        raise DegenerateFunctionalError("QoI influence matrix has zero trace")
    return draws, target


def _scan(obj: _SensorObjective, grid: np.ndarray, threads: int) -> np.ndarray:
    def one(z):
        try:
            return obj(z)
        except Exception as exc:
            log.debug("sensor_scan: %s failed at %s (%s)", obj.h.id, z, exc)
            return float("nan")

    if threads > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(one, grid)), dtype=float)
    return np.array([one(z) for z in grid], dtype=float)


def _as_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.size == 0:
        raise ValueError("sensor grid is empty")
    return g.reshape(len(g), -1) if g.ndim <= 2 else g


def sensor_scan(h_obs: ModelFunctional, x_val, h_qoi: ModelFunctional, theta_dist: Distribution,
                grid, opts: OptimizerOptions | None = None, *,
                threads: int | None = None) -> SensorScan:
    """Normalised distance between observable and QoI influence matrices at every grid point."""
    opts = opts or OptimizerOptions()
    g = _as_grid(grid)
    draws, target = _sensor_setup(h_qoi, x_val, theta_dist, opts)
    obj = _SensorObjective(h_obs, x_val, draws, target)
    threads = default_threads() if threads is None else threads
    return SensorScan(g, _scan(obj, g, threads), h_obs.id)


def optimize_sensor(H_lab: Sequence[ModelFunctional], Z_lab, x_val, h_qoi: ModelFunctional,
                    theta_dist: Distribution, opts: OptimizerOptions | None = None, *,
                    threads: int | None = None) -> SensorResult:
    """Best observable and sensor location.

    ``Z_lab`` is either a :class:`Box` (multistart pattern search) or an array
    of candidate locations (exhaustive scan).
    """
    if not H_lab:
        raise ValueError("H_lab is empty")
    opts = opts or OptimizerOptions()
    threads = default_threads() if threads is None else threads
    draws, target = _sensor_setup(h_qoi, x_val, theta_dist, opts)
    best = None
    cands = {}
    for h in H_lab:
        obj = _SensorObjective(h, x_val, draws, target)
        if isinstance(Z_lab, Box):
            def guarded(z, obj=obj):
                try:
                    return obj(z)
                except DegenerateFunctionalError:
                    return math.inf
            try:
                runs = multistart(guarded, Z_lab, opts, threads=threads)
            except ValueError:
                log.info("optimize_sensor: %s is degenerate on the sensor box", h.id)
                continue
            r = min(runs, key=lambda r: r.objective)
            z, val = r.optimum, r.objective
        else:
            g = _as_grid(Z_lab)
            vals = _scan(obj, g, threads)
            if np.all(np.isnan(vals)):
                log.info("optimize_sensor: %s has no valid grid value", h.id)
                continue
            i = int(np.nanargmin(vals))
            z, val = g[i], float(vals[i])
        if not math.isfinite(val):
            continue
        cands[h.id] = (np.asarray(z, dtype=float), float(val))
        if best is None or val < best[2]:
            best = (h.id, np.asarray(z, dtype=float), float(val))
    if best is None:
        raise DegenerateFunctionalError("every candidate observable is degenerate")
    return SensorResult(best[0], best[1], best[2], cands)


# ---------------------------------------------------------------------------
# verification


@dataclass
class VerifyRow:
    initial: np.ndarray
    optimum: np.ndarray
    l2_error: float
    normalized_objective: float
    evals: int


def verify_recovery(h_qoi: ModelFunctional, x_pred, theta_dist: Distribution, X_full: Box,
                    n_starts: int = 10, rng: RngSpec | None = None,
                    opts: OptimizerOptions | None = None, *, starts=None,
                    threads: int | None = None) -> tuple[list[VerifyRow], DesignResult]:
    """Recover ``x_pred`` from ``n_starts`` LHS starts in a box containing it."""
    x_pred = np.asarray(x_pred, dtype=float)
    if not X_full.contains(x_pred):
        raise ValueError("X_full must contain x_pred")
    base = opts or OptimizerOptions()
    opts = replace(base, n_starts=n_starts, rng=rng or base.rng)
    res = optimize_scenario(h_qoi, x_pred, theta_dist, X_full, opts, starts=starts,
                            threads=threads)
    rows = [VerifyRow(r.start, r.optimum, float(np.linalg.norm(r.optimum - x_pred)),
                      r.normalized, r.evals) for r in res.per_start]
    return rows, res


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def write_design_csv(path, res: DesignResult) -> None:
    names = list(res.coords) or [str(i) for i in range(len(res.best_point))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start"] + [f"start_{n}" for n in names] + [f"opt_{n}" for n in names]
                   + ["objective", "normalized_objective", "evals"])
        for k, r in enumerate(res.per_start):
            w.writerow([k] + [_fmt(v) for v in r.start] + [_fmt(v) for v in r.optimum]
                       + [_fmt(r.objective), _fmt(r.normalized), r.evals])


def write_verify_csv(path, rows: list[VerifyRow], names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"initial_{n}" for n in names] + [f"optimal_{n}" for n in names]
                   + ["l2_error", "normalized_objective", "evals"])
        for r in rows:
            w.writerow([_fmt(v) for v in r.initial] + [_fmt(v) for v in r.optimum]
                       + [_fmt(r.l2_error), _fmt(r.normalized_objective), r.evals])


def write_scan_csv(path, scan: SensorScan) -> None:
    dim = scan.grid.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{i + 1}" for i in range(dim)] + ["objective"])
        for z, v in zip(scan.grid, scan.values):
            w.writerow([_fmt(c) for c in z] + ["" if np.isnan(v) else _fmt(v)])


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, RngSpec):
        return asdict(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json(path, data: dict) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
