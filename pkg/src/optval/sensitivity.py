"""Influence matrices, their spectra, and the distances used by the design problems."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import Distribution, GradientError, ModelFunctional, RngSpec, as_rows, sample

__all__ = [
    "InfluenceMatrix",
    "EigenDecomposition",
    "DegenerateFunctionalError",
    "influence_matrix",
    "influence_matrix_from_draws",
    "eig_sym",
    "spectral_distance",
    "normalized_distance",
    "save_influence_matrix",
    "load_influence_matrix",
    "default_threads",
]

SYMMETRY_RTOL = 1e-12


class DegenerateFunctionalError(ValueError):
    """Influence matrix with zero trace (gradient identically zero)."""


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("OPTVAL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class InfluenceMatrix:
    entries: np.ndarray
    coords: tuple[str, ...]
    functional_id: str = ""
    x: tuple[float, ...] = ()
    z: tuple[float, ...] | None = None
    n_samples: int = 0
    seed: RngSpec | None = None
    convergence: float = float("nan")

    def __post_init__(self):
        m = np.array(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("influence matrix must be square")
        if len(self.coords) != m.shape[0]:
            raise ValueError("coords length must match the matrix dimension")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "coords", tuple(self.coords))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))

    def norm(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvalsh(self.entries))))

    def scaled(self, factor: float) -> "InfluenceMatrix":
        return InfluenceMatrix(self.entries * factor, self.coords, self.functional_id,
                               self.x, self.z, self.n_samples, self.seed, self.convergence)


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    coords: tuple[str, ...] = field(default=())


def _outer_sum(grads: np.ndarray) -> np.ndarray:
    # explicit reduction over samples in index order: no BLAS, fixed topology
    outer = grads[:, :, None] * grads[:, None, :]
    return np.add.reduce(outer, axis=0)


def _gradients(f: ModelFunctional, x, draws: np.ndarray, z, threads: int) -> np.ndarray:
    rows = as_rows(draws)
    if threads <= 1 or len(rows) < 2 * threads:
        return f.gradients(x, rows, z)
    chunks = np.array_split(np.arange(len(rows)), threads)

    def work(idx):
        try:
            return f.gradients(x, rows[idx], z)
        except GradientError as exc:
            raise GradientError(f"{exc} (chunk offset {idx[0]})") from exc

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, chunks))
    return np.vstack(parts)


def influence_matrix_from_draws(f: ModelFunctional, x, z, draws, *, seed: RngSpec | None = None,
                                threads: int | None = None) -> InfluenceMatrix:
    """Sample mean of gradient outer products over pre-drawn model parameters."""
    threads = default_threads() if threads is None else threads
    grads = _gradients(f, np.asarray(x, dtype=float), draws, z, threads)
    n = grads.shape[0]
    if not np.all(np.isfinite(grads)):
        bad = int(np.argwhere(~np.all(np.isfinite(grads), axis=1))[0, 0])
        raise GradientError(f"non-finite gradient at sample {bad}")
    total = _outer_sum(grads)
    m = total / n
    m = 0.5 * (m + m.T)
    # running-mean change over the last 10% of samples
    k = max(1, int(0.9 * n))
    if k < n:
        head = _outer_sum(grads[:k]) / k
        denom = max(np.max(np.abs(np.linalg.eigvalsh(m))), np.finfo(float).tiny)
        conv = float(np.max(np.abs(np.linalg.eigvalsh(m - 0.5 * (head + head.T)))) / denom)
    else:
        conv = 0.0
    zt = None if z is None else tuple(float(v) for v in np.atleast_1d(z))
    return InfluenceMatrix(m, f.coords, f.id, tuple(float(v) for v in np.atleast_1d(x)), zt,
                           n, seed, conv)


def influence_matrix(f: ModelFunctional, x, z, theta_dist: Distribution, n: int = 1000,
                     rng: RngSpec | None = None, *, threads: int | None = None) -> InfluenceMatrix:
    """Monte-Carlo estimate of ``E[grad h grad h^T]`` over ``theta ~ theta_dist``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = RngSpec(0) if rng is None else rng
    draws = sample(theta_dist, n, rng)
    return influence_matrix_from_draws(f, x, z, draws, seed=rng, threads=threads)


def _matrix(m) -> np.ndarray:
    return m.entries if isinstance(m, InfluenceMatrix) else np.asarray(m, dtype=float)


def eig_sym(m) -> EigenDecomposition:
    """Eigenvalues in descending order with sign-normalised eigenvectors.

    Each eigenvector is flipped so that its largest-magnitude component is
    positive.
    """
    a = _matrix(m)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    if np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    for j in range(v.shape[1]):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0:
            v[:, j] = -v[:, j]
    coords = m.coords if isinstance(m, InfluenceMatrix) else ()
    return EigenDecomposition(w, v, coords)


def _check_compatible(m1, m2):
    a, b = _matrix(m1), _matrix(m2)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if isinstance(m1, InfluenceMatrix) and isinstance(m2, InfluenceMatrix):
        if m1.coords != m2.coords:
            raise ValueError(f"coordinate labels differ: {m1.coords} vs {m2.coords}")
    return a, b


def spectral_distance(m1, m2) -> float:
    """Spectral norm of ``m1 - m2`` via the symmetric eigenvalues of the difference."""
    a, b = _check_compatible(m1, m2)
    d = a - b
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (d + d.T)))))


def normalized_distance(m1, m2) -> float:
    """Spectral distance between trace-normalised matrices."""
    a, b = _check_compatible(m1, m2)
    ta, tb = np.trace(a), np.trace(b)
    if not (ta > 0) or not (tb > 0):
        raise DegenerateFunctionalError(
            "influence matrix has zero trace: the functional has an identically zero gradient"
        )
    return spectral_distance(a / ta, b / tb)


# ---------------------------------------------------------------------------
# Plain-text serialisation


def _header(m: InfluenceMatrix) -> dict[str, Any]:
    seed = None if m.seed is None else [m.seed.master_seed, m.seed.stream_id, list(m.seed.path)]
    return {
        "functional": m.functional_id,
        "x": list(m.x),
        "z": None if m.z is None else list(m.z),
        "n_samples": m.n_samples,
        "seed": seed,
        "coords": list(m.coords),
        "convergence": None if np.isnan(m.convergence) else m.convergence,
    }


def save_influence_matrix(path, m: InfluenceMatrix) -> None:
    lines = [f"# {k}: {json.dumps(v)}" for k, v in _header(m).items()]
    for row in m.entries:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_influence_matrix(path) -> InfluenceMatrix:
    meta: dict[str, Any] = {}
    rows: list[list[float]] = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            meta[key.strip()] = json.loads(val)
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    seed = meta.get("seed")
    return InfluenceMatrix(
        np.array(rows),
        tuple(meta.get("coords", [])),
        meta.get("functional", ""),
        tuple(meta.get("x", [])),
        None if meta.get("z") is None else tuple(meta["z"]),
        int(meta.get("n_samples", 0)),
        None if seed is None else RngSpec(seed[0], seed[1], tuple(seed[2])),
        float("nan") if meta.get("convergence") is None else float(meta["convergence"]),
    )

