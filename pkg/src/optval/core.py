"""Parameter spaces, distributions, reproducible sampling and the functional contract."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Box",
    "ParameterVector",
    "RngSpec",
    "Distribution",
    "Normal",
    "Uniform",
    "Dirac",
    "Empirical",
    "Product",
    "EmpiricalCDF",
    "ModelFunctional",
    "CallableFunctional",
    "GradientError",
    "sample",
    "lhs_sample",
    "empirical_cdf",
    "fd_gradient",
]


class GradientError(RuntimeError):
    """A functional could not produce a finite gradient."""


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float)).copy()
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lower, "lower")
        hi = _as_vector(self.upper, "upper")
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same length")
        if np.any(lo > hi):
            raise ValueError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_bounds(cls, bounds: Sequence[Sequence[float]]) -> "Box":
        b = np.asarray(bounds, dtype=float).reshape(-1, 2)
        return cls(b[:, 0], b[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lower) and np.all(p <= self.upper))

    def clip(self, point) -> np.ndarray:
        return np.minimum(np.maximum(np.asarray(point, dtype=float), self.lower), self.upper)

    def to_list(self) -> list[list[float]]:
        return [[float(a), float(b)] for a, b in zip(self.lower, self.upper)]


@dataclass(frozen=True)
class ParameterVector:
    """Control, model and sensor blocks of one evaluation point."""

    control: np.ndarray
    model: np.ndarray
    sensor: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "control", _as_vector(self.control, "control"))
        object.__setattr__(self, "model", _as_vector(self.model, "model"))
        sensor = np.asarray(self.sensor, dtype=float)
        object.__setattr__(self, "sensor", _as_vector(sensor, "sensor") if sensor.size else np.zeros(0))

    @property
    def x_theta(self) -> np.ndarray:
        return np.concatenate([self.control, self.model])


# ---------------------------------------------------------------------------
# Random number streams


@dataclass(frozen=True)
class RngSpec:
    """Seed of an independent random stream.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so
    two specs with the same ``(master_seed, stream_id, path)`` always give the
    same sequence and different stream ids give independent ones.
    """

    master_seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if int(self.stream_id) < 0:
            raise ValueError("stream_id must be non-negative")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed), spawn_key=(int(self.stream_id), *self.path)
        )
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, key: int) -> "RngSpec":
        return RngSpec(self.master_seed, self.stream_id, (*self.path, int(key)))

    def with_stream(self, stream_id: int) -> "RngSpec":
        return RngSpec(self.master_seed, stream_id, self.path)


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngSpec):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngSpec or numpy Generator")


# ---------------------------------------------------------------------------
# Distributions


class Distribution:
    """Base class; concrete distributions are immutable value objects."""

    dim: int = 1

    def draw(self, n: int, gen: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def logpdf(self, value) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no density")

    def center(self) -> np.ndarray:
        raise NotImplementedError

    def is_degenerate(self) -> np.ndarray:
        """Per-coordinate flag telling whether the marginal is a point mass."""
        return np.zeros(self.dim, dtype=bool)


@dataclass(frozen=True)
class Normal(Distribution):
    mean: float
    stddev: float

    def __post_init__(self):
        if not math.isfinite(self.mean):
            raise ValueError("Normal mean must be finite")
        if not (self.stddev > 0 and math.isfinite(self.stddev)):
            raise ValueError("Normal stddev must be positive")

    def draw(self, n, gen):
        return gen.normal(self.mean, self.stddev, size=n)

    def logpdf(self, value) -> float:
        z = (float(value) - self.mean) / self.stddev
        return -0.5 * z * z - math.log(self.stddev) - 0.5 * math.log(2 * math.pi)

    def center(self):
        return np.array([self.mean])


@dataclass(frozen=True)
class Uniform(Distribution):
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError("Uniform requires finite lo < hi")

    def draw(self, n, gen):
        return gen.uniform(self.lo, self.hi, size=n)

    def logpdf(self, value) -> float:
        v = float(value)
        if self.lo <= v <= self.hi:
            return -math.log(self.hi - self.lo)
        return -math.inf

    def center(self):
        return np.array([0.5 * (self.lo + self.hi)])


@dataclass(frozen=True)
class Dirac(Distribution):
    point: float

    def __post_init__(self):
        if not math.isfinite(self.point):
            raise ValueError("Dirac point must be finite")

    def draw(self, n, gen):
        return np.full(n, float(self.point))

    def logpdf(self, value) -> float:
        # density w.r.t. the counting measure at the atom
        return 0.0 if float(value) == self.point else -math.inf

    def center(self):
        return np.array([float(self.point)])

    def is_degenerate(self):
        return np.array([True])


class Empirical(Distribution):
    """Resampling distribution over stored draws.

    One-dimensional samples are kept sorted so CDF lookups are logarithmic;
    multi-dimensional samples (rows are draws) are kept in the given order.
    """

    def __init__(self, samples):
        arr = np.asarray(samples, dtype=float)
        if arr.size == 0:
            raise ValueError("Empirical distribution needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Empirical samples must be finite")
        if arr.ndim <= 1:
            arr = np.sort(arr.ravel())
            self.dim = 1
        elif arr.ndim == 2:
            arr = arr.copy()
            self.dim = arr.shape[1]
        else:
            raise ValueError("Empirical samples must be 1-D or 2-D")
        arr.setflags(write=False)
        self.samples = arr

    def __repr__(self):
        return f"Empirical(n={len(self.samples)}, dim={self.dim})"

    def __eq__(self, other):
        return isinstance(other, Empirical) and np.array_equal(self.samples, other.samples)

    def __hash__(self):
        return hash(self.samples.tobytes())

    def draw(self, n, gen):
        idx = gen.integers(0, len(self.samples), size=n)
        return self.samples[idx]

    def center(self):
        return np.atleast_1d(self.samples.mean(axis=0))

    def cdf(self) -> "EmpiricalCDF":
        if self.dim != 1:
            raise ValueError("CDF only defined for one-dimensional samples")
        return EmpiricalCDF(self.samples)


class Product(Distribution):
    """Independent components; draws are rows ``(n, dim)``."""

    def __init__(self, components: Sequence[Distribution]):
        comps = tuple(components)
        if not comps:
            raise ValueError("Product needs at least one component")
        for c in comps:
            if not isinstance(c, Distribution):
                raise TypeError("Product components must be distributions")
        self.components = comps
        self.dim = sum(c.dim for c in comps)

    def __repr__(self):
        return f"Product({list(self.components)!r})"

    def __eq__(self, other):
        return isinstance(other, Product) and self.components == other.components

    def __hash__(self):
        return hash(self.components)

    def draw(self, n, gen):
        cols = []
        for comp in self.components:
            d = comp.draw(n, gen)
            cols.append(d.reshape(n, -1))
        return np.hstack(cols)

    def logpdf(self, value) -> float:
        v = np.atleast_1d(np.asarray(value, dtype=float))
        total, k = 0.0, 0
        for comp in self.components:
            part = v[k] if comp.dim == 1 else v[k : k + comp.dim]
            total += comp.logpdf(part)
            k += comp.dim
            if total == -math.inf:
                break
        return total

    def center(self):
        return np.concatenate([c.center() for c in self.components])

    def is_degenerate(self):
        return np.concatenate([c.is_degenerate() for c in self.components])


def sample(dist: Distribution, n: int, rng) -> np.ndarray:
    """Draw ``n`` values from ``dist``.

    Scalar distributions return shape ``(n,)``; products and multivariate
    empirical distributions return ``(n, dim)``.
    """
    if int(n) < 1:
        raise ValueError("n must be >= 1")
    return dist.draw(int(n), _generator(rng))


def as_rows(draws: np.ndarray) -> np.ndarray:
    """Reshape draws to ``(n, dim)``."""
    arr = np.asarray(draws, dtype=float)
    return arr.reshape(len(arr), -1) if arr.ndim <= 2 else arr


def lhs_sample(box: Box, n: int, rng) -> np.ndarray:
    """Latin hypercube design with ``n`` points inside ``box``.

    Every coordinate has exactly one point in each of the ``n`` equal-width
    strata of its interval; degenerate coordinates repeat their single value.
    """
    if int(n) < 1:
        raise ValueError("n must be >= 1")
    n = int(n)
    gen = _generator(rng)
    d = box.dim
    u = np.empty((n, d))
    for j in range(d):
        perm = gen.permutation(n)
        u[:, j] = (perm + gen.uniform(size=n)) / n
    pts = box.lower + u * box.width
    return box.clip(pts)


# ---------------------------------------------------------------------------
# Empirical CDF


class EmpiricalCDF:
    """Right-continuous step CDF ``F(s) = #{x_i <= s} / n``."""

    def __init__(self, samples):
        arr = np.sort(np.asarray(samples, dtype=float).ravel())
        if arr.size == 0:
            raise ValueError("empirical CDF needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("empirical CDF samples must be finite")
        arr.setflags(write=False)
        self.values = arr

    @property
    def n(self) -> int:
        return self.values.size

    def __call__(self, s):
        out = np.searchsorted(self.values, s, side="right") / self.n
        return float(out) if np.ndim(out) == 0 else out

    def breakpoints(self) -> np.ndarray:
        return np.unique(self.values)


def empirical_cdf(samples) -> EmpiricalCDF:
    return EmpiricalCDF(samples)


# ---------------------------------------------------------------------------
# Functionals


class ModelFunctional:
    """Deterministic functional ``h(x, theta, z)`` with a gradient in ``(x, theta)``.

    Subclasses implement :meth:`value` and :meth:`gradient`; :meth:`gradients`
    may be overridden with a vectorised version.  ``kind`` is ``"qoi"`` for
    functionals that ignore ``z``.
    """

    id: str = "h"
    kind: str = "observable"
    control_names: tuple[str, ...] = ()
    model_names: tuple[str, ...] = ()
    sensor_dim: int = 0

    @property
    def coords(self) -> tuple[str, ...]:
        return (*self.control_names, *self.model_names)

    @property
    def arity(self) -> tuple[int, int, int]:
        return len(self.control_names), len(self.model_names), self.sensor_dim

    def value(self, x, theta, z=None) -> float:
        raise NotImplementedError

    def gradient(self, x, theta, z=None) -> np.ndarray:
        return fd_gradient(self, x, theta, z)

    def values(self, x, thetas, z=None) -> np.ndarray:
        rows = as_rows(thetas)
        return np.array([self.value(x, th, z) for th in rows])

    def gradients(self, x, thetas, z=None) -> np.ndarray:
        """Gradients for each row of ``thetas``, shape ``(n, dx + dtheta)``."""
        rows = as_rows(thetas)
        out = np.empty((len(rows), len(self.coords)))
        for k, th in enumerate(rows):
            try:
                out[k] = self.gradient(x, th, z)
            except Exception as exc:
                raise GradientError(f"gradient evaluation failed at sample {k}: {exc}") from exc
        return out


class CallableFunctional(ModelFunctional):
    """Wrap plain callables ``f(x, theta, z)`` (and optionally a gradient)."""

    def __init__(self, fn, control_names, model_names, *, grad=None, id="h",
                 kind="observable", sensor_dim=0):
        self._fn = fn
        self._grad = grad
        self.id = id
        self.kind = kind
        self.control_names = tuple(control_names)
        self.model_names = tuple(model_names)
        self.sensor_dim = 0 if kind == "qoi" else sensor_dim

    def value(self, x, theta, z=None):
        return float(self._fn(np.asarray(x, float), np.atleast_1d(np.asarray(theta, float)),
                              None if self.kind == "qoi" else z))

    def gradient(self, x, theta, z=None):
        if self._grad is None:
            return fd_gradient(self, x, theta, z)
        return np.asarray(self._grad(np.asarray(x, float), np.atleast_1d(np.asarray(theta, float)),
                                     None if self.kind == "qoi" else z), dtype=float)


def fd_gradient(f: ModelFunctional, x, theta, z=None) -> np.ndarray:
    """Central differences with step ``max(1e-6, 1e-6 |p_i|)`` per coordinate."""
    x = np.asarray(x, dtype=float)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    p = np.concatenate([x, theta])
    dx = x.size
    g = np.empty(p.size)
    for i in range(p.size):
        h = max(1e-6, 1e-6 * abs(p[i]))
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        fu = f.value(up[:dx], up[dx:], z)
        fd = f.value(dn[:dx], dn[dx:], z)
        g[i] = (fu - fd) / (2 * h)
    return g
