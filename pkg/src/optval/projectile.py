"""Vertically launched sphere with linear (Stokes) drag, plus a nonlinear-drag fine model.

Control ``x = (m, ell, u0, v0)``: mass, diameter, initial altitude, initial
upward speed.  Model parameters ``theta = (g, mu)`` with viscosity ``exp(mu)``.

The linear model has the closed form

    u(t) = u0 + v0 t E1(t/tau) - g t^2 E2(t/tau),   tau = m / (3 pi exp(mu) ell)

with ``E1(s) = (1 - e^-s)/s`` and ``E2(s) = (e^-s - 1 + s)/s^2``.  Written this
way nothing cancels when ``tau`` is huge, which is the regime of the reference
scenarios (``t/tau`` around ``1e-4``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import ModelFunctional, RngSpec, _generator, as_rows

__all__ = [
    "CONTROL_NAMES",
    "MODEL_NAMES",
    "X_PRED",
    "X_VAL_TENTATIVE",
    "X_LAB",
    "X_FULL",
    "default_theta_distribution",
    "FineModelConstants",
    "StepSizeError",
    "altitude",
    "velocity",
    "acceleration",
    "time_of_max",
    "qoi_max_altitude",
    "grad_qoi",
    "grad_altitude",
    "grad_acceleration",
    "reynolds",
    "drag_coefficient",
    "fine_trajectory",
    "synthetic_observations",
    "MaxAltitude",
    "Altitude",
    "Acceleration",
]

CONTROL_NAMES = ("m", "ell", "u0", "v0")
MODEL_NAMES = ("g", "mu")

X_PRED = (0.05, 0.01, 1.0, 100.0)
X_VAL_TENTATIVE = (2.5, 0.05, 1.0, 20.0)
X_LAB = ((1.0, 5.0), (0.05, 0.1), (0.0, 2.0), (10.0, 120.0))
X_FULL = ((0.005, 5.0), (0.005, 0.1), (0.0, 2.0), (10.0, 120.0))

LAMINAR_RE_LIMIT = 2e5


def default_theta_distribution():
    from .core import Normal, Product

    return Product([Normal(9.81, 0.01), Normal(-5 * math.log(10), 0.5)])


@dataclass(frozen=True)
class FineModelConstants:
    g: float = 9.81
    visc: float = 1.8e-5
    rho: float = 1.2

    @property
    def theta(self) -> tuple[float, float]:
        return (self.g, math.log(self.visc))


class StepSizeError(RuntimeError):
    """Fixed-step integration did not pass the step-halving check."""


# ---------------------------------------------------------------------------
# small-argument safe auxiliary functions


def _series(coeffs):
    c = np.asarray(coeffs[::-1], dtype=float)

    def horner(s):
        out = np.zeros_like(s)
        for ck in c:
            out = out * s + ck
        return out

    return horner


_N = 22
_E1 = _series([(-1) ** n / math.factorial(n + 1) for n in range(_N)])
_E2 = _series([(-1) ** n / math.factorial(n + 2) for n in range(_N)])
_G1 = _series([(-1) ** k * (k - 1) / math.factorial(k) for k in range(2, _N + 2)])
_H3 = _series([(-1) ** k * (k - 2) / math.factorial(k) for k in range(3, _N + 3)])
# (chi - log1p(chi)) / chi^2 and 2 (chi - log1p(chi)) / chi^2 - 1 / (1 + chi)
_F = _series([(-1) ** n / (n + 2) for n in range(40)])
_PSI = _series([0.0] + [(-1) ** (m + 1) * m / (m + 2) for m in range(1, 40)])

_S_SWITCH = 0.1
_CHI_SWITCH = 0.05


def _branch(s, small, large, switch):
    s = np.asarray(s, dtype=float)
    lo = s < switch
    out = np.empty_like(s)
    if np.any(lo):
        out[lo] = small(s[lo])
    if np.any(~lo):
        out[~lo] = large(s[~lo])
    return out


def e1(s):
    return _branch(s, _E1, lambda v: -np.expm1(-v) / v, _S_SWITCH)


def e2(s):
    return _branch(s, _E2, lambda v: (np.expm1(-v) + v) / v**2, _S_SWITCH)


def _g1(s):
    return _branch(s, _G1, lambda v: (-np.expm1(-v) - v * np.exp(-v)) / v**2, _S_SWITCH)


def _h3(s):
    return _branch(s, _H3, lambda v: (-2 * np.expm1(-v) - v * np.exp(-v) - v) / v**3, _S_SWITCH)


def chi_minus_log1p_over_chi2(chi):
    """``(chi - log1p(chi)) / chi^2``, series below ``chi = 0.05``."""
    return _branch(chi, _F, lambda c: (c - np.log1p(c)) / c**2, _CHI_SWITCH)


def _psi(chi):
    return _branch(chi, _PSI, lambda c: 2 * (c - np.log1p(c)) / c**2 - 1 / (1 + c), _CHI_SWITCH)


# ---------------------------------------------------------------------------
# closed-form linear-drag model


def _unpack(x, theta):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    m, ell, u0, v0 = (x[..., i] for i in range(4))
    g, mu = theta[..., 0], theta[..., 1]
    return m, ell, u0, v0, g, mu


def _tau(m, ell, mu):
    return m / (3 * np.pi * np.exp(mu) * ell)


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def altitude(x, theta, t):
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    t = np.asarray(t, dtype=float)
    s = t / _tau(m, ell, mu)
    return _scalar(u0 + v0 * t * e1(s) - g * t**2 * e2(s))


def velocity(x, theta, t):
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    t = np.asarray(t, dtype=float)
    s = t / _tau(m, ell, mu)
    return _scalar(v0 * np.exp(-s) - g * t * e1(s))


def acceleration(x, theta, t):
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    t = np.asarray(t, dtype=float)
    tau = _tau(m, ell, mu)
    return _scalar(-(v0 / tau + g) * np.exp(-t / tau))


def _chi(m, ell, v0, g, mu):
    return v0 / (g * _tau(m, ell, mu))


def time_of_max(x, theta):
    """Apex time ``tau * log1p(chi)`` with ``chi = v0 / (g tau)``."""
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    tau = _tau(m, ell, mu)
    return _scalar(tau * np.log1p(v0 / (g * tau)))


def qoi_max_altitude(x, theta):
    """Maximum altitude ``u0 + (v0^2/g) (chi - log1p chi) / chi^2``."""
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    chi = np.asarray(_chi(m, ell, v0, g, mu))
    return _scalar(u0 + v0**2 / g * chi_minus_log1p_over_chi2(chi))


def grad_qoi(x, theta):
    """Gradient of the apex altitude w.r.t. ``(m, ell, u0, v0, g, mu)``."""
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    chi = np.asarray(_chi(m, ell, v0, g, mu))
    vv = v0**2 / g
    log_tau = vv * _psi(chi)  # d q / d log(tau)
    d_v0 = v0 / (g * (1 + chi))
    d_g = vv * (chi_minus_log1p_over_chi2(chi) - 1 / (1 + chi)) / g
    return np.stack(
        np.broadcast_arrays(log_tau / m, -log_tau / ell, np.ones_like(chi), d_v0, d_g, -log_tau),
        axis=-1,
    )


def grad_altitude(x, theta, t):
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    t = np.asarray(t, dtype=float)
    tau = _tau(m, ell, mu)
    s = t / tau
    log_tau = t * s * (v0 * _g1(s) + g * t * _h3(s))
    d_v0 = t * e1(s)
    d_g = -(t**2) * e2(s)
    return np.stack(
        np.broadcast_arrays(log_tau / m, -log_tau / ell, np.ones_like(s), d_v0, d_g, -log_tau),
        axis=-1,
    )


def grad_acceleration(x, theta, t):
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    t = np.asarray(t, dtype=float)
    tau = _tau(m, ell, mu)
    s = t / tau
    decay = np.exp(-s)
    log_tau = decay * (v0 / tau * (1 - s) - g * s)
    return np.stack(
        np.broadcast_arrays(log_tau / m, -log_tau / ell, np.zeros_like(s), -decay / tau,
                            -decay, -log_tau),
        axis=-1,
    )


def reynolds(x, theta, t, rho: float = 1.2):
    """Reynolds number ``rho ell |u'(t)| / exp(mu)`` along the linear-model trajectory."""
    m, ell, u0, v0, g, mu = _unpack(x, theta)
    return _scalar(rho * ell * np.abs(velocity(x, theta, t)) / np.exp(mu))


# ---------------------------------------------------------------------------
# fine model


def _re_cd(re):
    # Re * c_D, finite at Re = 0
    return 24.0 * (1.0 + 0.15 * re**0.681) + 0.407 * re * re / (re + 8710.0)


def drag_coefficient(re):
    re = np.asarray(re, dtype=float)
    return _scalar(_re_cd(re) / re)


def _rk4(x, times, dt, c: FineModelConstants):
    m, ell, u0, v0 = (float(v) for v in x)
    k_drag = math.pi * ell * c.visc / (8.0 * m)
    re_scale = c.rho * ell / c.visc
    g = c.g

    def rhs(v):
        re = re_scale * abs(v)
        return -g - k_drag * _re_cd(re) * v

    u, v, t = u0, v0, 0.0
    out = np.empty(len(times))
    max_re = re_scale * abs(v)
    for idx, target in enumerate(times):
        span = target - t
        if span > 0:
            steps = max(1, math.ceil(span / dt - 1e-9))
            h = span / steps
            for _ in range(steps):
                a1 = rhs(v)
                v2 = v + 0.5 * h * a1
                a2 = rhs(v2)
                v3 = v + 0.5 * h * a2
                a3 = rhs(v3)
                v4 = v + h * a3
                a4 = rhs(v4)
                u += h * (v + 2 * v2 + 2 * v3 + v4) / 6.0
                v += h * (a1 + 2 * a2 + 2 * a3 + a4) / 6.0
                max_re = max(max_re, re_scale * abs(v))
            t = target
        out[idx] = u
    return out, max_re


def fine_trajectory(x, t_grid, *, dt: float = 2e-3, constants: FineModelConstants | None = None,
                    check: bool = True) -> np.ndarray:
    """Altitude of the quadratic-drag model on ``t_grid`` (RK4, fixed step).

    The result is recomputed with half the step; if the two runs differ by more
    than ``1e-6`` relative to the trajectory scale a :class:`StepSizeError` is
    raised.
    """
    c = constants or FineModelConstants()
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t_grid < 0):
        raise ValueError("times must be non-negative")
    order = np.argsort(t_grid, kind="stable")
    times = t_grid[order]
    fine, max_re = _rk4(x, times, dt / 2 if check else dt, c)
    if check:
        coarse, _ = _rk4(x, times, dt, c)
        scale = max(1.0, float(np.max(np.abs(fine))))
        if np.max(np.abs(fine - coarse)) > 1e-6 * scale:
            raise StepSizeError(f"step-halving changed the trajectory by more than 1e-6; "
                                f"retry with dt < {dt / 2:g}")
    if max_re >= LAMINAR_RE_LIMIT:
        warnings.warn(f"Reynolds number reached {max_re:.3g}, beyond the laminar drag law",
                      RuntimeWarning, stacklevel=2)
    out = np.empty_like(fine)
    out[order] = fine
    return out


def synthetic_observations(x, t: float, n: int, rng, *, noise: float = 0.05,
                           constants: FineModelConstants | None = None,
                           dt: float = 2e-3) -> np.ndarray:
    """``n`` draws of ``u_fine(x, t) * N(1, noise^2)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    truth = float(fine_trajectory(x, [t], dt=dt, constants=constants)[0])
    gen = _generator(rng) if not isinstance(rng, int) else RngSpec(rng).generator()
    return truth * (1.0 + noise * gen.standard_normal(int(n)))


# ---------------------------------------------------------------------------
# functionals


class _Projectile(ModelFunctional):
    control_names = CONTROL_NAMES
    model_names = MODEL_NAMES

    def _z(self, z):
        if z is None:
            raise ValueError(f"{self.id} needs a sensor time")
        return float(np.atleast_1d(z)[0])


class MaxAltitude(_Projectile):
    id = "max_altitude"
    kind = "qoi"

    def value(self, x, theta, z=None):
        return qoi_max_altitude(x, theta)

    def values(self, x, thetas, z=None):
        return np.asarray(qoi_max_altitude(x, as_rows(thetas)))

    def gradient(self, x, theta, z=None):
        return grad_qoi(x, theta)

    def gradients(self, x, thetas, z=None):
        return grad_qoi(x, as_rows(thetas))


class Altitude(_Projectile):
    id = "altitude"
    sensor_dim = 1

    def value(self, x, theta, z=None):
        return altitude(x, theta, self._z(z))

    def values(self, x, thetas, z=None):
        return np.asarray(altitude(x, as_rows(thetas), self._z(z)))

    def gradient(self, x, theta, z=None):
        return grad_altitude(x, theta, self._z(z))

    def gradients(self, x, thetas, z=None):
        return grad_altitude(x, as_rows(thetas), self._z(z))


class Acceleration(_Projectile):
    id = "acceleration"
    sensor_dim = 1

    def value(self, x, theta, z=None):
        return acceleration(x, theta, self._z(z))

    def values(self, x, thetas, z=None):
        return np.asarray(acceleration(x, as_rows(thetas), self._z(z)))

    def gradient(self, x, theta, z=None):
        return grad_acceleration(x, theta, self._z(z))

    def gradients(self, x, thetas, z=None):
        return grad_acceleration(x, as_rows(thetas), self._z(z))
