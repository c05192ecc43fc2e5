"""Steady advection-diffusion in a rectangular channel with exact discrete adjoints.

Unknowns live on the nodes of a uniform ``(nx+1) x (ny+1)`` grid.  Each node
owns the box made of the quarter cells around it (vertex-centred finite
volumes).  Diffusion uses the two-point flux across every box face segment,
which reduces to the 5-point stencil on the uniform grid; advection is
first-order upwind with segment fluxes taken from the bilinear interpolant of
the nodal velocity.

West nodes carry the Dirichlet data through identity rows, so the right-hand
side ``b`` holds the hat-weighted average of ``phi_D`` around each west node
there and zeros elsewhere.  Every other boundary is
zero diffusive flux; flow leaving through a boundary segment carries the
upwind nodal value out, flow entering through it brings nothing in.

Functionals are region means ``h = g^T phi``.  With the adjoint ``A^T lam = -g``:

    dh/dx = -lam^T db/dx,      dh/dk = lam^T (dA/dk) phi = exp(k) lam^T A_diff phi
"""

from __future__ import annotations

import csv
import hashlib
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .core import ModelFunctional, as_rows

__all__ = [
    "CONTROL_NAMES",
    "MODEL_NAMES",
    "K0",
    "X_PRED",
    "X_LAB",
    "X_VERIFY",
    "OMEGA_1",
    "OMEGA_2",
    "DOCKS",
    "Grid",
    "Region",
    "VelocityField",
    "ConcentrationField",
    "Adjoint",
    "SolveError",
    "StaleAdjointError",
    "mollifier",
    "mollifier_grad",
    "boundary_values",
    "poiseuille_velocity",
    "zero_velocity",
    "load_velocity",
    "save_velocity",
    "discrete_divergence",
    "assemble",
    "solve_concentration",
    "region_weights",
    "mean_concentration",
    "adjoint_solve",
    "gradient_control",
    "gradient_diffusivity",
    "observation_region",
    "observation_grid",
    "TransportFunctional",
    "transport_functional",
    "write_field_csv",
]

CONTROL_NAMES = ("z0", "L", "c")
MODEL_NAMES = ("k",)
K0 = -2 * math.log(10)
X_PRED = (0.75, 0.6, 2.0)
X_LAB = ((0.1, 1.9), (0.05, 0.1), (0.5, 1.0))
X_VERIFY = ((0.1, 1.9), (0.005, 1.0), (0.1, 10.0))

DOCKS = ((1.4, 1.6, 0.0, 0.4), (2.6, 2.8, 0.0, 0.8))


class SolveError(RuntimeError):
    """Linear solve failed or did not reach the residual tolerance."""


class StaleAdjointError(ValueError):
    """Adjoint computed for a different discrete operator."""


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Region:
    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("region needs positive area")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @classmethod
    def square(cls, center, side: float = 0.1) -> "Region":
        cx, cy = (float(v) for v in center)
        return cls(cx - side / 2, cx + side / 2, cy - side / 2, cy + side / 2)


OMEGA_1 = Region(1.7, 2.3, 0.1, 0.5)
OMEGA_2 = Region(3.4, 4.0, 1.5, 1.9)


@dataclass(frozen=True)
class Grid:
    width: float = 5.0
    height: float = 2.0
    nx: int = 64
    ny: int = 32
    docks: tuple = ()

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError("grid needs at least 4 cells per direction")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("domain must have positive size")
        object.__setattr__(self, "docks", tuple(tuple(float(v) for v in d) for d in self.docks))

    @classmethod
    def channel(cls, nx: int = 64, ny: int = 32, docks: bool = False) -> "Grid":
        return cls(5.0, 2.0, nx, ny, DOCKS if docks else ())

    @property
    def hx(self) -> float:
        return self.width / self.nx

    @property
    def hy(self) -> float:
        return self.height / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Node array shape ``(ny+1, nx+1)``."""
        return self.ny + 1, self.nx + 1

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def node(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def x_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.width, self.nx + 1)

    def y_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.height, self.ny + 1)

    @property
    def solid(self) -> np.ndarray:
        """Cell mask, shape ``(ny, nx)``, true inside the docks."""
        xc = (np.arange(self.nx) + 0.5) * self.hx
        yc = (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(xc, yc)
        mask = np.zeros((self.ny, self.nx), dtype=bool)
        for x0, x1, y0, y1 in self.docks:
            mask |= (X > x0) & (X < x1) & (Y > y0) & (Y < y1)
        return mask

    def active_nodes(self) -> np.ndarray:
        """Nodes touching at least one fluid cell, shape ``(ny+1, nx+1)``."""
        fluid = ~self.solid
        act = np.zeros(self.shape, dtype=bool)
        act[:-1, :-1] |= fluid
        act[:-1, 1:] |= fluid
        act[1:, :-1] |= fluid
        act[1:, 1:] |= fluid
        return act

    def key(self) -> str:
        return f"{self.width!r}:{self.height!r}:{self.nx}:{self.ny}:{self.docks!r}"


@dataclass(frozen=True)
class VelocityField:
    """Nodal velocity, array of shape ``(ny+1, nx+1, 2)``."""

    values: np.ndarray
    grid: Grid
    _key: str = field(default="", compare=False, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (*self.grid.shape, 2):
            raise ValueError(f"velocity shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("velocity must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_key", hashlib.sha1(v.tobytes()).hexdigest())

    @property
    def key(self) -> str:
        return self._key


def zero_velocity(grid: Grid) -> VelocityField:
    return VelocityField(np.zeros((*grid.shape, 2)), grid)


def poiseuille_velocity(grid: Grid, vmax: float = 1.0) -> VelocityField:
    """Fully developed parabolic profile ``vmax (4/H^2) (H - y) y`` along x."""
    if grid.docks:
        raise ValueError("the analytic profile ignores the docks; load an external field instead")
    y = grid.y_nodes()
    H = grid.height
    u = vmax * 4.0 / H**2 * (H - y) * y
    v = np.zeros((*grid.shape, 2))
    v[:, :, 0] = u[:, None]
    return VelocityField(v, grid)


def _zero_solid(values: np.ndarray, grid: Grid) -> np.ndarray:
    solid = grid.solid
    touch = np.zeros(grid.shape, dtype=bool)
    touch[:-1, :-1] |= solid
    touch[:-1, 1:] |= solid
    touch[1:, :-1] |= solid
    touch[1:, 1:] |= solid
    out = values.copy()
    out[touch] = 0.0
    return out


def load_velocity(path, grid: Grid) -> VelocityField:
    """Read ``nx ny W H`` then one ``v1 v2`` row per node (x fastest)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty velocity file")
    head = lines[0].split()
    if len(head) != 4:
        raise ValueError(f"{path}: header must be 'nx ny W H'")
    nx, ny = int(head[0]), int(head[1])
    W, H = float(head[2]), float(head[3])
    if (nx, ny) != (grid.nx, grid.ny) or not (math.isclose(W, grid.width) and math.isclose(H, grid.height)):
        raise ValueError(f"{path}: velocity grid ({nx}, {ny}, {W}, {H}) does not match "
                         f"({grid.nx}, {grid.ny}, {grid.width}, {grid.height})")
    rows = np.array([[float(t) for t in ln.split()] for ln in lines[1:]])
    if rows.shape != (grid.n_nodes, 2):
        raise ValueError(f"{path}: expected {grid.n_nodes} rows of 2 values, got {rows.shape}")
    vals = rows.reshape(*grid.shape, 2)
    return VelocityField(_zero_solid(vals, grid), grid)


def save_velocity(path, vel: VelocityField) -> None:
    g = vel.grid
    lines = [f"{g.nx} {g.ny} {g.width!r} {g.height!r}"]
    for v1, v2 in vel.values.reshape(-1, 2):
        lines.append(f"{v1:.17g} {v2:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# mollifier


def mollifier(x, z2):
    """Compactly supported bump ``c exp(1/(|s| - 1))`` with ``s = (z2 - z0)/L``."""
    z0, L, c = (float(v) for v in x[:3])
    s = (np.asarray(z2, dtype=float) - z0) / L
    r = np.abs(s)
    inside = r < 1
    out = np.zeros_like(r)
    out[inside] = c * np.exp(1.0 / (r[inside] - 1.0))
    return float(out) if out.ndim == 0 else out


def mollifier_grad(x, z2):
    """Derivatives of :func:`mollifier` w.r.t. ``(z0, L, c)``; last axis of length 3.

    The bump has a kink at ``z2 = z0``; the one-sided slopes are averaged there
    (``sign(0) = 0``).
    """
    z0, L, c = (float(v) for v in x[:3])
    s = np.atleast_1d((np.asarray(z2, dtype=float) - z0) / L)
    r = np.abs(s)
    out = np.zeros((*r.shape, 3))
    inside = r < 1
    ri = r[inside]
    e = np.exp(1.0 / (ri - 1.0))
    pos = e > 0
    w = np.zeros_like(ri)
    w[pos] = e[pos] / (L * (ri[pos] - 1.0) ** 2)
    out[inside, 0] = c * w * np.sign(s[inside])
    out[inside, 1] = c * w * ri
    out[inside, 2] = e
    return out[0] if np.ndim(z2) == 0 else out


# ---------------------------------------------------------------------------
# assembly


def _segment_data(grid: Grid, vel: VelocityField | None):
    """Interior segments ``(a, b, dcoef, flux)`` and boundary half-edges ``(node, flux)``."""
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    fluid = ~grid.solid
    jj, ii = np.nonzero(fluid)
    n00 = grid.node(ii, jj)
    n10 = grid.node(ii + 1, jj)
    n01 = grid.node(ii, jj + 1)
    n11 = grid.node(ii + 1, jj + 1)
    if vel is None:
        V = np.zeros((*grid.shape, 2))
    else:
        V = vel.values
    v00, v10 = V[jj, ii], V[jj, ii + 1]
    v01, v11 = V[jj + 1, ii], V[jj + 1, ii + 1]

    def interp(xi, eta, comp):
        return ((1 - xi) * (1 - eta) * v00[:, comp] + xi * (1 - eta) * v10[:, comp]
                + (1 - xi) * eta * v01[:, comp] + xi * eta * v11[:, comp])

    a = np.concatenate([n00, n01, n00, n10])
    b = np.concatenate([n10, n11, n01, n11])
    dx_coef = 0.5 * hy / hx
    dy_coef = 0.5 * hx / hy
    m = len(ii)
    dcoef = np.concatenate([np.full(2 * m, dx_coef), np.full(2 * m, dy_coef)])
    flux = np.concatenate([
        interp(0.5, 0.25, 0) * 0.5 * hy,
        interp(0.5, 0.75, 0) * 0.5 * hy,
        interp(0.25, 0.5, 1) * 0.5 * hx,
        interp(0.75, 0.5, 1) * 0.5 * hx,
    ])

    # boundary half-edges of fluid cells (domain edges and dock walls)
    pad = np.ones((ny + 2, nx + 2), dtype=bool)
    pad[1:-1, 1:-1] = ~fluid
    west = pad[jj + 1, ii]
    east = pad[jj + 1, ii + 2]
    south = pad[jj, ii + 1]
    north = pad[jj + 2, ii + 1]
    bnodes, bflux = [], []
    for sel, nodes, xi_eta, comp, sign, length in (
        (west, (n00, n01), ((0.0, 0.25), (0.0, 0.75)), 0, -1.0, 0.5 * hy),
        (east, (n10, n11), ((1.0, 0.25), (1.0, 0.75)), 0, 1.0, 0.5 * hy),
        (south, (n00, n10), ((0.25, 0.0), (0.75, 0.0)), 1, -1.0, 0.5 * hx),
        (north, (n01, n11), ((0.25, 1.0), (0.75, 1.0)), 1, 1.0, 0.5 * hx),
    ):
        for node, (xi, eta) in zip(nodes, xi_eta):
            bnodes.append(node[sel])
            bflux.append(sign * interp(xi, eta, comp)[sel] * length)
    return a, b, dcoef, flux, np.concatenate(bnodes), np.concatenate(bflux)


def _fixed_rows(grid: Grid) -> np.ndarray:
    """Rows replaced by identities: west Dirichlet nodes and nodes inside docks."""
    fixed = ~grid.active_nodes()
    fixed[:, 0] = True
    return fixed.ravel()


@dataclass
class _Operator:
    A: sp.csc_matrix
    A_diff: sp.csr_matrix
    lu: object
    fixed: np.ndarray
    key: str


_CACHE: "OrderedDict[str, _Operator]" = OrderedDict()
_CACHE_LOCK = threading.Lock()
_CACHE_SIZE = 16


def _operator_key(grid: Grid, vel: VelocityField | None, k: float) -> str:
    vk = "none" if vel is None else vel.key
    return hashlib.sha1(f"{grid.key()}|{vk}|{float(k).hex()}".encode()).hexdigest()


def _diffusion(grid: Grid, a, b, dcoef, fixed, n) -> sp.csr_matrix:
    rows = np.concatenate([a, a, b, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([dcoef, -dcoef, dcoef, -dcoef])
    keep = ~fixed[rows]
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def assemble(grid: Grid, vel: VelocityField | None, k: float):
    """Return ``(A, A_diff, fixed)``: full operator, unit diffusion part, identity-row mask."""
    n = grid.n_nodes
    a, b, dcoef, flux, bn, bf = _segment_data(grid, vel)
    fixed = _fixed_rows(grid)
    A_diff = _diffusion(grid, a, b, dcoef, fixed, n)
    fp = np.maximum(flux, 0.0)
    fm = np.minimum(flux, 0.0)
    rows = np.concatenate([a, a, b, b, bn])
    cols = np.concatenate([a, b, a, b, bn])
    vals = np.concatenate([fp, fm, -fp, -fm, np.maximum(bf, 0.0)])
    keep = ~fixed[rows]
    adv = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
    ident = sp.diags(fixed.astype(float))
    A = (math.exp(k) * A_diff + adv + ident).tocsc()
    A.sum_duplicates()
    A.eliminate_zeros()
    return A, A_diff, fixed


def _operator(grid: Grid, vel: VelocityField | None, k: float) -> _Operator:
    key = _operator_key(grid, vel, k)
    with _CACHE_LOCK:
        op = _CACHE.get(key)
        if op is not None:
            _CACHE.move_to_end(key)
            return op
    A, A_diff, fixed = assemble(grid, vel, k)
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise SolveError(f"singular transport operator: {exc}") from exc
    op = _Operator(A, A_diff, lu, fixed, key)
    with _CACHE_LOCK:
        _CACHE[key] = op
        while len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    return op


def _checked_solve(op: _Operator, rhs: np.ndarray, transpose: bool) -> np.ndarray:
    trans = "T" if transpose else "N"
    sol = op.lu.solve(rhs, trans=trans)
    M = op.A.T if transpose else op.A
    bnorm = np.linalg.norm(rhs)
    res = np.linalg.norm(M @ sol - rhs)
    if res > 1e-10 * bnorm:
        sol = sol + op.lu.solve(rhs - M @ sol, trans=trans)
        res = np.linalg.norm(M @ sol - rhs)
        if res > 1e-10 * bnorm:
            raise SolveError(f"transport solve residual {res:.3e} exceeds 1e-10 * {bnorm:.3e}")
    if not np.all(np.isfinite(sol)):
        raise SolveError("transport solve produced non-finite values")
    return sol


def discrete_divergence(grid: Grid, vel: VelocityField) -> np.ndarray:
    """Net outflow of segment fluxes per node (interior segments only), shape ``grid.shape``."""
    a, b, _, flux, _, _ = _segment_data(grid, vel)
    div = np.zeros(grid.n_nodes)
    np.add.at(div, a, flux)
    np.add.at(div, b, -flux)
    return div.reshape(grid.shape)


# ---------------------------------------------------------------------------
# forward problem


@dataclass(frozen=True)
class ConcentrationField:
    values: np.ndarray  # shape (ny+1, nx+1)
    grid: Grid
    x: tuple[float, ...]
    k: float
    operator_key: str

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def boundary_values(grid: Grid, x, grad: bool = False):
    """Dirichlet data on the west nodes: hat-weighted averages of the mollifier.

    Node ``j`` receives ``int psi_j phi_D dy / int psi_j dy`` with ``psi_j`` the
    piecewise-linear hat of that node.  Sampling the bump pointwise would make
    ``db/dz0`` jump whenever the kink of the bump crosses a node; the average
    is continuously differentiable in ``(z0, L, c)``.

    The integral is split at the hat peak, at the kink ``z0`` and at the
    support ends ``z0 +- L``, and each piece uses 12-point Gauss-Legendre
    quadrature.  With ``grad=True`` the exact derivative of that quadrature
    (moving endpoints included) is returned as well, shape ``(ny+1, 3)``.
    """
    z0, L, c = (float(v) for v in x[:3])
    hy, H = grid.hy, grid.height
    yj = grid.y_nodes()
    lo = np.maximum(yj - hy, 0.0)
    hi = np.minimum(yj + hy, H)
    n = yj.size
    # candidate breakpoints with their derivatives w.r.t. z0 and L
    pos = np.column_stack([lo, hi, yj, np.full(n, z0), np.full(n, z0 - L), np.full(n, z0 + L)])
    dz = np.tile([0.0, 0.0, 0.0, 1.0, 1.0, 1.0], (n, 1))
    dL = np.tile([0.0, 0.0, 0.0, 0.0, -1.0, 1.0], (n, 1))
    clipped = (pos < lo[:, None]) | (pos > hi[:, None])
    pos = np.clip(pos, lo[:, None], hi[:, None])
    dz[clipped] = 0.0
    dL[clipped] = 0.0
    order = np.argsort(pos, axis=1, kind="stable")
    pos = np.take_along_axis(pos, order, 1)
    dz = np.take_along_axis(dz, order, 1)
    dL = np.take_along_axis(dL, order, 1)
    a, b = pos[:, :-1, None], pos[:, 1:, None]
    t = 0.5 * (1.0 + _GL_X)
    y = a + (b - a) * t
    half = 0.5 * (b - a)

    psi = 1.0 - np.abs(y - yj[:, None, None]) / hy
    u = y - z0
    r = np.abs(u) / L
    inside = r < 1.0
    E = np.zeros_like(r)
    E[inside] = np.exp(1.0 / (r[inside] - 1.0))
    F = psi * c * E
    norm = np.where((yj == 0) | (yj == H), 0.5 * hy, hy)
    vals = np.sum(half[..., 0] * np.sum(_GL_W * F, axis=2), axis=1) / norm
    if not grad:
        return vals

    k = np.zeros_like(r)
    ok = inside & (E > 0)
    k[ok] = E[ok] / (L * (r[ok] - 1.0) ** 2)
    f_u = -c * k * np.sign(u)
    f_L = c * k * r
    dpsi = -np.sign(y - yj[:, None, None]) / hy
    F_y = dpsi * c * E + psi * f_u

    def piece_derivative(da, db, F_p):
        da, db = da[:, :-1, None], db[:, 1:, None]
        dy = da + (db - da) * t
        total = 0.5 * (db - da) * np.sum(_GL_W * F, axis=2, keepdims=True) \
            + half * np.sum(_GL_W * (F_y * dy + F_p), axis=2, keepdims=True)
        return np.sum(total[..., 0], axis=1) / norm

    # endpoint derivatives follow the sorted breakpoints
    d_z0 = piece_derivative(dz, dz, -psi * f_u)
    d_L = piece_derivative(dL, dL, psi * f_L)
    d_c = np.sum(half[..., 0] * np.sum(_GL_W * psi * E, axis=2), axis=1) / norm
    return vals, np.column_stack([d_z0, d_L, d_c])


def _rhs(grid: Grid, x, dirichlet=None) -> np.ndarray:
    b = np.zeros(grid.n_nodes)
    west = grid.node(0, np.arange(grid.ny + 1))
    b[west] = dirichlet(grid.y_nodes()) if dirichlet is not None else boundary_values(grid, x)
    return b


def _rhs_grad(grid: Grid, x) -> np.ndarray:
    """``db/dx`` as a dense ``(n_nodes, 3)`` array (nonzero on the west column only)."""
    d = np.zeros((grid.n_nodes, 3))
    west = grid.node(0, np.arange(grid.ny + 1))
    d[west] = boundary_values(grid, x, grad=True)[1]
    return d


def solve_concentration(grid: Grid, vel: VelocityField | None, x, k: float, *,
                        dirichlet=None) -> ConcentrationField:
    """Solve ``A(k) phi = b(x)``.

    ``dirichlet`` optionally replaces the mollifier by any callable of the
    west-boundary coordinate.
    """
    if not math.isfinite(k):
        raise ValueError("k must be finite")
    op = _operator(grid, vel, k)
    b = _rhs(grid, x, dirichlet)
    phi = _checked_solve(op, b, transpose=False) if np.any(b) else np.zeros_like(b)
    return ConcentrationField(phi.reshape(grid.shape), grid, tuple(float(v) for v in x),
                              float(k), op.key)


def region_weights(grid: Grid, region: Region) -> np.ndarray:
    """Weights ``g`` with ``g @ phi`` the mean over the fluid part of ``region``.

    Each fluid cell contributes its intersection area times the bilinear
    interpolant at the intersection centre, which integrates the bilinear
    interpolant of ``phi`` exactly.
    """
    fluid = ~grid.solid
    hx, hy = grid.hx, grid.hy
    i0 = max(0, int(math.floor(region.x0 / hx)))
    i1 = min(grid.nx, int(math.ceil(region.x1 / hx)))
    j0 = max(0, int(math.floor(region.y0 / hy)))
    j1 = min(grid.ny, int(math.ceil(region.y1 / hy)))
    g = np.zeros(grid.n_nodes)
    total = 0.0
    for j in range(j0, j1):
        ylo, yhi = max(region.y0, j * hy), min(region.y1, (j + 1) * hy)
        if yhi <= ylo:
            continue
        for i in range(i0, i1):
            if not fluid[j, i]:
                continue
            xlo, xhi = max(region.x0, i * hx), min(region.x1, (i + 1) * hx)
            if xhi <= xlo:
                continue
            area = (xhi - xlo) * (yhi - ylo)
            xi = (0.5 * (xlo + xhi) - i * hx) / hx
            eta = (0.5 * (ylo + yhi) - j * hy) / hy
            g[grid.node(i, j)] += area * (1 - xi) * (1 - eta)
            g[grid.node(i + 1, j)] += area * xi * (1 - eta)
            g[grid.node(i, j + 1)] += area * (1 - xi) * eta
            g[grid.node(i + 1, j + 1)] += area * xi * eta
            total += area
    if total <= 0:
        raise ValueError(f"region {region} does not intersect any fluid cell")
    return g / total


def mean_concentration(field: ConcentrationField, region: Region) -> float:
    return float(region_weights(field.grid, region) @ field.flat)


# ---------------------------------------------------------------------------
# adjoint


@dataclass(frozen=True)
class Adjoint:
    values: np.ndarray  # flat, length n_nodes
    operator_key: str
    region: Region | None


def adjoint_solve(grid: Grid, vel: VelocityField | None, k: float, region: Region | None = None,
                  *, weights: np.ndarray | None = None) -> Adjoint:
    """Solve ``A^T lam = -g`` for the region-mean weights ``g``."""
    op = _operator(grid, vel, k)
    g = region_weights(grid, region) if weights is None else np.asarray(weights, dtype=float)
    lam = _checked_solve(op, -g, transpose=True) if np.any(g) else np.zeros(grid.n_nodes)
    return Adjoint(lam, op.key, region)


def _check(lam: Adjoint, key: str):
    if lam.operator_key != key:
        raise StaleAdjointError("adjoint was computed for a different grid, velocity or k")


def gradient_control(grid: Grid, vel: VelocityField | None, k: float, x, lam: Adjoint) -> np.ndarray:
    """``dh/d(z0, L, c) = -lam^T db/dx``.

    The Dirichlet values sit in identity rows of the system, so ``h`` has no
    explicit dependence on ``x`` beyond ``phi``.
    """
    _check(lam, _operator_key(grid, vel, k))
    return -(lam.values @ _rhs_grad(grid, x))


def gradient_diffusivity(grid: Grid, vel: VelocityField | None, k: float,
                         phi: ConcentrationField, lam: Adjoint) -> float:
    """``dh/dk = exp(k) lam^T A_diff phi``."""
    key = _operator_key(grid, vel, k)
    _check(lam, key)
    if phi.operator_key != key:
        raise StaleAdjointError("concentration field belongs to a different operator")
    op = _operator(grid, vel, k)
    return float(math.exp(k) * (lam.values @ (op.A_diff @ phi.flat)))


# ---------------------------------------------------------------------------
# functionals


def observation_region(z, side: float = 0.1) -> Region:
    return Region.square(z, side)


def observation_grid(grid: Grid, spacing: float = 0.25) -> np.ndarray:
    """Centres of the ``spacing``-sized tiles covering the domain, shape ``(n, 2)``."""
    xs = np.arange(spacing / 2, grid.width, spacing)
    ys = np.arange(spacing / 2, grid.height, spacing)
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


class TransportFunctional(ModelFunctional):
    """Mean concentration over a fixed region (QoI) or an observation square at ``z``."""

    control_names = CONTROL_NAMES
    model_names = MODEL_NAMES

    def __init__(self, grid: Grid, vel: VelocityField | None, *, region: Region | None = None,
                 id: str = "qoi", obs_side: float = 0.1):
        self.grid = grid
        self.vel = vel
        self.region = region
        self.obs_side = obs_side
        self.id = id
        self.kind = "qoi" if region is not None else "observable"
        self.sensor_dim = 0 if region is not None else 2
        self._lock = threading.Lock()
        self._adjoints: dict = {}

    def _region(self, z) -> Region:
        if self.region is not None:
            return self.region
        if z is None:
            raise ValueError(f"{self.id} needs a sensor location")
        return observation_region(np.asarray(z, dtype=float)[:2], self.obs_side)

    def _adjoint(self, k: float, region: Region) -> Adjoint:
        key = (_operator_key(self.grid, self.vel, k), region)
        with self._lock:
            lam = self._adjoints.get(key)
        if lam is None:
            lam = adjoint_solve(self.grid, self.vel, k, region)
            with self._lock:
                if len(self._adjoints) > 256:
                    self._adjoints.clear()
                self._adjoints[key] = lam
        return lam

    def value(self, x, theta, z=None) -> float:
        k = float(np.atleast_1d(theta)[0])
        lam = self._adjoint(k, self._region(z))
        # h = g^T A^-1 b = -lam^T b
        return float(-(lam.values @ _rhs(self.grid, x)))

    def gradient(self, x, theta, z=None) -> np.ndarray:
        k = float(np.atleast_1d(theta)[0])
        lam = self._adjoint(k, self._region(z))
        phi = solve_concentration(self.grid, self.vel, x, k)
        gx = gradient_control(self.grid, self.vel, k, x, lam)
        gk = gradient_diffusivity(self.grid, self.vel, k, phi, lam)
        return np.concatenate([gx, [gk]])

    def gradients(self, x, thetas, z=None) -> np.ndarray:
        rows = as_rows(thetas)
        uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
        grads = super().gradients(x, uniq, z)
        return grads[np.asarray(inverse).ravel()]

    def field(self, x, k: float) -> ConcentrationField:
        return solve_concentration(self.grid, self.vel, x, k)


def transport_functional(kind: str, grid: Grid | None = None, vel: VelocityField | None = None,
                         *, omega1: Region = OMEGA_1, omega2: Region = OMEGA_2,
                         obs_side: float = 0.1) -> TransportFunctional:
    """``kind`` is ``"qoi1"``, ``"qoi2"`` or ``"obs"``."""
    grid = grid or Grid.channel()
    if vel is None:
        vel = poiseuille_velocity(grid)
    if kind == "qoi1":
        return TransportFunctional(grid, vel, region=omega1, id="qoi1")
    if kind == "qoi2":
        return TransportFunctional(grid, vel, region=omega2, id="qoi2")
    if kind == "obs":
        return TransportFunctional(grid, vel, id="obs", obs_side=obs_side)
    raise ValueError(f"unknown transport functional {kind!r}")


def write_field_csv(path, grid: Grid, values) -> None:
    vals = np.asarray(values, dtype=float).reshape(grid.shape)
    X, Y = np.meshgrid(grid.x_nodes(), grid.y_nodes())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for xv, yv, v in zip(X.ravel(), Y.ravel(), vals.ravel()):
            w.writerow([f"{xv:.17g}", f"{yv:.17g}", f"{v:.17g}"])
