import math

import numpy as np
import pytest
from scipy.integrate import quad

from optval import transport as tr
from optval.core import Dirac
from optval.sensitivity import influence_matrix

K0 = tr.K0
GRID = tr.Grid.channel()
VEL = tr.poiseuille_velocity(GRID)


def _rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b)


def _random_controls(n, seed):
    gen = np.random.default_rng(seed)
    lo, hi = np.array(tr.X_VERIFY).T
    return lo + (hi - lo) * gen.uniform(size=(n, 3))


# ------------------------------------------------------------ mollifier


def test_mollifier_centre_and_support():
    x = (0.8, 0.3, 2.0)
    assert tr.mollifier(x, 0.8) == pytest.approx(2.0 / math.e)
    assert tr.mollifier(x, 1.1) == 0.0
    assert tr.mollifier(x, 0.4) == 0.0
    np.testing.assert_array_equal(tr.mollifier_grad(x, 1.2), [0, 0, 0])


def test_mollifier_gradient_fd():
    gen = np.random.default_rng(0)
    for _ in range(50):
        x = np.array([gen.uniform(0.1, 1.9), gen.uniform(0.05, 1.0), gen.uniform(0.1, 10)])
        s = gen.uniform(0.05, 0.95) * gen.choice([-1, 1])
        z2 = x[0] + s * x[1]
        g = tr.mollifier_grad(x, z2)
        fd = np.empty(3)
        for i in range(3):
            h = 1e-7
            up, dn = x.copy(), x.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (tr.mollifier(up, z2) - tr.mollifier(dn, z2)) / (2 * h)
        assert np.max(np.abs(g - fd)) <= 1e-5 * max(np.max(np.abs(fd)), 1e-12)


def test_boundary_values_are_hat_averages():
    x = (0.75, 0.6, 2.0)
    vals = tr.boundary_values(GRID, x)
    hy = GRID.hy
    for j in (0, 7, 12, 20, 32):
        yj = j * hy
        lo, hi = max(0.0, yj - hy), min(GRID.height, yj + hy)
        num = quad(lambda y: (1 - abs(y - yj) / hy) * tr.mollifier(x, y), lo, hi,
                   points=[yj, 0.75, 0.15, 1.35], epsabs=1e-14, limit=200)[0]
        den = quad(lambda y: 1 - abs(y - yj) / hy, lo, hi, points=[yj])[0]
        assert vals[j] == pytest.approx(num / den, abs=1e-12)


def test_boundary_values_gradient_fd():
    for x in _random_controls(30, 1):
        _, d = tr.boundary_values(GRID, x, grad=True)
        for i in range(3):
            h = 1e-6
            up, dn = x.copy(), x.copy()
            up[i] += h
            dn[i] -= h
            fd = (tr.boundary_values(GRID, up) - tr.boundary_values(GRID, dn)) / (2 * h)
            assert np.max(np.abs(fd - d[:, i])) <= 1e-6 * max(np.abs(d).max(), 1e-12)


def test_boundary_values_gradient_continuous_across_nodes():
    # the kink of the bump crossing a node must not make the slope jump
    x0 = np.array([0.75, 0.6, 2.0])
    eps = 1e-9
    lo = tr.boundary_values(GRID, x0 - [eps, 0, 0], grad=True)[1]
    hi = tr.boundary_values(GRID, x0 + [eps, 0, 0], grad=True)[1]
    assert np.max(np.abs(hi - lo)) < 1e-6


# ------------------------------------------------------------ velocity


def test_poiseuille_profile():
    v = tr.poiseuille_velocity(GRID).values
    j_mid = GRID.ny // 2
    assert v[j_mid, 5, 0] == pytest.approx(1.0)
    assert np.all(v[0, :, 0] == 0) and np.all(v[-1, :, 0] == 0)
    assert np.all(v[..., 1] == 0)


def test_poiseuille_divergence_free():
    # inflow and outflow columns exchange flux with the boundary itself
    assert np.max(np.abs(tr.discrete_divergence(GRID, VEL)[:, 1:-1])) < 1e-14


def test_poiseuille_refuses_docks():
    with pytest.raises(ValueError):
        tr.poiseuille_velocity(tr.Grid.channel(docks=True))


def test_velocity_file_roundtrip(tmp_path):
    p = tmp_path / "v.txt"
    tr.save_velocity(p, VEL)
    back = tr.load_velocity(p, GRID)
    assert back.values.tobytes() == VEL.values.tobytes()
    assert back.key == VEL.key
    with pytest.raises(ValueError, match="does not match"):
        tr.load_velocity(p, tr.Grid.channel(32, 16))


def test_velocity_file_zeroes_dock_nodes(tmp_path):
    grid = tr.Grid.channel(docks=True)
    p = tmp_path / "v.txt"
    ones = np.ones((*grid.shape, 2))
    lines = [f"{grid.nx} {grid.ny} 5.0 2.0"] + ["1 1"] * grid.n_nodes
    p.write_text("\n".join(lines) + "\n")
    v = tr.load_velocity(p, grid).values
    assert np.any(v == 0) and np.any(v == ones)
    # node strictly inside the first dock
    i, j = round(1.5 / grid.hx), round(0.2 / grid.hy)
    assert np.all(v[j, i] == 0)


# ------------------------------------------------------------ forward solve


def test_zero_intensity_gives_zero_field():
    phi = tr.solve_concentration(GRID, VEL, (0.75, 0.6, 0.0), K0)
    assert np.all(phi.values == 0)


def test_constant_solution_pure_diffusion():
    c0 = 1.7
    phi = tr.solve_concentration(GRID, tr.zero_velocity(GRID), (0.75, 0.6, 1.0), K0,
                                 dirichlet=lambda y: np.full_like(y, c0))
    np.testing.assert_allclose(phi.values, c0, rtol=1e-10)
    whole = tr.Region(0.0, GRID.width, 0.0, GRID.height)
    assert tr.mean_concentration(phi, whole) == pytest.approx(c0, rel=1e-10)
    assert tr.mean_concentration(phi, tr.OMEGA_2) == pytest.approx(c0, rel=1e-10)


def test_maximum_principle():
    phi = tr.solve_concentration(GRID, VEL, tr.X_PRED, K0).values
    bmax = tr.boundary_values(GRID, tr.X_PRED).max()
    assert phi.min() >= -1e-12
    assert phi.max() <= bmax + 1e-12


@pytest.mark.slow
def test_grid_refinement_changes_qoi_little():
    coarse = tr.solve_concentration(GRID, VEL, tr.X_PRED, K0)
    fine_grid = tr.Grid.channel(128, 64)
    fine = tr.solve_concentration(fine_grid, tr.poiseuille_velocity(fine_grid), tr.X_PRED, K0)
    qc = tr.mean_concentration(coarse, tr.OMEGA_1)
    qf = tr.mean_concentration(fine, tr.OMEGA_1)
    assert abs(qc - qf) / abs(qf) < 0.05


def test_mean_of_linear_profile_exact():
    a, b = 0.3, 1.25
    Y = np.broadcast_to(GRID.y_nodes()[:, None], GRID.shape)
    field = tr.ConcentrationField(a + b * Y, GRID, (0, 1, 1), K0, "manual")
    lower = tr.Region(0.0, GRID.width, 0.0, 1.0)
    assert tr.mean_concentration(field, lower) == pytest.approx(a + b * 0.5, abs=1e-10)
    odd = tr.Region(0.37, 2.91, 0.33, 1.71)
    assert tr.mean_concentration(field, odd) == pytest.approx(a + b * (0.33 + 1.71) / 2, abs=1e-10)


def test_region_outside_fluid_rejected():
    with pytest.raises(ValueError):
        tr.region_weights(tr.Grid.channel(docks=True), tr.Region(1.45, 1.55, 0.1, 0.3))


def test_docked_channel_solves():
    grid = tr.Grid.channel(docks=True)
    phi = tr.solve_concentration(grid, tr.zero_velocity(grid), tr.X_PRED, K0)
    assert np.all(np.isfinite(phi.values))
    act = grid.active_nodes()
    assert np.all(phi.values[~act] == 0)


# ------------------------------------------------------------ adjoint


def test_adjoint_zero_weights():
    lam = tr.adjoint_solve(GRID, VEL, K0, weights=np.zeros(GRID.n_nodes))
    assert np.all(lam.values == 0)


def test_adjoint_mirror_symmetry_pure_diffusion():
    zero = tr.zero_velocity(GRID)
    region = tr.Region(2.0, 3.0, 0.6, 1.4)  # symmetric about y = H/2
    lam = tr.adjoint_solve(GRID, zero, K0, region).values.reshape(GRID.shape)
    np.testing.assert_allclose(lam, lam[::-1, :], atol=1e-12 * np.abs(lam).max())


def test_transpose_identity():
    A, _, _ = tr.assemble(GRID, VEL, K0)
    lam = tr.adjoint_solve(GRID, VEL, K0, tr.OMEGA_1).values
    phi = tr.solve_concentration(GRID, VEL, tr.X_PRED, K0).flat
    lhs = lam @ (A @ phi)
    rhs = (A.T @ lam) @ phi
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-300)


def test_value_through_adjoint_matches_forward():
    f = tr.transport_functional("qoi1", GRID, VEL)
    phi = tr.solve_concentration(GRID, VEL, tr.X_PRED, K0)
    assert f.value(tr.X_PRED, [K0]) == pytest.approx(tr.mean_concentration(phi, tr.OMEGA_1), rel=1e-12)


def test_gradient_linear_in_intensity():
    x = np.array([0.75, 0.6, 2.0])
    lam = tr.adjoint_solve(GRID, VEL, K0, tr.OMEGA_1)
    g = tr.gradient_control(GRID, VEL, K0, x, lam)
    h = tr.mean_concentration(tr.solve_concentration(GRID, VEL, x, K0), tr.OMEGA_1)
    assert g[2] == pytest.approx(h / x[2], rel=1e-12)


@pytest.mark.parametrize("kind", ["qoi1", "qoi2"])
def test_full_gradient_fd(kind):
    f = tr.transport_functional(kind, GRID, VEL)
    for x in _random_controls(5, 3):
        p = np.concatenate([x, [K0]])
        g = f.gradient(x, [K0])
        fd = np.empty(4)
        for i in range(4):
            up, dn = p.copy(), p.copy()
            up[i] += 1e-5
            dn[i] -= 1e-5
            fd[i] = (f.value(up[:3], up[3:]) - f.value(dn[:3], dn[3:])) / 2e-5
        assert _rel(g, fd) < 1e-4


def test_support_outside_boundary_gives_zero():
    x = (-1.0, 0.5, 3.0)
    phi = tr.solve_concentration(GRID, VEL, x, K0)
    assert np.all(phi.values == 0)
    lam = tr.adjoint_solve(GRID, VEL, K0, tr.OMEGA_1)
    np.testing.assert_array_equal(tr.gradient_control(GRID, VEL, K0, x, lam), [0, 0, 0])


def test_diffusivity_gradient_constant_field_zero():
    zero = tr.zero_velocity(GRID)
    phi = tr.solve_concentration(GRID, zero, (0.75, 0.6, 1.0), K0, dirichlet=lambda y: np.ones_like(y))
    lam = tr.adjoint_solve(GRID, zero, K0, tr.OMEGA_1)
    assert abs(tr.gradient_diffusivity(GRID, zero, K0, phi, lam)) < 1e-12


def test_diffusivity_gradient_scales_with_exp_k():
    ratios = []
    for k in (-20.0, -22.0):
        phi = tr.solve_concentration(GRID, VEL, tr.X_PRED, k)
        lam = tr.adjoint_solve(GRID, VEL, k, tr.OMEGA_1)
        ratios.append(tr.gradient_diffusivity(GRID, VEL, k, phi, lam) / math.exp(k))
    assert ratios[0] == pytest.approx(ratios[1], rel=1e-2)


def test_stale_adjoint_rejected():
    lam = tr.adjoint_solve(GRID, VEL, K0, tr.OMEGA_1)
    with pytest.raises(tr.StaleAdjointError):
        tr.gradient_control(GRID, VEL, K0 + 0.1, tr.X_PRED, lam)
    phi = tr.solve_concentration(GRID, VEL, tr.X_PRED, K0 + 0.1)
    with pytest.raises(tr.StaleAdjointError):
        tr.gradient_diffusivity(GRID, VEL, K0, phi, lam)


# ------------------------------------------------------------ functionals


def test_functional_kinds():
    q = tr.transport_functional("qoi1", GRID, VEL)
    o = tr.transport_functional("obs", GRID, VEL)
    assert q.kind == "qoi" and q.sensor_dim == 0
    assert o.kind == "observable" and o.sensor_dim == 2
    assert q.value(tr.X_PRED, [K0], z=[4.0, 1.0]) == q.value(tr.X_PRED, [K0])
    assert o.value(tr.X_PRED, [K0], [0.5, 1.0]) != o.value(tr.X_PRED, [K0], [3.0, 1.0])
    with pytest.raises(ValueError):
        o.value(tr.X_PRED, [K0])
    with pytest.raises(ValueError):
        tr.transport_functional("qoi3")


def test_obs_square_equals_region_mean():
    o = tr.transport_functional("obs", GRID, VEL)
    phi = tr.solve_concentration(GRID, VEL, tr.X_PRED, K0)
    r = tr.Region.square((2.0, 0.3), 0.1)
    assert o.value(tr.X_PRED, [K0], [2.0, 0.3]) == pytest.approx(tr.mean_concentration(phi, r), rel=1e-12)


@pytest.mark.parametrize("kind", ["qoi1", "qoi2"])
def test_rank_one_influence_matrix(kind):
    f = tr.transport_functional(kind, GRID, VEL)
    m = influence_matrix(f, tr.X_PRED, None, Dirac(K0), n=5)
    w = np.sort(np.abs(np.linalg.eigvalsh(m.entries)))[::-1]
    assert w[1] / w[0] < 1e-8


def test_observation_grid_tiles_domain():
    pts = tr.observation_grid(GRID, 0.25)
    assert pts.shape == (20 * 8, 2)
    assert pts[:, 0].min() == 0.125 and pts[:, 1].max() == 1.875


def test_field_csv(tmp_path):
    p = tmp_path / "phi.csv"
    phi = tr.solve_concentration(GRID, VEL, tr.X_PRED, K0)
    tr.write_field_csv(p, GRID, phi.values)
    lines = p.read_text().splitlines()
    assert lines[0] == "x,y,value"
    assert len(lines) == GRID.n_nodes + 1
