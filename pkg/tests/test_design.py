import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optval import projectile as pj
from optval import transport as tr
from optval.core import Box, RngSpec, lhs_sample
from optval.design import (
    DesignError,
    OptimizerOptions,
    multistart,
    optimize_scenario,
    optimize_sensor,
    pattern_search,
    sensor_scan,
    verify_recovery,
    write_design_csv,
    write_json,
    write_scan_csv,
    write_verify_csv,
)
from optval.families import projectile_family, transport_family
from optval.sensitivity import DegenerateFunctionalError, influence_matrix_from_draws, normalized_distance

UNIT2 = Box.from_bounds([(0, 1), (0, 1)])


def test_options_validation():
    with pytest.raises(ValueError):
        OptimizerOptions(max_evals=0)
    with pytest.raises(ValueError):
        OptimizerOptions(initial_mesh=1e-9, min_mesh=1e-7)
    with pytest.raises(ValueError):
        OptimizerOptions(vns_radii=(2.0,))
    with pytest.raises(ValueError):
        OptimizerOptions(surrogate_fraction=1.0)


def test_pattern_search_quadratic():
    c = np.array([0.3, 0.7])
    opts = OptimizerOptions()
    r = pattern_search(lambda x: float(np.sum((x - c) ** 2)), [0.0, 0.0], UNIT2, opts)
    assert np.linalg.norm(r.x - c) <= 10 * opts.min_mesh


def test_pattern_search_constant():
    opts = OptimizerOptions(max_evals=10_000)
    r = pattern_search(lambda x: 1.0, [0.4, 0.2], UNIT2, opts)
    np.testing.assert_array_equal(r.x, [0.4, 0.2])
    assert r.mesh < opts.min_mesh
    assert r.evals < opts.max_evals


def test_pattern_search_respects_budget_and_box():
    seen = []

    def f(x):
        seen.append(x.copy())
        return float(np.sum(np.sin(7 * x)))

    r = pattern_search(f, [0.5, 0.5], UNIT2, OptimizerOptions(max_evals=57))
    assert r.evals <= 57
    assert all(UNIT2.contains(p) for p in seen)


def test_pattern_search_bound_solution_exact():
    r = pattern_search(lambda x: -x[0] + x[1], [0.5, 0.5], UNIT2)
    np.testing.assert_array_equal(r.x, [1.0, 0.0])


def test_pattern_search_start_checks():
    with pytest.raises(ValueError):
        pattern_search(lambda x: 0.0, [2.0, 0.0], UNIT2)
    with pytest.raises(ValueError):
        pattern_search(lambda x: math.nan, [0.5, 0.5], UNIT2)


def test_pattern_search_rejects_failing_points():
    def f(x):
        if x[0] > 0.6:
            raise FloatingPointError("outside model validity")
        return (x[0] - 1) ** 2 + x[1] ** 2

    r = pattern_search(f, [0.1, 0.5], UNIT2)
    assert r.x[0] <= 0.6
    assert r.x[0] == pytest.approx(0.6, abs=1e-6)


def test_pattern_search_reproducible_trace():
    f = lambda x: float((x[0] - 0.2) ** 2 + 3 * (x[1] - 0.9) ** 2 + 0.1 * np.sin(20 * x[0]))
    a = pattern_search(f, [0.8, 0.1], UNIT2)
    b = pattern_search(f, [0.8, 0.1], UNIT2)
    assert a.evals == b.evals
    assert all(np.array_equal(p, q) and u == v for (p, u), (q, v) in zip(a.trace, b.trace))


def _rastrigin(x):
    y = 10.24 * np.asarray(x) - 5.12
    return float(20 + np.sum(y * y - 10 * np.cos(2 * np.pi * y)))


def test_multistart_rastrigin():
    opts = OptimizerOptions(n_starts=10, rng=RngSpec(3), vns_radii=(), rotated_polls=False)
    runs = multistart(_rastrigin, UNIT2, opts, threads=1)
    vals = [r.objective for r in runs]
    assert min(vals) < max(vals) - 1e-3
    # every result is at least as good as a brute-force grid around it
    for r in runs:
        ga = np.clip(r.optimum[0] + np.linspace(-0.02, 0.02, 41), 0, 1)
        gb = np.clip(r.optimum[1] + np.linspace(-0.02, 0.02, 41), 0, 1)
        brute = min(_rastrigin((a, b)) for a in ga for b in gb)
        assert r.objective <= brute + 1e-6
        assert UNIT2.contains(r.optimum)


def test_multistart_neighbourhood_search_finds_global_rastrigin():
    runs = multistart(_rastrigin, UNIT2, OptimizerOptions(n_starts=4, rng=RngSpec(1)), threads=1)
    assert min(r.objective for r in runs) < 1e-8


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_multistart_permutation_invariant(seed):
    starts = lhs_sample(UNIT2, 5, RngSpec(seed))
    perm = np.random.default_rng(seed).permutation(5)
    f = lambda x: float(np.sum((x - 0.4) ** 2) + 0.05 * np.cos(9 * x[0]))
    opts = OptimizerOptions(max_evals=300)
    a = multistart(f, UNIT2, opts, starts=starts, threads=1)
    b = multistart(f, UNIT2, opts, starts=starts[perm], threads=1)
    assert min(r.objective for r in a) == min(r.objective for r in b)
    for k, j in enumerate(perm):
        assert np.array_equal(b[k].optimum, a[j].optimum)


def test_multistart_threads_identical():
    f = lambda x: _rastrigin(x)
    opts = OptimizerOptions(n_starts=4, max_evals=400, rng=RngSpec(8))
    a = multistart(f, UNIT2, opts, threads=1)
    b = multistart(f, UNIT2, opts, threads=3)
    assert [r.optimum.tobytes() for r in a] == [r.optimum.tobytes() for r in b]


# ------------------------------------------------------------ scenario problem


@pytest.fixture(scope="module")
def projectile_verify():
    opts = OptimizerOptions(n_samples=200, rng=RngSpec(17))
    return verify_recovery(pj.MaxAltitude(), pj.X_PRED, pj.default_theta_distribution(),
                           Box.from_bounds(pj.X_FULL), n_starts=3, opts=opts)


def test_scenario_recovers_prediction(projectile_verify):
    rows, res = projectile_verify
    for r in rows:
        assert r.normalized_objective <= 1e-4
        rel = np.abs(r.optimum - pj.X_PRED) / np.abs(pj.X_PRED)
        assert np.all(rel[[0, 1, 3]] < 1e-2)
        assert Box.from_bounds(pj.X_FULL).contains(r.optimum)
    assert res.flat_coords == ("u0",)
    assert res.best_objective >= 0


def test_scenario_objective_zero_at_prediction():
    opts = OptimizerOptions(n_samples=100, rng=RngSpec(2))
    res = optimize_scenario(pj.MaxAltitude(), pj.X_PRED, pj.default_theta_distribution(),
                            Box.from_bounds(pj.X_FULL), opts, starts=[pj.X_PRED])
    assert res.best_objective == 0.0
    np.testing.assert_array_equal(res.best_point, pj.X_PRED)


def test_scenario_reproducible():
    opts = OptimizerOptions(n_samples=50, n_starts=2, max_evals=300, rng=RngSpec(4))
    args = (pj.MaxAltitude(), pj.X_PRED, pj.default_theta_distribution(), Box.from_bounds(pj.X_LAB), opts)
    a = optimize_scenario(*args)
    b = optimize_scenario(*args)
    assert a.best_point.tobytes() == b.best_point.tobytes()
    assert a.best_objective == b.best_objective


def test_verify_requires_prediction_in_box():
    with pytest.raises(ValueError):
        verify_recovery(pj.MaxAltitude(), pj.X_PRED, pj.default_theta_distribution(),
                        Box.from_bounds(pj.X_LAB))


# ------------------------------------------------------------ sensor problem


@pytest.fixture(scope="module")
def projectile_scans():
    fam = projectile_family()
    x_val = (1.0, 0.1, 0.7, 100.446)
    grid = fam.scan_grid(x_val, fam.prior)
    opts = OptimizerOptions(n_samples=500, rng=RngSpec(1))
    alt = sensor_scan(fam.observables["altitude"], x_val, fam.qois["max_altitude"], fam.prior, grid, opts)
    acc = sensor_scan(fam.observables["acceleration"], x_val, fam.qois["max_altitude"], fam.prior, grid, opts)
    return x_val, alt, acc


def test_altitude_scan_shape(projectile_scans):
    x_val, alt, _ = projectile_scans
    v = alt.values
    i = alt.argmin()
    t_star = pj.time_of_max(x_val, projectile_family().prior.center())
    assert abs(alt.grid[i, 0] - t_star) <= 2 * (alt.grid[1, 0] - alt.grid[0, 0])
    assert v[1] > 100 * v[i]
    # single dip: decreasing before the minimum, increasing after (coarsely)
    assert np.all(np.diff(v[1:i:10]) < 0)
    assert np.all(np.diff(v[i + 10::10]) > 0)


def test_acceleration_scan_bounded_away_from_zero(projectile_scans):
    _, alt, acc = projectile_scans
    assert np.nanmin(acc.values) >= 0.1 * np.nanmax(acc.values)
    assert np.nanmin(acc.values) > 1e-2
    assert np.nanmin(alt.values) < np.nanmin(acc.values)


def test_single_point_scan_equals_distance():
    fam = projectile_family()
    x_val = (1.0, 0.1, 0.7, 100.0)
    opts = OptimizerOptions(n_samples=30, rng=RngSpec(9))
    scan = sensor_scan(fam.observables["altitude"], x_val, fam.qois["max_altitude"], fam.prior, [[3.0]], opts)
    from optval.core import sample
    from optval.design import STREAM_THETA

    draws = sample(fam.prior, 30, opts.rng.with_stream(STREAM_THETA))
    mo = influence_matrix_from_draws(fam.observables["altitude"], x_val, [3.0], draws)
    mq = influence_matrix_from_draws(fam.qois["max_altitude"], x_val, None, draws)
    assert scan.values[0] == normalized_distance(mo, mq)


def test_sensor_choice_projectile():
    fam = projectile_family()
    x_val = (1.0, 0.1, 0.7, 100.446)
    opts = OptimizerOptions(n_samples=200, n_starts=3, rng=RngSpec(5))
    res = optimize_sensor(list(fam.observables.values()), fam.sensor_domain(x_val, fam.prior), x_val,
                          fam.qois["max_altitude"], fam.prior, opts, threads=1)
    assert res.functional_id == "altitude"
    t_star = pj.time_of_max(x_val, fam.prior.center())
    assert res.z[0] == pytest.approx(t_star, rel=2e-2)
    assert set(res.candidates) == {"altitude", "acceleration"}


def test_sensor_qoi_itself_zero_everywhere():
    fam = projectile_family()
    opts = OptimizerOptions(n_samples=50, rng=RngSpec(5))
    scan = sensor_scan(fam.qois["max_altitude"], pj.X_PRED, fam.qois["max_altitude"], fam.prior,
                       np.linspace(0, 5, 7), opts)
    assert np.all(scan.values == 0.0)


def test_sensor_single_candidate_returned():
    fam = projectile_family()
    opts = OptimizerOptions(n_samples=50, rng=RngSpec(5))
    res = optimize_sensor([fam.observables["acceleration"]], np.linspace(0.1, 10, 5), pj.X_PRED,
                          fam.qois["max_altitude"], fam.prior, opts)
    assert res.functional_id == "acceleration"


def test_sensor_all_degenerate():
    from optval.core import CallableFunctional

    flat = CallableFunctional(lambda x, th, z: 1.0, pj.CONTROL_NAMES, pj.MODEL_NAMES,
                              grad=lambda x, th, z: np.zeros(6), id="flat", sensor_dim=1)
    fam = projectile_family()
    with pytest.raises(DegenerateFunctionalError):
        optimize_sensor([flat], np.linspace(0, 1, 3), pj.X_PRED, fam.qois["max_altitude"], fam.prior,
                        OptimizerOptions(n_samples=10))
    scan = sensor_scan(flat, pj.X_PRED, fam.qois["max_altitude"], fam.prior, [[0.0]],
                       OptimizerOptions(n_samples=10))
    with pytest.raises(DesignError):
        scan.argmin()


@pytest.mark.parametrize("x_val", [tr.X_PRED, (0.75, 0.1, 1.0)])
def test_transport_sensor_in_first_region(x_val):
    fam = transport_family()
    grid = fam.scan_grid(x_val, fam.prior)
    scan = sensor_scan(fam.observables["obs"], x_val, fam.qois["qoi1"], fam.prior, grid,
                       OptimizerOptions(n_samples=1))
    z = scan.grid[scan.argmin()]
    cell = tr.Region.square(z, 0.25)
    om = tr.OMEGA_1
    # in or adjacent to the region: the tile touches the region grown by one tile
    assert cell.x1 >= om.x0 - 0.25 and cell.x0 <= om.x1 + 0.25
    assert cell.y1 >= om.y0 - 0.25 and cell.y0 <= om.y1 + 0.25


# ------------------------------------------------------------ output


def test_writers(tmp_path, projectile_verify):
    rows, res = projectile_verify
    write_design_csv(tmp_path / "d.csv", res)
    write_verify_csv(tmp_path / "v.csv", rows, pj.CONTROL_NAMES)
    with open(tmp_path / "v.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0][:4] == ["initial_m", "initial_ell", "initial_u0", "initial_v0"]
    assert len(table) == len(rows) + 1
    assert float(table[1][8]) == rows[0].l2_error
    write_json(tmp_path / "s.json", res.summary())
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["flat_coords"] == ["u0"]
    assert list(data) == sorted(data)


def test_scan_csv_blank_for_nan(tmp_path):
    from optval.design import SensorScan

    write_scan_csv(tmp_path / "s.csv", SensorScan(np.array([[0.0], [1.0]]), np.array([0.5, np.nan]), "h"))
    assert (tmp_path / "s.csv").read_text().splitlines() == ["z1,objective", "0,0.5", "1,"]
