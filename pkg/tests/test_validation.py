import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from optval import projectile as pj
from optval.core import (
    CallableFunctional,
    Dirac,
    Empirical,
    EmpiricalCDF,
    Normal,
    Product,
    RngSpec,
)
from optval.design import OptimizerOptions
from optval.families import projectile_family
from optval.validation import (
    INVALIDATED,
    NOT_INVALIDATED,
    ValidationVerdict,
    WorkflowConfig,
    WorkflowError,
    area_metric,
    discrepancy,
    propagate,
    reliability_metric,
    run_validation_workflow,
)

LIN = CallableFunctional(lambda x, th, z: 3.0 * th[0] + x[0], ("x",), ("t",), kind="qoi")
ZERO = CallableFunctional(lambda x, th, z: 0.0, ("x",), ("t",), kind="qoi")


# ------------------------------------------------------------ propagation


def test_propagate_dirac_identical():
    q = propagate(LIN, [1.0], Dirac(2.0), 50, RngSpec(0))
    assert np.all(q.samples == 7.0)


def test_propagate_linear_gaussian():
    n = 20_000
    q = propagate(LIN, [1.0], Normal(2.0, 0.5), n, RngSpec(1)).samples
    assert q.mean() == pytest.approx(7.0, rel=3 / math.sqrt(n))
    assert q.std() == pytest.approx(1.5, rel=3 / math.sqrt(n))


def test_propagate_projectile_interval_self_consistent():
    prior = pj.default_theta_distribution()
    h = pj.MaxAltitude()
    a = propagate(h, pj.X_PRED, prior, 10_000, RngSpec(2, 11)).samples
    b = propagate(h, pj.X_PRED, prior, 100_000, RngSpec(3, 11)).samples
    wa = np.subtract(*np.quantile(a, [0.975, 0.025]))
    wb = np.subtract(*np.quantile(b, [0.975, 0.025]))
    assert abs(wa - wb) <= 0.2 * wb


def test_propagate_reports_failing_sample():
    def bad(x, th, z):
        if th[0] > 1:
            raise FloatingPointError("overflow")
        return th[0]

    f = CallableFunctional(bad, ("x",), ("t",), kind="qoi")
    with pytest.raises(RuntimeError, match="sample"):
        propagate(f, [0.0], Empirical([0.0, 0.5, 2.0]), 30, RngSpec(0))


# ------------------------------------------------------------ discrepancy


def test_discrepancy_exact_model():
    c = CallableFunctional(lambda x, th, z: 4.0, ("x",), ("t",), kind="qoi")
    d = discrepancy(np.full(10, 4.0), c, [0.0], None, Dirac(1.0), 100, RngSpec(0))
    assert np.all(d.e_values == 0.0)


def test_discrepancy_distributional_identity():
    y = np.random.default_rng(0).standard_normal(20_000)
    d = discrepancy(y, ZERO, [0.0], None, Dirac(0.0), 5_000, RngSpec(4))
    assert stats.kstest(d.e_values, "norm").pvalue > 0.01


def test_discrepancy_projectile_optimal_regime():
    x_val = (1.0, 0.1, 0.7, 100.446)
    prior = pj.default_theta_distribution()
    t = pj.time_of_max(x_val, prior.center())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        y = pj.synthetic_observations(x_val, t, 10_000, RngSpec(0, 12))
    d = discrepancy(y, pj.Altitude(), x_val, [t], prior, 10_000, RngSpec(0, 13))
    assert np.mean(np.abs(d.e_values) < 100) < 0.05


def test_discrepancy_rejects_empty():
    with pytest.raises(ValueError):
        discrepancy([], ZERO, [0.0], None, Dirac(0.0), 10, RngSpec(0))


# ------------------------------------------------------------ metrics


def test_reliability_examples():
    assert reliability_metric(np.array([0.1, -0.2]), 1.0) == 1.0
    assert reliability_metric(np.array([-2.0, -1.0, 1.0, 2.0]), 1.5) == 0.5
    e = np.random.default_rng(1).standard_normal(100_000)
    assert reliability_metric(e, 1.96) == pytest.approx(0.95, abs=0.01)
    with pytest.raises(ValueError):
        reliability_metric(e, 0.0)


@settings(max_examples=60, deadline=None)
@given(e=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40),
       a=st.floats(1e-6, 1e3), b=st.floats(1e-6, 1e3))
def test_reliability_monotone_and_bounded(e, a, b):
    e = np.array(e)
    lo, hi = sorted((a, b))
    ga, gb = reliability_metric(e, lo), reliability_metric(e, hi)
    assert 0.0 <= ga <= gb <= 1.0


def test_area_metric_examples():
    s = np.random.default_rng(0).standard_normal(100)
    assert area_metric(s, s) == 0.0
    assert area_metric([0.0], [2.5]) == pytest.approx(2.5)
    assert area_metric(EmpiricalCDF([0.0]), Empirical([-1.0]).cdf()) == pytest.approx(1.0)
    gen = np.random.default_rng(3)
    a = gen.standard_normal(100_000)
    b = gen.standard_normal(100_000) + 1.0
    assert area_metric(a, b) == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ValueError):
        area_metric(lambda s: 0.5, [0.0])


samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=25)


@settings(max_examples=60, deadline=None)
@given(a=samples, b=samples, c=samples)
def test_area_metric_is_a_metric(a, b, c):
    dab, dba = area_metric(a, b), area_metric(b, a)
    assert dab >= 0
    assert dab == pytest.approx(dba, rel=1e-12, abs=1e-12)
    assert area_metric(a, c) <= dab + area_metric(b, c) + 1e-9


def test_verdict_rules():
    assert ValidationVerdict.decide(0.95, 1.0, 0.9).verdict == NOT_INVALIDATED
    assert ValidationVerdict.decide(0.9, 1.0, 0.9).verdict == NOT_INVALIDATED
    assert ValidationVerdict.decide(0.5, 1.0, 0.9).verdict == INVALIDATED
    with pytest.raises(ValueError):
        ValidationVerdict(0.5, 1.0, 0.9, NOT_INVALIDATED)
    with pytest.raises(ValueError):
        ValidationVerdict.decide(0.5, -1.0, 0.9)
    d = ValidationVerdict.decide(0.5, 1.0, 0.9).to_dict()
    assert d["cov"] is None and d["propagation_flag"] == "proceed"


# ------------------------------------------------------------ workflow


def _projectile_config(**kw):
    fam = projectile_family()
    base = dict(
        h_qoi=fam.qois["max_altitude"], x_pred=fam.x_pred, prior=fam.prior, X_lab=fam.X_lab,
        H_lab=list(fam.observables.values()), Z_lab=lambda x: fam.sensor_domain(x, fam.prior),
        epsilon=1.0, eta=0.9, data_source=fam.data_source, n_exp=10_000, n_model=10_000,
        n_prop=10_000, rng=RngSpec(2024),
        options=OptimizerOptions(n_samples=200, n_starts=3, rng=RngSpec(2024)),
    )
    base.update(kw)
    return WorkflowConfig(**base)


def test_workflow_tentative_false_positive(tmp_path):
    t = pj.time_of_max(pj.X_VAL_TENTATIVE, pj.default_theta_distribution().center())
    cfg = _projectile_config(epsilon=3.0, x_val=pj.X_VAL_TENTATIVE, sensor=("altitude", [t]))
    res = run_validation_workflow(cfg, tmp_path)
    assert res.verdict.verdict == NOT_INVALIDATED
    summary = json.loads((tmp_path / "verdict.json").read_text())
    assert summary["verdict"]["verdict"] == NOT_INVALIDATED
    assert summary["scenario"]["forced"] is True
    for name in ("qoi_samples.csv", "observations.csv", "discrepancy.csv", "abs_discrepancy_cdf.csv"):
        assert (tmp_path / name).exists()


@pytest.mark.slow
def test_workflow_optimal_design_invalidates():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_validation_workflow(_projectile_config())
    assert res.verdict.verdict == INVALIDATED
    assert res.artifacts["sensor"]["functional"] == "altitude"
    x_val = res.artifacts["scenario"]["best_point"]
    assert x_val[0] == pytest.approx(1.0) and x_val[1] == pytest.approx(0.1)


def test_workflow_self_validation():
    theta0 = (9.81, -5 * math.log(10))
    prior = Product([Dirac(theta0[0]), Dirac(theta0[1])])

    def exact(x, z, n, rng):
        return np.full(n, pj.altitude(x, theta0, float(np.atleast_1d(z)[0])))

    for eps in (1e-9, 1.0):
        cfg = _projectile_config(prior=prior, data_source=exact, epsilon=eps, x_val=pj.X_PRED,
                                 sensor=("altitude", [5.0]), n_exp=100, n_model=100, n_prop=100)
        res = run_validation_workflow(cfg)
        assert res.verdict.gamma == 1.0
        assert res.verdict.verdict == NOT_INVALIDATED


def test_workflow_uncertainty_gate(tmp_path):
    cfg = _projectile_config(cov_budget=1e-6, n_prop=500)
    res = run_validation_workflow(cfg, tmp_path)
    assert res.verdict.verdict is None
    assert res.verdict.propagation_flag == "uncertainty-too-large"
    assert "observations" not in res.artifacts
    assert (tmp_path / "qoi_samples.csv").exists()
    assert not (tmp_path / "discrepancy.csv").exists()


def test_workflow_reports_stage():
    def broken(x, z, n, rng):
        raise OSError("instrument offline")

    cfg = _projectile_config(data_source=broken, x_val=pj.X_PRED, sensor=("altitude", [1.0]), n_prop=100)
    with pytest.raises(WorkflowError) as exc:
        run_validation_workflow(cfg)
    assert exc.value.stage == "experiment"
    cfg = _projectile_config(x_val=pj.X_PRED, sensor=("velocity", [1.0]), n_prop=100)
    with pytest.raises(WorkflowError, match="unknown observable"):
        run_validation_workflow(cfg)


def test_workflow_reproducible():
    t = 2.0
    cfg = _projectile_config(x_val=pj.X_VAL_TENTATIVE, sensor=("altitude", [t]), n_exp=500,
                             n_model=500, n_prop=500)
    a = run_validation_workflow(cfg)
    b = run_validation_workflow(cfg)
    assert a.artifacts["discrepancy"].tobytes() == b.artifacts["discrepancy"].tobytes()
    assert a.verdict == b.verdict
