import math

import numpy as np
import pytest

from reflect import analysis as an
from reflect.engine import EnsembleRecords, ReflectedPath, SimConfig, simulate_ball, simulate_sder, toy_ensemble
from reflect.errors import BetaOutOfRange, InsufficientSamples
from reflect.model import MuMoments, c1_constant, canonical_model


def test_lyapunov_cylinder_examples(cyl):
    ev = an.lyapunov_eval(cyl, [10.0, 0.5])
    assert ev.g == pytest.approx(10.125)
    assert np.allclose(ev.grad, [1.0, 0.5])
    assert ev.drift_mu == pytest.approx(0.5)
    assert ev.qv_f == pytest.approx(1.25)
    ev = an.lyapunov_eval(cyl, [10.0, 1.0])
    assert ev.boundary_lambda == pytest.approx(0.0, abs=1e-14)
    assert ev.qv_f == pytest.approx(2.0)
    assert math.isnan(an.lyapunov_eval(cyl, [10.0, 0.0]).boundary_lambda)
    with pytest.raises(ValueError):
        an.lyapunov_eval(cyl, [0.7, 0.0])


@pytest.mark.parametrize("beta", [-0.5, 0.0, 0.3, 0.8])
def test_lyapunov_gradient_matches_fd(beta, rng):
    m = canonical_model(beta, 2)
    for _ in range(10):
        x = float(rng.uniform(2, 500))
        u = rng.standard_normal(2)
        y = rng.uniform(0, 1) * m.domain.b(x) * u / np.linalg.norm(u)
        assert an.gradient_fd_error(m, np.concatenate(([x], y))) < 1e-6


def test_lyapunov_report_cylinder_exact(cyl):
    rep = an.lyapunov_asymptotics_check(cyl)
    s = rep.summary()
    assert rep.passed
    assert all(v["max"] < 1e-12 for v in s.values())


def test_lyapunov_decay_family():
    from reflect.geometry import BoundaryFunction
    from reflect.model import CoefficientModel, DiffusionField, ReflectionField
    from reflect.geometry import ParabolicDomain

    m = CoefficientModel(ParabolicDomain(BoundaryFunction.shifted_power(0.5)), DiffusionField.identity(1),
                         ReflectionField())
    rep = an.lyapunov_asymptotics_check(m)
    assert rep.passed
    assert rep.summary()["qv_f"]["slope_per_decade"] < -0.4


def test_additive_functional_constant_poly(cyl):
    t = np.linspace(0, 100, 10001)
    st = np.column_stack([1.0 + 0.5 * t, np.zeros_like(t)])
    path = ReflectedPath(t, st, np.zeros_like(t), np.zeros(t.size), 0)
    val, target = an.additive_functional_check(path, cyl, 1.0, 0.0, 0.0)
    assert val == pytest.approx(1.0) and target == pytest.approx(1.0)
    m = canonical_model(0.5)
    _, target = an.additive_functional_check(path, m, 1.0, 0.0, 0.0)
    assert target == pytest.approx(0.6 * c1_constant(m), rel=1e-12)
    assert target == pytest.approx(0.495, abs=1e-3)
    with pytest.raises(BetaOutOfRange):
        an.additive_functional_check(path, canonical_model(-0.5), 1.0, 0.0, 0.0)


def test_iid_estimators(rng):
    est = an.iid_mean(rng.normal(2.0, 3.0, 10000))
    assert est.within(2.0, 4) and est.stderr == pytest.approx(0.03, rel=0.05)
    v = an.iid_variance(rng.normal(0.0, 2.0, 20000))
    assert v.within(4.0, 4)
    assert v.stderr == pytest.approx(math.sqrt(2 * 16 / 20000), rel=0.1)
    with pytest.raises(InsufficientSamples):
        an.iid_mean([1.0])


def test_estimate_invariants():
    e = an.EstimateWithCI(1.0, 0.1, 100)
    lo, hi = e.ci()
    assert lo < 1.0 < hi and e.dof() == 99
    assert e.ci(0.99)[0] < lo
    with pytest.raises(ValueError):
        an.EstimateWithCI(1.0, -0.1, 10)
    with pytest.raises(ValueError):
        an.EstimateWithCI(1.0, 0.1, 10, "batch_means", 5)
    assert an.EstimateWithCI(0, 1, 10**6, "batch_means", 50).dof() == 49


def test_batch_means_coverage_ar1(rng):
    phi, n, reps = 0.9, 20000, 200
    hits = 0
    for _ in range(reps):
        e = rng.standard_normal(n)
        x = np.empty(n)
        x[0] = e[0] / math.sqrt(1 - phi ** 2)
        for i in range(1, n):
            x[i] = phi * x[i - 1] + e[i]
        hits += an.batch_means(x).covers(0.0)
    assert 0.88 <= hits / reps <= 0.995


def test_batch_means_too_short():
    with pytest.raises(InsufficientSamples):
        an.batch_means(np.ones(30))


def test_ergodic_moments_symmetric_psd():
    m = canonical_model(0.0, 2)
    p = simulate_ball(m, SimConfig(1e-2, 2000.0, [0.0, 0.0], seed=2, record="full", boundary_correction=True))
    est = an.ergodic_moments(p)
    s = est.moments.second
    assert np.array_equal(s, s.T)
    assert np.all(np.linalg.eigvalsh(s) >= 0)
    assert est.trace.within(0.5, 5)
    with pytest.raises(InsufficientSamples):
        an.ergodic_moments(p, min_samples=10**7)


def test_centering():
    m = canonical_model(0.5)
    c1 = c1_constant(m)
    assert an.centering(m, 100.0) == pytest.approx(c1 * 100 ** (2 / 3))
    assert an.centering(m, 0.0, 20.0) == pytest.approx(20.0)


def test_check_result_python_types():
    r = an.CheckResult("x", np.float64(1.0), np.float64(0.1), np.int64(5), np.float64(1.0), np.bool_(True),
                       {"T": np.float64(2.0)})
    assert type(r.estimate) is float and type(r.n) is int and type(r.passed) is bool
    row = r.row()
    assert row["check"] == "x" and row["param_T"] == 2.0


def test_ks_uniform_ball(rng):
    u = rng.uniform(-1, 1, (4000, 1))
    stat, p = an.ks_against_uniform_ball(u)
    assert p > 1e-3
    v = rng.standard_normal((4000, 2))
    v = v / np.linalg.norm(v, axis=1)[:, None] * np.sqrt(rng.uniform(size=(4000, 1)))
    assert an.ks_against_uniform_ball(v)[1] > 1e-3
    assert an.ks_against_uniform_ball(0.5 * v)[1] < 1e-6


def test_tv_mixing_bounds():
    m = canonical_model(0.0, 1)
    res = an.tv_mixing_estimate(m, [0.0, 0.25, 0.5, 1.0, 2.0], 2000, dt=1e-3, seed=3, fit_window=(0.25, 2.0))
    assert res.tv[0] == pytest.approx(1.0)
    assert np.all((res.tv >= 0) & (res.tv <= 1))
    assert res.tv_at(2.0) < res.tv_at(0.25)
    with pytest.raises(InsufficientSamples):
        an.tv_mixing_estimate(m, [0.0, 1.0], 10)


def test_ols_slope():
    x = np.arange(10.0)
    s, se, c = an.ols_slope(x, 3 * x + 1)
    assert s == pytest.approx(3.0) and c == pytest.approx(1.0) and se == pytest.approx(0.0, abs=1e-12)


def test_toy_variance_growth_beta_zero():
    e = toy_ensemble(1.0, 0.0, 5.0, 1e-2, [10.0, 40.0], 8, np.arange(3000))
    assert an.toy_variance_growth(e, 10.0, 40.0) == pytest.approx(1.0, rel=0.15)
    slope, se = an.variance_growth_slope(e)
    assert slope == pytest.approx(1.0, abs=0.15)


def test_toy_clt_beta_zero():
    e = toy_ensemble(1.0, 0.0, 5.0, 1e-2, [20.0], 8, np.arange(2000))
    res = an.toy_clt_check(e, 1.0, 0.0, x0=5.0)
    assert res.passed and res.target == 1.0


def test_strong_law_requires_paths(cyl):
    from reflect.engine import sder_ensemble

    rec = sder_ensemble(cyl, [20.0, 0.0], 1e-2, [1.0], 1, np.arange(5))
    with pytest.raises(InsufficientSamples):
        an.strong_law_check(rec, cyl)


def test_phase_scan_rows_and_start_map():
    seen = []

    def runner(model, z0, dt, times, seed, indices, boundary_correction=False):
        seen.append(float(z0[0]))
        from reflect.engine import sder_ensemble

        return sder_ensemble(model, z0, dt, times, seed, indices, boundary_correction=boundary_correction)

    rows = an.phase_scan([-0.5, 0.2], lambda b: canonical_model(b), [1.0, 2.0, 4.0, 8.0], 20, 1e-2, 3,
                         x0={-0.5: 30.0}, ensemble=runner, toy_dt=1e-2)
    assert seen == [30.0, 20.0]
    assert [r["regime"] for r in rows] == ["no CLT", "clt"]
    assert [r["theory"] for r in rows] == [2.0, 1.0]
    assert all(np.isfinite(r["slope"]) and np.isfinite(r["toy_slope"]) for r in rows)
    with pytest.raises(InsufficientSamples):
        an.phase_scan([0.2], lambda b: canonical_model(b), [1.0, 2.0], 5, 1e-2, 3)
