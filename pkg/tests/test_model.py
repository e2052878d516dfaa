import math

import numpy as np
import pytest

from reflect.errors import BetaOutOfRange, NotOnBoundary, NotPositiveDefinite
from reflect.geometry import BoundaryFunction, ParabolicDomain, inward_normal
from reflect.model import (
    CoefficientModel,
    DiffusionField,
    MuMoments,
    ReflectionField,
    c1_constant,
    canonical_model,
    phi_eval,
    q_polynomial,
    s_squared_constant,
    sigma_eval,
    upsilon_constant,
    validate_assumptions,
)


def _model(beta=0.0, d=1, sigma=None, s0=1.0, c0=1.0, a=1.0, boundary=None, swirl=0.0):
    b = boundary or (BoundaryFunction.cylinder(a) if beta == 0 else BoundaryFunction.pure_power(beta, a))
    sig = DiffusionField(np.eye(1 + d) if sigma is None else np.asarray(sigma, float))
    kind = "oblique" if swirl else "normal"
    return CoefficientModel(ParabolicDomain(b, d), sig, ReflectionField(s0, c0, kind, swirl))


def test_sigma_eval_examples():
    s, r = sigma_eval(_model(), [3.0, 0.2])
    assert np.array_equal(s, np.eye(2)) and np.allclose(r, np.eye(2))
    _, r = sigma_eval(_model(sigma=np.diag([4.0, 1.0])), [3.0, 0.2])
    assert np.allclose(r, np.diag([2.0, 1.0]))
    s, r = sigma_eval(_model(sigma=[[2.0, 1.0], [1.0, 2.0]]), [3.0, 0.2])
    assert np.max(np.abs(r @ r - s)) < 1e-10
    assert r[0, 0] == pytest.approx((math.sqrt(3) + 1) / 2)


def test_diffusion_field_derived():
    f = DiffusionField(np.diag([2.0, 3.0, 5.0]))
    assert f.sigma_bar_sq == 8.0
    assert np.max(np.abs(f.sqrt_sigma_inf @ f.sqrt_sigma_inf - f.sigma_inf)) < 1e-10
    with pytest.raises(ValueError):
        DiffusionField(np.array([[1.0, 0.5], [0.4, 1.0]]))


def test_asymptotic_diffusion_decays():
    d = DiffusionField(np.eye(2), "asymptotic", 0.5, 0.6, [[1.0, 0.0], [0.0, 0.0]])
    m = CoefficientModel(ParabolicDomain(BoundaryFunction.cylinder()), d, ReflectionField())
    s_near, _ = sigma_eval(m, [1.0, 0.0])
    s_far, _ = sigma_eval(m, [1e6, 0.0])
    assert s_near[0, 0] == pytest.approx(1.5)
    assert s_far[0, 0] == pytest.approx(1 + 0.5e-6 ** 0.6 if False else 1 + 0.5 * 1e6 ** -0.6)


def test_sigma_eval_not_positive_definite():
    d = DiffusionField(np.eye(2), "asymptotic", -2.0, 0.6, [[1.0, 0.0], [0.0, 0.0]])
    m = CoefficientModel(ParabolicDomain(BoundaryFunction.cylinder()), d, ReflectionField())
    with pytest.raises(NotPositiveDefinite):
        sigma_eval(m, [1.0, 0.0])


def test_phi_eval_examples():
    m = _model()
    assert np.allclose(phi_eval(m, [5, 1]), [1, -1])
    assert np.allclose(phi_eval(m, [5, -1]), [1, 1])
    m2 = _model(d=2, s0=2.0, c0=0.5)
    assert np.allclose(phi_eval(m2, [5, 0, 1]), [2, 0, -0.5])
    with pytest.raises(NotOnBoundary):
        phi_eval(m, [5, 0.3])


def test_phi_obliqueness_random_boundary_points(rng):
    models = [canonical_model(0.0, 2), canonical_model(0.5, 2), canonical_model(-0.5, 2),
              _model(0.3, d=2, swirl=0.7)]
    for m in models:
        for _ in range(250):
            x = float(rng.uniform(1.0, 1e4))
            u = rng.standard_normal(2)
            z = np.concatenate(([x], m.domain.b(x) * u / np.linalg.norm(u)))
            assert phi_eval(m, z) @ inward_normal(m.domain, z) > 0


def test_swirl_keeps_c0():
    m = _model(d=2, swirl=0.7, c0=1.3)
    z = np.array([5.0, 0.6, 0.8])
    phi = phi_eval(m, z)
    assert phi[1:] @ (-z[1:]) == pytest.approx(1.3)


@pytest.mark.parametrize("beta", [0.0, 0.5, -0.5])
@pytest.mark.parametrize("d", [1, 2])
def test_validate_canonical(beta, d):
    rep = validate_assumptions(canonical_model(beta, d))
    assert rep.passed, rep.failures()


def test_validate_failures():
    rep = validate_assumptions(_model(s0=0.0))
    assert not rep.passed and rep["V+ constants"].passed is False
    rep = validate_assumptions(_model(sigma=np.diag([1.0, 0.0])))
    assert not rep["C+ ellipticity"].passed
    bad = CoefficientModel(ParabolicDomain(BoundaryFunction.power_plus_decay(0.5, 1.0, 1.0, 0.2)),
                           DiffusionField.identity(1), ReflectionField())
    assert not validate_assumptions(bad)["D2+"].passed


def test_c1_examples():
    assert c1_constant(canonical_model(0.0)) == pytest.approx(0.5)
    assert c1_constant(_model(-0.5, boundary=BoundaryFunction.shifted_power(-0.5))) == pytest.approx(0.0625)
    assert c1_constant(canonical_model(0.5)) == pytest.approx(0.75 ** (2 / 3), rel=1e-12)


@pytest.mark.parametrize("beta", np.linspace(-0.9, 0.9, 19))
def test_c1_identity(beta):
    m = canonical_model(float(beta), 2, a_inf=1.7, s0=0.8, c0=1.3)
    c1 = c1_constant(m)
    assert c1 ** (1 + beta) * 2 * m.a_inf * m.c0 == pytest.approx((1 + beta) * m.s0 * m.sigma_bar_sq, rel=1e-12)


def test_upsilon_examples():
    assert upsilon_constant(canonical_model(0.0), MuMoments.uniform_ball(1)) == pytest.approx(4 / 3)
    assert upsilon_constant(canonical_model(0.5), MuMoments.uniform_ball(1)) == pytest.approx(0.8)
    assert upsilon_constant(canonical_model(0.0, 2), MuMoments.uniform_ball(2)) == pytest.approx(1.5)
    with pytest.raises(BetaOutOfRange):
        upsilon_constant(canonical_model(-0.5), MuMoments.uniform_ball(1))


@pytest.mark.parametrize("beta", [-0.3, -0.1, 0.0, 0.4, 0.9])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_upsilon_closed_form(beta, d):
    m = canonical_model(beta, d, s0=1.5, c0=0.7)
    expect = (1 + beta) / (1 + 3 * beta) * (1 + (1.5 / 0.7) ** 2 * d / (d + 2))
    assert upsilon_constant(m, MuMoments.uniform_ball(d)) == pytest.approx(expect, rel=1e-12)


def test_q_polynomial_examples():
    m = canonical_model(0.0)
    assert q_polynomial(m, [0.0]) == 1.0
    assert q_polynomial(m, [1.0]) == 2.0
    m2 = _model(sigma=[[1.0, 0.5], [0.5, 1.0]])
    assert q_polynomial(m2, [1.0]) == pytest.approx(3.0)


def test_s_squared(rng):
    mu = MuMoments.uniform_ball(1)
    assert s_squared_constant(canonical_model(0.0), mu) == pytest.approx(4 / 3)
    assert s_squared_constant(canonical_model(0.5), mu) == pytest.approx(0.8 * 0.75 ** (2 / 3), rel=1e-12)
    for _ in range(20):
        beta = float(rng.uniform(-0.3, 0.95))
        m = canonical_model(beta, 1, a_inf=float(rng.uniform(0.5, 3)), s0=float(rng.uniform(0.2, 2)))
        ratio = s_squared_constant(m, mu) / (m.a_inf ** 2 * c1_constant(m) ** (2 * beta))
        assert ratio == pytest.approx(upsilon_constant(m, mu), rel=1e-12)


def test_model_config_round_trip():
    m = _model(0.3, d=2, swirl=0.4, sigma=np.diag([1.0, 2.0, 3.0]))
    m2 = CoefficientModel.from_config(m.to_config())
    assert m2.to_config() == m.to_config()
    assert np.array_equal(m2.sigma_inf, m.sigma_inf)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        CoefficientModel(ParabolicDomain(BoundaryFunction.cylinder(), 2), DiffusionField.identity(1),
                         ReflectionField())
