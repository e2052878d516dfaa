import math

import numpy as np
import pytest

from reflect.errors import DegenerateRadialDirection, NonPositiveX, NotOnBoundary
from reflect.geometry import (
    BoundaryFunction,
    ParabolicDomain,
    boundary_eval,
    check_d1,
    check_d2_plus,
    contains,
    inward_normal,
    radial_boundary_point,
    window_map,
)

FAMILIES = [
    BoundaryFunction.pure_power(0.5),
    BoundaryFunction.pure_power(-0.3, 2.0),
    BoundaryFunction.shifted_power(-0.5),
    BoundaryFunction.shifted_power(0.7, 0.5),
    BoundaryFunction.cylinder(1.5),
    BoundaryFunction.power_plus_decay(0.4, 1.0, 0.3, -0.8),
]


def test_boundary_eval_examples():
    assert boundary_eval(BoundaryFunction.pure_power(0.5), 4.0) == pytest.approx((2.0, 0.25, -1 / 32), abs=1e-15)
    assert boundary_eval(BoundaryFunction.cylinder(), 123.0) == (1.0, 0.0, 0.0)
    assert boundary_eval(BoundaryFunction.shifted_power(-0.5), 3.0) == pytest.approx((0.5, -1 / 16, 3 / 128),
                                                                                       abs=1e-15)


def test_boundary_eval_rejects_nonpositive():
    with pytest.raises(NonPositiveX):
        boundary_eval(BoundaryFunction.cylinder(), 0.0)


@pytest.mark.parametrize("b", FAMILIES, ids=lambda b: f"{b.kind.value}{b.beta}")
@pytest.mark.parametrize("x", [0.5, 1.0, 3.7, 100.0, 1e5])
def test_derivatives_match_finite_differences(b, x):
    h = 1e-5 * x
    v, d1, d2 = boundary_eval(b, x)
    vp, vm = boundary_eval(b, x + h)[0], boundary_eval(b, x - h)[0]
    assert (vp - vm) / (2 * h) == pytest.approx(d1, rel=1e-6, abs=1e-9 * max(1, v))
    d1p, d1m = boundary_eval(b, x + h)[1], boundary_eval(b, x - h)[1]
    assert (d1p - d1m) / (2 * h) == pytest.approx(d2, rel=1e-6, abs=1e-9 * max(1, abs(d1)))


def test_boundary_validation():
    with pytest.raises(ValueError, match=r"beta must lie in \(-1,1\)"):
        BoundaryFunction.pure_power(1.5)
    with pytest.raises(ValueError):
        BoundaryFunction.pure_power(0.5, a_inf=0.0)
    with pytest.raises(ValueError):
        BoundaryFunction("cylinder", 0.3)
    with pytest.raises(ValueError, match=r"beta must lie"):
        BoundaryFunction.from_config({"kind": "pure_power", "beta": 1.5})


def test_config_round_trip():
    for b in FAMILIES:
        assert BoundaryFunction.from_config(b.to_config()) == b
    assert BoundaryFunction.from_config({"kind": "shifted_power", "beta": -0.5, "a_inf": 1.0}) == \
        BoundaryFunction.shifted_power(-0.5)


def test_contains_examples():
    dom = ParabolicDomain(BoundaryFunction.pure_power(0.5))
    assert contains(dom, [1.0, 0.5])
    assert not contains(dom, [1.0, 1.5])
    cyl = ParabolicDomain(BoundaryFunction.cylinder())
    assert contains(cyl, [10.0, 1.0])
    assert not contains(cyl, [0.4, 0.0])
    assert contains(cyl, [10.0, 1.0 + 5e-13])
    assert not contains(cyl, [10.0, 1.0 + 1e-11])


def test_radial_boundary_point():
    cyl = ParabolicDomain(BoundaryFunction.cylinder())
    assert np.allclose(radial_boundary_point(cyl, [5, 1.2]), [5, 1])
    assert np.allclose(radial_boundary_point(cyl, [5, -1.3]), [5, -1])
    dom = ParabolicDomain(BoundaryFunction.pure_power(0.5), dim_y=2)
    assert np.allclose(radial_boundary_point(dom, [4, 0, 3]), [4, 0, 2])
    with pytest.raises(DegenerateRadialDirection):
        radial_boundary_point(cyl, [5, 0.0])


def test_inward_normal_examples():
    cyl = ParabolicDomain(BoundaryFunction.cylinder())
    assert np.allclose(inward_normal(cyl, [5, 1]), [0, -1])
    dom = ParabolicDomain(BoundaryFunction.pure_power(0.5))
    assert np.allclose(inward_normal(dom, [4, 2]), np.array([0.25, -1]) / math.sqrt(1.0625))
    assert np.allclose(inward_normal(dom, [4, -2]), np.array([0.25, 1]) / math.sqrt(1.0625))
    with pytest.raises(NotOnBoundary):
        inward_normal(dom, [4, 1])


@pytest.mark.parametrize("b", FAMILIES, ids=lambda b: f"{b.kind.value}{b.beta}")
def test_inward_normal_unit_and_inward(b, rng):
    dom = ParabolicDomain(b, dim_y=2)
    for _ in range(25):
        x = float(rng.uniform(0.5, 200))
        u = rng.standard_normal(2)
        z = np.concatenate(([x], dom.b(x) * u / np.linalg.norm(u)))
        n = inward_normal(dom, z)
        assert abs(np.linalg.norm(n) - 1) < 1e-12
        assert contains(dom, z + 1e-6 * dom.b(x) * n)


def test_window_map_examples(rng):
    w = window_map(100.0, BoundaryFunction.cylinder(2.0))
    assert np.allclose(w.forward([104.0, 1.0]), [2.0, 0.5])
    assert window_map(100.0, BoundaryFunction.pure_power(0.5)).time_scale == pytest.approx(100.0)
    for _ in range(50):
        p = rng.standard_normal(3) * 10
        assert np.max(np.abs(w.forward(w.inverse(p)) - p)) < 1e-12


def test_d2_plus_validator():
    assert check_d2_plus(BoundaryFunction.shifted_power(-0.5))[0]
    assert check_d2_plus(BoundaryFunction.shifted_power(0.5))[0]
    assert check_d2_plus(BoundaryFunction.cylinder())[0]
    beta = 0.5
    # a perturbation decaying only like x^(beta(1-eps)) breaks the rate
    assert not check_d2_plus(BoundaryFunction.power_plus_decay(beta, 1.0, 1.0, beta * 0.9))[0]
    assert check_d2_plus(BoundaryFunction.power_plus_decay(beta, 1.0, 1.0, -0.5))[0]


def test_d1_validator():
    assert check_d1(BoundaryFunction.pure_power(0.5))[0]
    assert not check_d1(BoundaryFunction.cylinder())[0]
    assert not check_d1(BoundaryFunction.shifted_power(-0.5))[0]
