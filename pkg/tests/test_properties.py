import numpy as np
from hypothesis import given, settings, strategies as st

from reflect.engine import step_reflected
from reflect.geometry import BoundaryFunction, boundary_eval, contains
from reflect.harness import canonical_json, config_hash
from reflect.model import c1_constant, canonical_model
from reflect.rng import RngStream, gaussian_block

betas = st.floats(-0.8, 0.8)
MODELS = {b: canonical_model(b, 2) for b in (-0.5, 0.0, 0.5)}


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(MODELS)), st.floats(2.0, 1e4), st.floats(0.0, 0.999),
       st.floats(0, 2 * np.pi), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_step_lands_in_domain(beta, x, r, th, dw):
    m = MODELS[beta]
    b = m.domain.b(x)
    z = np.array([x, r * b * np.cos(th), r * b * np.sin(th)])
    z1, dl, refl = step_reflected(m, z, 1e-3, np.asarray(dw) * b)
    assert contains(m.domain, z1)
    assert dl >= 0 and (dl > 0) == refl


@settings(max_examples=50, deadline=None)
@given(betas, st.floats(0.1, 10), st.floats(1.0, 1e6))
def test_boundary_positive_and_monotone_derivative_sign(beta, a, x):
    v, d1, _ = boundary_eval(BoundaryFunction.pure_power(beta, a), x)
    assert v > 0
    assert np.sign(d1) == np.sign(beta) or d1 == 0


@settings(max_examples=50, deadline=None)
@given(betas, st.floats(0.2, 5), st.floats(0.2, 5), st.floats(0.2, 5))
def test_c1_positive_and_scales(beta, a, s0, c0):
    m = canonical_model(beta, 1, a, s0, c0)
    c1 = c1_constant(m)
    assert c1 > 0
    m2 = canonical_model(beta, 1, a, 2 * s0, 2 * c0)
    assert np.isclose(c1_constant(m2), c1, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 64 - 1), st.integers(1, 40), st.integers(1, 40))
def test_stream_split_equals_whole(seed, idx, n1, n2):
    whole = gaussian_block(RngStream(seed, idx), n1 + n2)
    s = RngStream(seed, idx)
    parts = np.concatenate([gaussian_block(s, n1), gaussian_block(s, n2)])
    assert np.array_equal(whole, parts)
    assert np.all(np.isfinite(whole))


@given(st.dictionaries(st.text(max_size=5), st.integers() | st.floats(allow_nan=False) | st.text(max_size=5)))
def test_config_hash_ignores_key_order(d):
    rev = dict(reversed(list(d.items())))
    assert canonical_json(d) == canonical_json(rev)
    assert config_hash(d) == config_hash(rev)
