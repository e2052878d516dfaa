import numpy as np
import pytest
from scipy import stats

from reflect.engine import (
    SimConfig,
    continuity_shift,
    cylinder_ensemble,
    rescaled_window,
    sder_continue,
    sder_ensemble,
    simulate_ball,
    simulate_cylinder,
    simulate_sder,
    simulate_toy,
    step_reflected,
    toy_diagnostics,
    toy_ensemble,
    toy_ode_solution,
    window_schedule,
    ReflectedPath,
)
from reflect.geometry import BoundaryFunction, contains, boundary_eval
from reflect.model import canonical_model
from reflect.rng import RngStream


def test_step_examples(cyl):
    z, dl, refl = step_reflected(cyl, [10.0, 0.0], 1e-3, [0.3, 1.1])
    assert np.allclose(z, [10.4, 1.0]) and dl == pytest.approx(0.1) and refl
    z, dl, refl = step_reflected(cyl, [5.0, 0.0], 1e-3, [0.0, -1.2])
    assert np.allclose(z, [5.2, -1.0]) and dl == pytest.approx(0.2) and refl
    z, dl, refl = step_reflected(cyl, [5.0, 0.0], 1e-3, [0.1, 0.5])
    assert np.allclose(z, [5.1, 0.5]) and dl == 0.0 and not refl


def test_step_validation(cyl):
    with pytest.raises(ValueError):
        step_reflected(cyl, [5.0, 0.0], 0.0, [0.0, 0.0])
    with pytest.raises(ValueError):
        step_reflected(cyl, [5.0, 0.0, 0.0], 1e-3, [0.0, 0.0])


def test_narrow_domain_large_jump_lands_inside():
    m = canonical_model(-0.5, 1, a_inf=10.0)
    x = 2700.0
    b = boundary_eval(m.domain.boundary, x)[0]
    for jump in [1.05, 1.5, 3.0, 10.0]:
        for sign in (1.0, -1.0):
            z, dl, refl = step_reflected(m, [x, 0.0], 1e-3, [0.0, sign * jump * b])
            assert refl and dl > 0
            assert contains(m.domain, z)
            assert abs(z[1]) == pytest.approx(boundary_eval(m.domain.boundary, z[0])[0], rel=1e-9)


def test_zero_noise_is_constant(cyl):
    cfg = SimConfig(1e-2, 1.0, [3.0, 0.5], record="full", noise_scale=0.0)
    p = simulate_sder(cyl, cfg)
    assert np.all(p.states == [3.0, 0.5]) and np.all(p.local_time == 0)
    assert len(p.times) == 101


@pytest.mark.parametrize("beta,d", [(0.0, 1), (0.5, 2), (-0.5, 1)])
def test_confinement_and_local_time(beta, d):
    m = canonical_model(beta, d)
    z0 = np.zeros(1 + d)
    z0[0] = 20.0
    z0[1] = 0.99 * m.domain.b(20.0)
    p = simulate_sder(m, SimConfig(1e-3, 5.0, z0, seed=4, record="full"))
    r = np.linalg.norm(p.y, axis=1)
    b = np.array([m.domain.b(x) for x in p.x])
    assert np.all(r <= b * (1 + 1e-9))
    dl = np.diff(p.local_time)
    assert np.all(dl >= 0)
    assert np.all((dl > 0) == (p.reflected[1:] > 0))
    assert p.n_reflections > 0


def test_continuity_shift_keeps_paths_inside():
    m = canonical_model(0.0, 1)
    p = simulate_sder(m, SimConfig(1e-2, 5.0, [20.0, 0.0], seed=9, record="full", boundary_correction=True))
    assert np.max(np.abs(p.y)) <= 1.0 - continuity_shift(1e-2) + 1e-9
    assert continuity_shift(1e-2, enabled=False) == 0.0


def test_simulation_is_deterministic_and_resumable(cyl):
    cfg = SimConfig(1e-3, 2.0, [10.0, 0.0], seed=7)
    a = simulate_sder(cyl, cfg)
    b = simulate_sder(cyl, cfg)
    assert np.array_equal(a.states, b.states)
    s = RngStream(7, 0)
    half = simulate_sder(cyl, SimConfig(1e-3, 1.0, [10.0, 0.0]), s)
    rest = simulate_sder(cyl, SimConfig(1e-3, 1.0, half.states[-1]), s)
    assert np.array_equal(rest.states[-1], a.states[-1])


def test_cylinder_identity(cyl):
    p = simulate_cylinder(cyl, SimConfig(1e-3, 3.0, [0.0, 0.2], seed=3, record=10))
    assert np.allclose(p.x - p.noise_x, cyl.s0 * p.local_time, atol=1e-10)
    e = cylinder_ensemble(cyl, [0.0], 1e-3, [1.0, 2.0], 3, np.arange(20))
    assert np.allclose(e.states[:, :, 0] - e.extra["noise_x"], e.local_time, atol=1e-10)


def test_ball_stays_in_ball():
    m = canonical_model(0.0, 2)
    p = simulate_ball(m, SimConfig(1e-3, 5.0, [0.0, 0.0], seed=1, record="full"))
    assert p.states.shape[1] == 2
    assert np.all(np.linalg.norm(p.states, axis=1) <= 1 + 1e-12)
    with pytest.raises(ValueError):
        simulate_ball(m, SimConfig(1e-3, 1.0, [1.0, 1.0]))


def test_start_outside_domain_rejected(cyl):
    with pytest.raises(ValueError):
        simulate_sder(cyl, SimConfig(1e-3, 1.0, [5.0, 2.0]))


def test_toy_beta_zero_is_gaussian():
    e = toy_ensemble(1.5, 0.0, 5.0, 1e-2, [4.0], 21, np.arange(4000))
    x = e.states[:, 0, 0]
    assert stats.kstest(x, "norm", args=(5.0 + 1.5 * 4.0, 2.0)).pvalue > 1e-3


def test_toy_skeleton_follows_ode():
    p = simulate_toy(1.0, 0.5, SimConfig(1e-3, 10.0, 2.0, record=100, noise_scale=0.0))
    assert np.allclose(p.x, toy_ode_solution(2.0, 1.0, 0.5, p.times), rtol=1e-3)


def test_toy_diagnostics_constant_path():
    from reflect.engine import ToyPath

    t = np.linspace(0, 2, 11)
    a, q = toy_diagnostics(ToyPath(t, np.full(11, 4.0)), 1.0, 0.5)
    assert np.allclose(a, t * 4.0 ** -0.5)
    assert np.allclose(q, t * 4.0)
    with pytest.raises(ValueError):
        toy_diagnostics(ToyPath(t, np.zeros(11)), 1.0, 0.5)


def test_rescaled_window_examples():
    t = np.linspace(0, 20, 2001)
    states = np.column_stack([5.0 + t, np.full_like(t, 0.5)])
    path = ReflectedPath(t, states, np.zeros_like(t), np.zeros(t.size), 0)
    w = rescaled_window(path, 10.0, BoundaryFunction.cylinder(2.0), s_max=1.0)
    assert w.anchor == pytest.approx(15.0) and w.scale == 2.0
    assert np.allclose(w.x, 2.0 * w.times)
    assert np.allclose(w.y, 0.25)
    from reflect.errors import WindowExceedsHorizon

    with pytest.raises(WindowExceedsHorizon):
        rescaled_window(path, 19.0, BoundaryFunction.cylinder(2.0), s_max=1.0)


def test_window_schedule():
    assert np.allclose(window_schedule(1, 1, lambda t: 1.0, 4), [1, 2, 3, 4])
    assert np.allclose(window_schedule(1, 2, lambda t: 1.0, 3), [1, 5, 9])
    s = window_schedule(1, 1, None, 6, beta=0.5)
    assert np.all(np.diff(s) > 0)
    with pytest.raises(ValueError):
        window_schedule(0.5, 1, None, 3)


def test_ensemble_chunks_match_whole(cyl):
    whole = sder_ensemble(cyl, [20.0, 0.0], 1e-3, [0.5, 1.0], 5, np.arange(8))
    a = sder_ensemble(cyl, [20.0, 0.0], 1e-3, [0.5, 1.0], 5, np.arange(3))
    b = sder_ensemble(cyl, [20.0, 0.0], 1e-3, [0.5, 1.0], 5, np.arange(3, 8))
    from reflect.engine import EnsembleRecords

    joined = EnsembleRecords.concat([b, a])
    assert np.array_equal(joined.states, whole.states)
    assert np.array_equal(joined.positions, whole.positions)
    single = simulate_sder(cyl, SimConfig(1e-3, 1.0, [20.0, 0.0]), RngStream(5, 4))
    assert np.array_equal(single.states[-1], whole.states[4, 1])


def test_sder_continue_matches_longer_run(cyl):
    long = sder_ensemble(cyl, [20.0, 0.0], 1e-3, [0.5, 1.5], 5, np.arange(4))
    short = sder_ensemble(cyl, [20.0, 0.0], 1e-3, [0.5], 5, np.arange(4))
    cont = sder_continue(cyl, short.states[:, 0], short.positions, 1e-3, np.ones(4), 5, np.arange(4))
    assert np.array_equal(cont.states[:, 0], long.states[:, 1])


def test_record_times_validation(cyl):
    with pytest.raises(ValueError):
        sder_ensemble(cyl, [20.0, 0.0], 1e-3, [1.0, 0.5], 5, np.arange(2))
    k = sder_ensemble(cyl, [20.0, 0.0], 1e-3, [0.5, 1.0], 5, np.arange(2))
    assert k.at(1.0) == 1
    with pytest.raises(KeyError):
        k.at(0.7)


def test_path_csv_columns(tmp_path, cyl):
    p = simulate_sder(cyl, SimConfig(1e-2, 0.1, [5.0, 0.0], record="full"))
    f = tmp_path / "p.csv"
    p.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "t,x,y_1,L,reflected"
    assert len(lines) == 12
