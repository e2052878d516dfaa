import numpy as np
import pytest

from reflect.errors import NotPositiveDefinite
from reflect.linalg import jacobi_eigh, sqrtm_spd, symmetric_eigh


def test_diagonal_sqrt():
    assert np.allclose(sqrtm_spd(np.diag([4.0, 1.0])), np.diag([2.0, 1.0]), atol=1e-14)


def test_two_by_two_closed_form():
    s = np.array([[2.0, 1.0], [1.0, 2.0]])
    r = sqrtm_spd(s)
    on, off = (np.sqrt(3) + 1) / 2, (np.sqrt(3) - 1) / 2
    assert np.allclose(r, [[on, off], [off, on]], atol=1e-13)
    assert np.max(np.abs(r @ r - s)) < 1e-12


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5, 6])
def test_random_spd_residual(rng, m):
    for _ in range(20):
        a = rng.standard_normal((m, m))
        s = a @ a.T + 0.05 * np.eye(m)
        r = sqrtm_spd(s)
        assert np.allclose(r, r.T, atol=1e-14)
        assert np.max(np.abs(r @ r - s)) < 1e-10


def test_eigh_matches_numpy(rng):
    a = rng.standard_normal((5, 5))
    s = a + a.T
    w, v = symmetric_eigh(s)
    assert np.allclose(np.sort(w), np.linalg.eigvalsh(s), atol=1e-12)
    assert np.allclose(v @ np.diag(w) @ v.T, s, atol=1e-12)
    w2, _ = jacobi_eigh(s.copy())
    assert np.allclose(np.sort(w2), np.sort(w), atol=1e-12)


def test_not_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        sqrtm_spd(np.diag([1.0, 0.0]))
    with pytest.raises(NotPositiveDefinite):
        sqrtm_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))
