"""Euler-Maruyama integrators with oblique pushback reflection.

Four systems share one stepping idea: propose an unconstrained Gaussian
move, and when it leaves the domain push it back along the reflection
vector taken at the radial boundary anchor, the minimal distance that
restores membership. The push length is the local-time increment.

Every path draws its normals from the counter-based stream
``(seed, path_index)``, consuming ``1 + d`` normals per step (one for the
toy model), so results do not depend on how paths are split across
workers and a path can be resumed from ``(state, stream position)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .errors import (
    NonPositiveStart,
    NotPositiveDefinite,
    OriginGuardHit,
    ReflectionFailed,
    SimulationError,
    WindowExceedsHorizon,
)
from .geometry import CYLINDER, BoundaryFunction, b_eval, boundary_eval, contains
from .linalg import sqrtm_spd_kernel
from .model import (
    FP_A,
    FP_C0,
    FP_S0,
    FP_SWIRL,
    FP_XG,
    IP_BCODE,
    IP_DKIND,
    CoefficientModel,
    phi_kernel,
    sigma_kernel,
)
from .rng import RngStream, norm_ppf, philox4x64, word_to_uniform

OK, REFLECTION_FAILED, ORIGIN_GUARD_HIT, NOT_POSITIVE_DEFINITE = 0, 1, 2, 3
BISECTION_ITERS = 60
DEFAULT_MAX_SUBSTEPS = 8
# -zeta(1/2)/sqrt(2 pi): discrete monitoring of a reflected Gaussian walk
# lags the continuous process by this many step standard deviations
CONTINUITY_SHIFT = 0.5825971579390106


@njit(cache=True, inline="always")
def _tol(bx):
    return 1e-12 * max(1.0, bx)


@njit(cache=True, inline="always")
def _bval(ip, fp, x):
    return b_eval(ip[IP_BCODE], fp, x)[0]


@njit(cache=True, inline="always")
def _round_push(py, phy, off, radius):
    """Smallest ``delta >= 0`` with ``|py + delta phy| <= radius`` over coordinates ``off:``.

    Returns the closest-approach ``delta`` when the line misses the ball,
    and -1 when ``phy`` does not point inward.
    """
    a = 0.0
    bb = 0.0
    c = -radius * radius
    for i in range(off, py.shape[0]):
        a += phy[i] * phy[i]
        bb += py[i] * phy[i]
        c += py[i] * py[i]
    out = 0.0
    if c > 0.0:
        if a == 0.0 or bb >= 0.0:
            out = -1.0
        else:
            disc = bb * bb - a * c
            if disc < 0.0:
                out = -bb / a
            else:
                out = c / (-bb + math.sqrt(disc))
    return out


@njit(cache=True, inline="always")
def _lateral_excess(ip, fp, p, phi, delta, inset):
    """``|p_y + delta phi_y| - b(p_x + delta phi_x) + inset`` with the profile read at or above the guard."""
    r2 = 0.0
    for i in range(1, p.shape[0]):
        v = p[i] + delta * phi[i]
        r2 += v * v
    x = max(p[0] + delta * phi[0], fp[FP_XG])
    return math.sqrt(r2) - _bval(ip, fp, x) + inset


@njit(cache=True, inline="always")
def _radial_sd(sig, p, r):
    """Standard deviation of unit-time noise along the radial direction ``p[1:]/r``."""
    v = 0.0
    m = sig.shape[0]
    for i in range(1, m):
        for j in range(1, m):
            v += p[i] * sig[i, j] * p[j]
    return math.sqrt(max(v, 0.0)) / r


@njit(cache=True)
def reflect_into_domain(ip, fp, p, phi, u, max_substeps, shift, sig_inf):
    """Push ``p`` (in place) back into the parabolic domain.

    ``shift > 0`` reflects on the boundary moved inward by ``shift`` times the
    radial noise scale (continuity correction); 0 gives the plain scheme.
    Returns ``(dL, reflected, status)``.
    """
    m = p.shape[0]
    d = m - 1
    xg = fp[FP_XG]
    dl = 0.0
    reflected = False
    status = REFLECTION_FAILED
    k = 0
    while True:
        r = 0.0
        for i in range(1, m):
            r += p[i] * p[i]
        r = math.sqrt(r)
        xq = max(p[0], xg)
        bx = _bval(ip, fp, xq)
        inset = 0.0
        if shift > 0.0 and r > 0.0:
            inset = shift * _radial_sd(sig_inf, p, r)
        if r <= bx - inset + _tol(bx):
            status = ORIGIN_GUARD_HIT if p[0] < xg else OK
            break
        if k == max_substeps:
            break
        k += 1
        reflected = True
        for i in range(d):
            u[i] = p[1 + i] / r
        phi_kernel(ip, fp, xq, u, phi)
        if ip[IP_BCODE] == CYLINDER:
            delta = _round_push(p, phi, 1, bx - inset)
            if delta < 0.0:
                break
        else:
            # bracket with the closest approach of the push line to the axis,
            # which lies inside whenever the line crosses the ball at all
            a2 = 0.0
            ab = 0.0
            for i in range(1, m):
                a2 += phi[i] * phi[i]
                ab += p[i] * phi[i]
            if a2 == 0.0 or ab >= 0.0:
                break
            lo = 0.0
            hi = -ab / a2
            grow = 0
            while _lateral_excess(ip, fp, p, phi, hi, inset) > 0.0 and grow < 40:
                lo = hi
                hi *= 2.0
                grow += 1
            if grow == 40:
                break
            for _it in range(BISECTION_ITERS):
                mid = 0.5 * (lo + hi)
                if _lateral_excess(ip, fp, p, phi, mid, inset) > 0.0:
                    lo = mid
                else:
                    hi = mid
            delta = hi
        for i in range(m):
            p[i] += delta * phi[i]
        dl += delta
    return dl, reflected, status


@njit(cache=True)
def _fill_root(ip, fp, sig_inf, direction, x, work, root):
    sigma_kernel(ip, fp, sig_inf, direction, x, work)
    return sqrtm_spd_kernel(work, root)


@njit(cache=True, inline="always")
def _normal(k0, k1, pos, blk_loaded, buf):
    """Normal number ``pos`` of the stream; refreshes ``buf`` when the block changes."""
    blk = pos >> 2
    if blk != blk_loaded:
        philox4x64(np.uint64(blk), np.uint64(0), np.uint64(0), np.uint64(0), k0, k1, buf)
    return norm_ppf(word_to_uniform(buf[pos & 3])), blk


@njit(cache=True)
def sder_advance(ip, fp, sig_inf, sig_sqrt, direction, z, n_steps, sqdt, noise_scale,
                 max_substeps, shift, smax, k0, k1, pos, ws):
    """Advance ``z`` in place by ``n_steps`` steps.

    ``ws`` is scratch ``(p, dw, phi, u, work, root, buf)``; ``smax`` bounds
    the radial noise scale so most steps skip the exact boundary test.
    Returns ``(dL, n_reflections, new_pos, status, steps_done)``.
    """
    p, dw, phi, u, work, root, buf = ws
    m = z.shape[0]
    xg = fp[FP_XG]
    code = ip[IP_BCODE]
    const = ip[IP_DKIND] == 0
    a = sig_sqrt if const else root
    scale = sqdt * noise_scale
    fast_inset = shift * smax
    dl_total = 0.0
    nref = 0
    status = OK
    done = 0
    blk_loaded = -1
    for s in range(n_steps):
        if not const:
            if not _fill_root(ip, fp, sig_inf, direction, z[0], work, root):
                status = NOT_POSITIVE_DEFINITE
                break
        for i in range(m):
            g, blk_loaded = _normal(k0, k1, pos, blk_loaded, buf)
            dw[i] = scale * g
            pos += 1
        r2 = 0.0
        for i in range(m):
            acc = z[i]
            for j in range(m):
                acc += a[i, j] * dw[j]
            p[i] = acc
            if i > 0:
                r2 += acc * acc
        if code == CYLINDER:
            bx = fp[FP_A]
        else:
            bx = b_eval(code, fp, max(p[0], xg))[0]
        lim = bx - fast_inset
        if p[0] >= xg and lim > 0.0 and r2 <= lim * lim:
            for i in range(m):
                z[i] = p[i]
            done += 1
            continue
        dl, refl, st = reflect_into_domain(ip, fp, p, phi, u, max_substeps, shift, sig_inf)
        if st != OK:
            status = st
            break
        for i in range(m):
            z[i] = p[i]
        dl_total += dl
        if refl:
            nref += 1
        done += 1
    return dl_total, nref, pos, status, done


def _workspace(m):
    return (np.empty(m), np.empty(m), np.empty(m), np.empty(m - 1), np.empty((m, m)), np.empty((m, m)),
            np.empty(4, dtype=np.uint64))


@njit(cache=True)
def sder_path_kernel(ip, fp, sig_inf, sig_sqrt, direction, z0, n_steps, stride, sqdt, noise_scale,
                     max_substeps, shift, smax, k0, k1, pos, ws):
    """Single path recorded every ``stride`` steps (plus the final state)."""
    m = z0.shape[0]
    n_rec = (n_steps + stride - 1) // stride + 1
    states = np.empty((n_rec, m))
    steps = np.empty(n_rec, dtype=np.int64)
    ltime = np.zeros(n_rec)
    flags = np.zeros(n_rec, dtype=np.int64)
    z = z0.copy()
    states[0] = z
    steps[0] = 0
    done = 0
    total_l = 0.0
    total_ref = 0
    k = 1
    status = OK
    while done < n_steps:
        n = min(stride, n_steps - done)
        dl, nref, pos, status, sd = sder_advance(ip, fp, sig_inf, sig_sqrt, direction, z, n, sqdt, noise_scale,
                                                 max_substeps, shift, smax, k0, k1, pos, ws)
        total_l += dl
        total_ref += nref
        if status != OK:
            done += sd
            break
        done += n
        states[k] = z
        steps[k] = done
        ltime[k] = total_l
        flags[k] = nref
        k += 1
    return states[:k], steps[:k], ltime[:k], flags[:k], total_ref, pos, status, done


@njit(cache=True)
def sder_batch_kernel(ip, fp, sig_inf, sig_sqrt, direction, z0s, pos0, k0, indices, rec_steps, sqdt,
                      noise_scale, max_substeps, shift, smax, ws, out_z, out_l, out_nref, out_pos,
                      status, fail_step):
    """Many paths, each recorded at its own increasing step counts ``rec_steps[i]``."""
    n = z0s.shape[0]
    m = z0s.shape[1]
    z = np.empty(m)
    for i in range(n):
        k1 = np.uint64(indices[i])
        for j in range(m):
            z[j] = z0s[i, j]
        pos = pos0[i]
        done = 0
        lt = 0.0
        nr = 0
        status[i] = OK
        for r in range(rec_steps.shape[1]):
            target = rec_steps[i, r]
            dl, nref, pos, st, sd = sder_advance(ip, fp, sig_inf, sig_sqrt, direction, z, target - done, sqdt,
                                                 noise_scale, max_substeps, shift, smax, k0, k1, pos, ws)
            lt += dl
            nr += nref
            if st != OK:
                status[i] = st
                fail_step[i] = done + sd
                break
            done = target
            for j in range(m):
                out_z[i, r, j] = z[j]
            out_l[i, r] = lt
            out_nref[i, r] = nr
        out_pos[i] = pos


@njit(cache=True)
def ball_reflect(py, phy, u, sig_sqrt, c0, swirl, max_substeps, shift):
    """Push ``py`` (in place) into the unit ball along ``phi_inf``; returns ``(dL, reflected, ok)``."""
    d = py.shape[0]
    m = d + 1
    dl = 0.0
    refl = False
    ok = False
    for k in range(max_substeps + 1):
        r = 0.0
        for i in range(d):
            r += py[i] * py[i]
        r = math.sqrt(r)
        radius = 1.0
        if shift > 0.0 and r > 0.0:
            v = 0.0
            for c in range(m):
                acc = 0.0
                for i in range(d):
                    acc += py[i] * sig_sqrt[1 + i, c]
                v += acc * acc
            radius = 1.0 - shift * math.sqrt(v) / r
        if r <= radius + 1e-12:
            ok = True
            break
        if k == max_substeps:
            break
        refl = True
        for i in range(d):
            u[i] = py[i] / r
            phy[i] = -c0 * u[i]
        if swirl != 0.0 and d >= 2:
            phy[0] -= swirl * u[1]
            phy[1] += swirl * u[0]
        delta = _round_push(py, phy, 0, radius)
        if delta < 0.0:
            break
        for i in range(d):
            py[i] += delta * phy[i]
        dl += delta
    return dl, refl, ok


@njit(cache=True)
def cylinder_advance(sig_sqrt, s0, c0, swirl, state, n_steps, sqdt, noise_scale, max_substeps, shift, smax,
                     k0, k1, pos, ws, acc1, acc2, accumulate):
    """Cylinder limit: ``state = (X, Y, martingale)``, Y reflected in the unit ball.

    With ``accumulate`` the post-step ``y`` and ``y y^T`` are summed into
    ``acc1``/``acc2``. Returns ``(dL, n_reflections, new_pos, status, steps_done)``.
    """
    py, dw, phy, u, buf = ws
    m = dw.shape[0]
    d = m - 1
    scale = sqdt * noise_scale
    lim = 1.0 - shift * smax
    lim2 = lim * lim if lim > 0.0 else -1.0
    dl_total = 0.0
    nref = 0
    status = OK
    done = 0
    blk_loaded = -1
    for s in range(n_steps):
        for i in range(m):
            g, blk_loaded = _normal(k0, k1, pos, blk_loaded, buf)
            dw[i] = scale * g
            pos += 1
        dx = 0.0
        for j in range(m):
            dx += sig_sqrt[0, j] * dw[j]
        r2 = 0.0
        for i in range(d):
            acc = state[1 + i]
            for j in range(m):
                acc += sig_sqrt[1 + i, j] * dw[j]
            py[i] = acc
            r2 += acc * acc
        dl = 0.0
        if r2 > lim2:
            dl, refl, ok = ball_reflect(py, phy, u, sig_sqrt, c0, swirl, max_substeps, shift)
            if not ok:
                status = REFLECTION_FAILED
                break
            if refl:
                nref += 1
        state[0] += dx + s0 * dl
        state[m] += dx
        for i in range(d):
            state[1 + i] = py[i]
        dl_total += dl
        done += 1
        if accumulate:
            for i in range(d):
                acc1[i] += py[i]
                for j in range(d):
                    acc2[i, j] += py[i] * py[j]
    return dl_total, nref, pos, status, done


def _ball_workspace(d):
    return (np.empty(d), np.empty(d + 1), np.empty(d), np.empty(d), np.empty(4, dtype=np.uint64))


@njit(cache=True)
def cylinder_path_kernel(sig_sqrt, s0, c0, swirl, state0, n_steps, stride, sqdt, noise_scale,
                         max_substeps, shift, smax, k0, k1, pos, ws):
    m = state0.shape[0]
    d = m - 2
    n_rec = (n_steps + stride - 1) // stride + 1
    states = np.empty((n_rec, m))
    steps = np.empty(n_rec, dtype=np.int64)
    ltime = np.zeros(n_rec)
    flags = np.zeros(n_rec, dtype=np.int64)
    st_vec = state0.copy()
    acc1 = np.zeros(d)
    acc2 = np.zeros((d, d))
    states[0] = st_vec
    steps[0] = 0
    done = 0
    total_l = 0.0
    total_ref = 0
    k = 1
    status = OK
    while done < n_steps:
        n = min(stride, n_steps - done)
        dl, nref, pos, status, sd = cylinder_advance(sig_sqrt, s0, c0, swirl, st_vec, n, sqdt, noise_scale,
                                                     max_substeps, shift, smax, k0, k1, pos, ws, acc1, acc2,
                                                     False)
        total_l += dl
        total_ref += nref
        if status != OK:
            done += sd
            break
        done += n
        states[k] = st_vec
        steps[k] = done
        ltime[k] = total_l
        flags[k] = nref
        k += 1
    return states[:k], steps[:k], ltime[:k], flags[:k], total_ref, pos, status, done


@njit(cache=True)
def cylinder_batch_kernel(sig_sqrt, s0, c0, swirl, states0, pos0, k0, indices, rec_steps, sqdt,
                          noise_scale, max_substeps, shift, smax, ws, out_state, out_l, out_pos, status,
                          fail_step):
    n = states0.shape[0]
    m1 = states0.shape[1]
    d = m1 - 2
    st_vec = np.empty(m1)
    acc1 = np.zeros(d)
    acc2 = np.zeros((d, d))
    for i in range(n):
        k1 = np.uint64(indices[i])
        for j in range(m1):
            st_vec[j] = states0[i, j]
        pos = pos0[i]
        done = 0
        lt = 0.0
        status[i] = OK
        for r in range(rec_steps.shape[1]):
            target = rec_steps[i, r]
            dl, nref, pos, st, sd = cylinder_advance(sig_sqrt, s0, c0, swirl, st_vec, target - done, sqdt,
                                                     noise_scale, max_substeps, shift, smax, k0, k1, pos, ws,
                                                     acc1, acc2, False)
            lt += dl
            if st != OK:
                status[i] = st
                fail_step[i] = done + sd
                break
            done = target
            for j in range(m1):
                out_state[i, r, j] = st_vec[j]
            out_l[i, r] = lt
        out_pos[i] = pos


@njit(cache=True)
def cylinder_moments_kernel(sig_sqrt, s0, c0, swirl, y0, n_steps, burn, n_batches, sqdt, noise_scale,
                            max_substeps, shift, smax, k0, k1, ws):
    """Batch means of ``y_i`` and ``y_i y_j`` along one long ball run (no path storage)."""
    d = y0.shape[0]
    st_vec = np.zeros(d + 2)
    for i in range(d):
        st_vec[1 + i] = y0[i]
    first = np.zeros((n_batches, d))
    second = np.zeros((n_batches, d, d))
    dl, nref, pos, status, sd = cylinder_advance(sig_sqrt, s0, c0, swirl, st_vec, burn, sqdt, noise_scale,
                                                 max_substeps, shift, smax, k0, k1, 0, ws, first[0],
                                                 second[0], False)
    if status != OK:
        return first, second, status
    per = (n_steps - burn) // n_batches
    for b in range(n_batches):
        dl, nref, pos, status, sd = cylinder_advance(sig_sqrt, s0, c0, swirl, st_vec, per, sqdt, noise_scale,
                                                     max_substeps, shift, smax, k0, k1, pos, ws, first[b],
                                                     second[b], True)
        if status != OK:
            return first, second, status
        first[b] /= per
        second[b] /= per
    return first, second, OK


@njit(cache=True)
def toy_advance(c_prime, beta, x_floor, x, a_int, m_int, n_steps, dt, sqdt, noise_scale, k0, k1, pos, buf):
    """Euler steps of ``dX = c' X^-beta dt + dW`` with trapezoidal ``A`` and ``[M]`` integrals."""
    xc = max(x, x_floor)
    drift = xc ** (-beta)
    fa = 1.0 / (xc * drift)
    fm = 1.0 / (drift * drift)
    scale = sqdt * noise_scale
    blk_loaded = -1
    for _ in range(n_steps):
        g, blk_loaded = _normal(k0, k1, pos, blk_loaded, buf)
        x = x + c_prime * drift * dt + scale * g
        pos += 1
        xc = max(x, x_floor)
        drift = xc ** (-beta)
        ga = 1.0 / (xc * drift)
        gm = 1.0 / (drift * drift)
        a_int += 0.5 * dt * (fa + ga)
        m_int += 0.5 * dt * (fm + gm)
        fa = ga
        fm = gm
    return x, a_int, m_int, pos


@njit(cache=True)
def toy_path_kernel(c_prime, beta, x_floor, x0, n_steps, stride, dt, noise_scale, k0, k1, pos):
    n_rec = (n_steps + stride - 1) // stride + 1
    xs = np.empty(n_rec)
    steps = np.empty(n_rec, dtype=np.int64)
    buf = np.empty(4, dtype=np.uint64)
    sqdt = math.sqrt(dt)
    x = x0
    xs[0] = x
    steps[0] = 0
    done = 0
    k = 1
    a_int = 0.0
    m_int = 0.0
    while done < n_steps:
        n = min(stride, n_steps - done)
        x, a_int, m_int, pos = toy_advance(c_prime, beta, x_floor, x, a_int, m_int, n, dt, sqdt, noise_scale,
                                           k0, k1, pos, buf)
        done += n
        xs[k] = x
        steps[k] = done
        k += 1
    return xs, steps, pos


@njit(cache=True)
def toy_batch_kernel(c_prime, beta, x_floor, x0s, k0, indices, rec_steps, dt, noise_scale,
                     out_x, out_a, out_m, out_pos):
    buf = np.empty(4, dtype=np.uint64)
    sqdt = math.sqrt(dt)
    for i in range(x0s.shape[0]):
        k1 = np.uint64(indices[i])
        x = x0s[i]
        pos = 0
        done = 0
        a_int = 0.0
        m_int = 0.0
        for r in range(rec_steps.shape[0]):
            target = rec_steps[r]
            x, a_int, m_int, pos = toy_advance(c_prime, beta, x_floor, x, a_int, m_int, target - done, dt, sqdt,
                                               noise_scale, k0, k1, pos, buf)
            done = target
            out_x[i, r] = x
            out_a[i, r] = a_int
            out_m[i, r] = m_int
        out_pos[i] = pos


# ---------------------------------------------------------------------------
# Python-level API


@dataclass
class SimConfig:
    """Step, horizon, start and recording for one simulation.

    ``record`` is ``"terminal"``, ``"full"`` or a positive integer stride.
    ``noise_scale`` multiplies every Gaussian increment; 0 gives the
    deterministic skeleton (test hook).
    """

    dt: float
    horizon: float
    z0: np.ndarray | float
    seed: int = 0
    record: str | int = "terminal"
    max_substeps: int = DEFAULT_MAX_SUBSTEPS
    noise_scale: float = 1.0
    x_floor: float = 1e-3
    boundary_correction: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon >= self.dt:
            raise ValueError("horizon must be at least one step")
        if isinstance(self.record, str) and self.record not in ("terminal", "full"):
            raise ValueError("record must be 'terminal', 'full' or a positive stride")
        if not isinstance(self.record, str) and int(self.record) < 1:
            raise ValueError("record stride must be >= 1")
        if self.max_substeps < 1:
            raise ValueError("max_substeps must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def shift(self) -> float:
        return continuity_shift(self.dt, self.noise_scale, self.boundary_correction)

    @property
    def stride(self) -> int:
        if self.record == "terminal":
            return self.n_steps
        if self.record == "full":
            return 1
        return int(self.record)


@dataclass
class ReflectedPath:
    """Recorded trajectory: ``states[k] = (x, y_1..y_d)`` at ``times[k]``.

    ``reflected[k]`` counts reflected steps since the previous record and
    ``local_time`` is cumulative. For cylinder paths ``noise_x`` holds the
    cumulative row-0 noise (the Brownian part of the horizontal coordinate).
    """

    times: np.ndarray
    states: np.ndarray
    local_time: np.ndarray
    reflected: np.ndarray
    n_reflections: int
    stream_position: int = 0
    noise_x: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.states.shape[1] - 1

    @property
    def x(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.states[:, 1:]

    def to_csv(self, path) -> None:
        write_path_csv(self, path)


@dataclass
class ToyPath:
    times: np.ndarray
    x: np.ndarray
    stream_position: int = 0


def write_path_csv(path: ReflectedPath, filename) -> None:
    header = ["t", "x"] + [f"y_{i + 1}" for i in range(path.d)] + ["L", "reflected"]
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, s, l, r in zip(path.times, path.states, path.local_time, path.reflected):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in s] + [repr(float(l)), int(r > 0)])


def continuity_shift(dt: float, noise_scale: float = 1.0, enabled: bool = True) -> float:
    """Inward boundary offset per unit radial noise scale; 0 when disabled."""
    return CONTINUITY_SHIFT * math.sqrt(dt) * abs(noise_scale) if enabled else 0.0


def _raise_status(status: int, where: str, path_index=None, time=None):
    if status == REFLECTION_FAILED:
        cause = ReflectionFailed(f"no admissible pushback {where}")
    elif status == ORIGIN_GUARD_HIT:
        cause = OriginGuardHit(f"x fell below the guard {where}")
    elif status == NOT_POSITIVE_DEFINITE:
        cause = NotPositiveDefinite(f"diffusion matrix lost definiteness {where}")
    else:
        return
    if path_index is None and time is None:
        raise cause
    raise SimulationError(str(cause), path_index=path_index, time=time, cause=cause)


def _as_point(model: CoefficientModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != 1 + model.d:
        raise ValueError(f"expected a point in R^{1 + model.d}")
    return z


def step_reflected(model: CoefficientModel, z, dt: float, dw, max_substeps: int = DEFAULT_MAX_SUBSTEPS):
    """One step from ``z`` driven by the Brownian increment ``dw``.

    Returns ``(z_next, dL, reflected)``. ``dt`` only sets the scale of
    ``dw`` and is kept for signature symmetry.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = _as_point(model, z)
    dw = np.asarray(dw, dtype=float).reshape(-1)
    pk = model.pack()
    m = z.shape[0]
    work = np.empty((m, m))
    root = np.empty((m, m))
    if model.diffusion.kind.value == "constant":
        a = pk.sig_sqrt
    else:
        if not _fill_root(pk.ip, pk.fp, pk.sig_inf, pk.direction, float(z[0]), work, root):
            _raise_status(NOT_POSITIVE_DEFINITE, f"at x={z[0]}")
        a = root
    p = z + a @ dw
    phi = np.empty(m)
    u = np.empty(m - 1)
    dl, refl, status = reflect_into_domain(pk.ip, pk.fp, p, phi, u, max_substeps, 0.0, pk.sig_inf)
    _raise_status(status, f"from z={z.tolist()}")
    return p, float(dl), bool(refl)


def _stream_key(stream: RngStream):
    return stream.key


def radial_noise_bound(model: CoefficientModel) -> float:
    """Largest radial standard deviation of the y-noise, ``sqrt(lambda_max(Sigma_inf[1:, 1:]))``."""
    return float(math.sqrt(max(np.linalg.eigvalsh(model.sigma_inf[1:, 1:]).max(), 0.0)))


def simulate_sder(model: CoefficientModel, cfg: SimConfig, stream: RngStream | None = None) -> ReflectedPath:
    """Integrate the reflected SDE in the parabolic domain."""
    z0 = _as_point(model, cfg.z0)
    if not contains(model.domain, z0):
        raise ValueError("start point is outside the domain")
    stream = RngStream(cfg.seed, 0) if stream is None else stream
    pk = model.pack()
    k0, k1 = _stream_key(stream)
    states, steps, lt, flags, nref, pos, status, done = sder_path_kernel(
        pk.ip, pk.fp, pk.sig_inf, pk.sig_sqrt, pk.direction, z0, cfg.n_steps, cfg.stride,
        math.sqrt(cfg.dt), cfg.noise_scale, cfg.max_substeps, cfg.shift, radial_noise_bound(model), k0, k1,
        stream.counter, _workspace(z0.shape[0]))
    stream.counter = int(pos)
    _raise_status(status, f"at step {done}", path_index=stream.stream_index, time=done * cfg.dt)
    return ReflectedPath(steps * cfg.dt, states, lt, flags, int(nref), int(pos))


def _cylinder_run(model: CoefficientModel, cfg: SimConfig, stream: RngStream | None, x0: float, y0):
    d = model.d
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if y0.shape[0] != d:
        raise ValueError(f"expected y0 in R^{d}")
    if np.linalg.norm(y0) > 1.0 + 1e-12:
        raise ValueError("y0 must lie in the closed unit ball")
    stream = RngStream(cfg.seed, 0) if stream is None else stream
    pk = model.pack()
    k0, k1 = _stream_key(stream)
    st0 = np.concatenate(([x0], y0, [0.0]))
    states, steps, lt, flags, nref, pos, status, done = cylinder_path_kernel(
        pk.sig_sqrt, model.s0, model.c0, model.reflection.swirl, st0, cfg.n_steps, cfg.stride,
        math.sqrt(cfg.dt), cfg.noise_scale, cfg.max_substeps, cfg.shift, radial_noise_bound(model), k0, k1,
        stream.counter, _ball_workspace(d))
    stream.counter = int(pos)
    _raise_status(status, f"at step {done}", path_index=stream.stream_index, time=done * cfg.dt)
    return ReflectedPath(steps * cfg.dt, states[:, :-1].copy(), lt, flags, int(nref), int(pos),
                         noise_x=states[:, -1].copy())


def simulate_ball(model: CoefficientModel, cfg: SimConfig, stream: RngStream | None = None) -> ReflectedPath:
    """Reflected process in the unit ball driven by the last d rows of ``sigma_inf``.

    ``cfg.z0`` is the start ``y0``; the returned states are ``y`` only.
    """
    path = _cylinder_run(model, cfg, stream, 0.0, cfg.z0)
    return ReflectedPath(path.times, path.states[:, 1:].copy(), path.local_time, path.reflected,
                         path.n_reflections, path.stream_position)


def simulate_cylinder(model: CoefficientModel, cfg: SimConfig, stream: RngStream | None = None) -> ReflectedPath:
    """Limit process on ``R x B^d``: ``X = row_0(sigma_inf) W + s0 L``.

    ``cfg.z0`` is ``(X0, y0)``. Only ``sigma_inf``, ``s0`` and ``phi_inf`` are used.
    """
    z0 = np.asarray(cfg.z0, dtype=float).reshape(-1)
    return _cylinder_run(model, cfg, stream, float(z0[0]), z0[1:])


def simulate_toy(c_prime: float, beta: float, cfg: SimConfig, stream: RngStream | None = None) -> ToyPath:
    """``dX = c' X^-beta dt + dW``; the drift reads ``max(X, x_floor)``."""
    x0 = float(np.asarray(cfg.z0, dtype=float).reshape(-1)[0])
    if not x0 > 0:
        raise NonPositiveStart(f"toy start must be positive, got {x0}")
    stream = RngStream(cfg.seed, 0) if stream is None else stream
    k0, k1 = _stream_key(stream)
    xs, steps, pos = toy_path_kernel(float(c_prime), float(beta), cfg.x_floor, x0, cfg.n_steps, cfg.stride,
                                     cfg.dt, cfg.noise_scale, k0, k1, stream.counter)
    stream.counter = int(pos)
    return ToyPath(steps * cfg.dt, xs, int(pos))


def toy_diagnostics(path: ToyPath, c_prime: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoidal ``A_t = int X^(beta-1)`` and ``[M]_t = int X^(2 beta)`` along the path grid."""
    x = np.asarray(path.x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("toy diagnostics need a positive path")
    t = np.asarray(path.times, dtype=float)
    dt = np.diff(t)
    fa = x ** (beta - 1.0)
    fm = x ** (2.0 * beta)
    a = np.concatenate(([0.0], np.cumsum(0.5 * dt * (fa[1:] + fa[:-1]))))
    q = np.concatenate(([0.0], np.cumsum(0.5 * dt * (fm[1:] + fm[:-1]))))
    return a, q


def toy_strong_constant(c_prime: float, beta: float) -> float:
    return (c_prime * (1.0 + beta)) ** (1.0 / (1.0 + beta))


def toy_ode_solution(x0: float, c_prime: float, beta: float, t):
    return (x0 ** (1 + beta) + c_prime * (1 + beta) * np.asarray(t, dtype=float)) ** (1 / (1 + beta))


@dataclass
class WindowedPath:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    anchor: float
    scale: float


def rescaled_window(path: ReflectedPath, T: float, b: BoundaryFunction, s_max: float = 1.0,
                    n_grid: int = 101) -> WindowedPath:
    """``((X_{T+b(X_T)^2 t} - X_T)/b(X_T), Y_{T+b(X_T)^2 t}/b(X_T))`` on a uniform window grid."""
    times = np.asarray(path.times, dtype=float)
    if T < times[0] or T > times[-1]:
        raise WindowExceedsHorizon(f"T={T} outside the recorded range")
    cols = [np.interp(T, times, path.states[:, j]) for j in range(path.states.shape[1])]
    x_t = cols[0]
    scale = boundary_eval(b, x_t)[0]
    end = T + scale * scale * s_max
    if end > times[-1] * (1 + 1e-12):
        raise WindowExceedsHorizon(f"window reaches t={end} beyond horizon {times[-1]}")
    grid = np.linspace(0.0, s_max, n_grid)
    real = np.minimum(T + scale * scale * grid, times[-1])
    x = (np.interp(real, times, path.states[:, 0]) - x_t) / scale
    y = np.column_stack([np.interp(real, times, path.states[:, j]) for j in range(1, path.states.shape[1])])
    return WindowedPath(grid, x, y / scale, float(x_t), float(scale))


def default_s4(cap: float = 10.0) -> Callable[[float], float]:
    return lambda t: min(max(1.0, math.log1p(t)), cap)


def window_schedule(T1: float, C: float, s4: Callable[[float], float] | None, n: int, beta: float = 0.0) -> np.ndarray:
    """``T_{k+1} = T_k + C^2 T_k^(2 beta/(1+beta)) s4(T_k)``."""
    if T1 < 1:
        raise ValueError("T1 must be >= 1")
    s4 = default_s4() if s4 is None else s4
    out = np.empty(n)
    t = float(T1)
    for k in range(n):
        out[k] = t
        t = t + C * C * t ** (2 * beta / (1 + beta)) * s4(t)
    return out


# ---------------------------------------------------------------------------
# Ensembles: per-path terminal records at shared recording times


@dataclass
class EnsembleRecords:
    """Per-path records at ``times``: ``states[i, k]``, ``local_time[i, k]``.

    ``positions[i]`` is the stream position after the last record, which
    lets a path be continued bit-exactly.
    """

    indices: np.ndarray
    times: np.ndarray
    states: np.ndarray
    local_time: np.ndarray
    n_reflections: np.ndarray
    positions: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.indices.shape[0]

    def at(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[k], t, rel_tol=1e-9, abs_tol=1e-12):
            raise KeyError(f"no record at t={t}")
        return k

    @classmethod
    def concat(cls, parts: list["EnsembleRecords"]) -> "EnsembleRecords":
        parts = sorted(parts, key=lambda p: int(p.indices[0]) if p.n_paths else -1)
        extra = {k: np.concatenate([p.extra[k] for p in parts]) for k in parts[0].extra}
        return cls(np.concatenate([p.indices for p in parts]), parts[0].times,
                   np.concatenate([p.states for p in parts]),
                   np.concatenate([p.local_time for p in parts]),
                   np.concatenate([p.n_reflections for p in parts]),
                   np.concatenate([p.positions for p in parts]), extra)


def _record_steps(times, dt) -> np.ndarray:
    steps = np.rint(np.asarray(times, dtype=float) / dt).astype(np.int64)
    if np.any(steps < 1) or np.any(np.diff(steps) <= 0):
        raise ValueError("record times must be positive and strictly increasing")
    return steps


def _check_batch(status, fail_step, indices, dt, time_offset=0.0):
    bad = np.nonzero(status != OK)[0]
    if bad.size:
        i = int(bad[0])
        _raise_status(int(status[i]), f"on path {int(indices[i])}", path_index=int(indices[i]),
                      time=time_offset + float(fail_step[i]) * dt)


def sder_ensemble(model: CoefficientModel, z0, dt: float, times, seed: int, indices,
                  noise_scale: float = 1.0, max_substeps: int = DEFAULT_MAX_SUBSTEPS,
                  positions=None, boundary_correction: bool = False) -> EnsembleRecords:
    """Run paths ``indices`` (stream ``(seed, i)``) from ``z0`` and record them at ``times``.

    ``z0`` is one point or one point per path; ``positions`` resumes the
    streams at given counters (default 0).
    """
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.shape[0]
    m = 1 + model.d
    z0s = np.ascontiguousarray(np.broadcast_to(np.asarray(z0, dtype=float), (n, m)))
    pos0 = np.zeros(n, dtype=np.int64) if positions is None else np.asarray(positions, dtype=np.int64)
    steps = _record_steps(times, dt)
    rec = np.ascontiguousarray(np.broadcast_to(steps, (n, steps.shape[0])))
    pk = model.pack()
    out_z = np.full((n, steps.shape[0], m), np.nan)
    out_l = np.full((n, steps.shape[0]), np.nan)
    out_nref = np.zeros((n, steps.shape[0]), dtype=np.int64)
    out_pos = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)
    fail = np.zeros(n, dtype=np.int64)
    sder_batch_kernel(pk.ip, pk.fp, pk.sig_inf, pk.sig_sqrt, pk.direction, z0s, pos0, np.uint64(seed), indices,
                      rec, math.sqrt(dt), noise_scale, max_substeps,
                      continuity_shift(dt, noise_scale, boundary_correction), radial_noise_bound(model),
                      _workspace(m), out_z, out_l, out_nref,
                      out_pos, status, fail)
    _check_batch(status, fail, indices, dt)
    return EnsembleRecords(indices, steps * dt, out_z, out_l, out_nref, out_pos)


def sder_continue(model: CoefficientModel, states, positions, dt: float, durations, seed: int, indices,
                  noise_scale: float = 1.0, max_substeps: int = DEFAULT_MAX_SUBSTEPS,
                  boundary_correction: bool = False) -> EnsembleRecords:
    """Continue each path for its own duration, resuming its stream; one record per path."""
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.shape[0]
    m = 1 + model.d
    steps = np.maximum(np.rint(np.asarray(durations, dtype=float) / dt).astype(np.int64), 1).reshape(n, 1)
    pk = model.pack()
    out_z = np.full((n, 1, m), np.nan)
    out_l = np.full((n, 1), np.nan)
    out_nref = np.zeros((n, 1), dtype=np.int64)
    out_pos = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)
    fail = np.zeros(n, dtype=np.int64)
    sder_batch_kernel(pk.ip, pk.fp, pk.sig_inf, pk.sig_sqrt, pk.direction,
                      np.ascontiguousarray(states, dtype=float), np.asarray(positions, dtype=np.int64),
                      np.uint64(seed), indices, np.ascontiguousarray(steps), math.sqrt(dt), noise_scale,
                      max_substeps, continuity_shift(dt, noise_scale, boundary_correction),
                      radial_noise_bound(model), _workspace(m),
                      out_z, out_l, out_nref, out_pos, status, fail)
    _check_batch(status, fail, indices, dt)
    rec = EnsembleRecords(indices, np.array([np.nan]), out_z, out_l, out_nref, out_pos)
    rec.extra["duration"] = steps[:, 0] * dt
    return rec


def cylinder_ensemble(model: CoefficientModel, y0, dt: float, times, seed: int, indices,
                      x0: float = 0.0, noise_scale: float = 1.0,
                      max_substeps: int = DEFAULT_MAX_SUBSTEPS, boundary_correction: bool = False) -> EnsembleRecords:
    """Cylinder-limit paths; ``states[i, k] = (X, Y)`` and ``extra['noise_x']`` the row-0 noise."""
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.shape[0]
    d = model.d
    y0s = np.broadcast_to(np.asarray(y0, dtype=float), (n, d))
    st0 = np.ascontiguousarray(np.column_stack([np.full(n, x0), y0s, np.zeros(n)]))
    steps = _record_steps(times, dt)
    rec = np.ascontiguousarray(np.broadcast_to(steps, (n, steps.shape[0])))
    pk = model.pack()
    out = np.full((n, steps.shape[0], d + 2), np.nan)
    out_l = np.full((n, steps.shape[0]), np.nan)
    out_pos = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)
    fail = np.zeros(n, dtype=np.int64)
    cylinder_batch_kernel(pk.sig_sqrt, model.s0, model.c0, model.reflection.swirl, st0,
                          np.zeros(n, dtype=np.int64), np.uint64(seed), indices, rec, math.sqrt(dt),
                          noise_scale, max_substeps, continuity_shift(dt, noise_scale, boundary_correction),
                          radial_noise_bound(model), _ball_workspace(d),
                          out, out_l, out_pos, status, fail)
    _check_batch(status, fail, indices, dt)
    res = EnsembleRecords(indices, steps * dt, out[:, :, :-1].copy(), out_l,
                          np.zeros((n, steps.shape[0]), dtype=np.int64), out_pos)
    res.extra["noise_x"] = out[:, :, -1].copy()
    return res


def toy_ensemble(c_prime: float, beta: float, x0: float, dt: float, times, seed: int, indices,
                 noise_scale: float = 1.0, x_floor: float = 1e-3) -> EnsembleRecords:
    """Toy paths recorded at ``times``; ``states[i, k, 0] = X``, ``extra`` holds ``A`` and ``[M]``."""
    if not x0 > 0:
        raise NonPositiveStart(f"toy start must be positive, got {x0}")
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.shape[0]
    steps = _record_steps(times, dt)
    out_x = np.empty((n, steps.shape[0]))
    out_a = np.empty((n, steps.shape[0]))
    out_m = np.empty((n, steps.shape[0]))
    out_pos = np.zeros(n, dtype=np.int64)
    toy_batch_kernel(float(c_prime), float(beta), x_floor, np.full(n, float(x0)), np.uint64(seed), indices,
                     steps, dt, noise_scale, out_x, out_a, out_m, out_pos)
    res = EnsembleRecords(indices, steps * dt, out_x[:, :, None], np.zeros_like(out_x),
                          np.zeros(out_x.shape, dtype=np.int64), out_pos)
    res.extra["A"] = out_a
    res.extra["M"] = out_m
    return res


def ball_moments(model: CoefficientModel, y0, dt: float, n_steps: int, seed: int, stream_index: int = 0,
                 burn_in: float = 0.1, n_batches: int = 50, noise_scale: float = 1.0,
                 max_substeps: int = DEFAULT_MAX_SUBSTEPS,
                 boundary_correction: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-batch time averages of ``y`` and ``y y^T`` along one long ball run."""
    d = model.d
    y0 = np.asarray(y0, dtype=float).reshape(d)
    burn = int(round(burn_in * n_steps))
    pk = model.pack()
    ws = _ball_workspace(d)
    first, second, status = cylinder_moments_kernel(pk.sig_sqrt, model.s0, model.c0, model.reflection.swirl, y0,
                                                    n_steps, burn, n_batches, math.sqrt(dt), noise_scale,
                                                    max_substeps, continuity_shift(dt, noise_scale, boundary_correction),
                                                    radial_noise_bound(model), np.uint64(seed), np.uint64(stream_index), ws)
    _raise_status(status, "in the ball run", path_index=stream_index)
    return first, second
