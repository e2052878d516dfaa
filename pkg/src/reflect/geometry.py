"""Boundary profiles, the parabolic domain, normals and window maps.

The domain is ``{(x, y) : x >= x_guard, |y| <= b(x)}`` with ``b`` one of four
radially symmetric profile families. Everything here is immutable; the
numba kernels in :mod:`reflect.engine` use :func:`b_eval` through the integer
``code`` and parameter vector of a :class:`BoundaryFunction`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit

from .errors import DegenerateRadialDirection, NonPositiveX, NotOnBoundary, ReflectError

PURE_POWER, SHIFTED_POWER, CYLINDER, POWER_PLUS_DECAY = 0, 1, 2, 3


class BoundaryKind(str, Enum):
    PURE_POWER = "pure_power"
    SHIFTED_POWER = "shifted_power"
    CYLINDER = "cylinder"
    POWER_PLUS_DECAY = "power_plus_decay"


_CODES = {
    BoundaryKind.PURE_POWER: PURE_POWER,
    BoundaryKind.SHIFTED_POWER: SHIFTED_POWER,
    BoundaryKind.CYLINDER: CYLINDER,
    BoundaryKind.POWER_PLUS_DECAY: POWER_PLUS_DECAY,
}


@njit(cache=True)
def _power_profile(code, beta, a, amp, e, x):
    # kept out of line so the constant-profile branch never pays for pow
    if code == SHIFTED_POWER:
        u = x + 1.0
    else:
        u = x
    p = a * u ** beta
    v, d1, d2 = p, beta * p / u, beta * (beta - 1.0) * p / (u * u)
    if code == POWER_PLUS_DECAY:
        q = amp * x ** e
        v += q
        d1 += e * q / x
        d2 += e * (e - 1.0) * q / (x * x)
    return v, d1, d2


@njit(cache=True, inline="always")
def b_eval(code, params, x):
    """``(b(x), b'(x), b''(x))`` for profile ``code``; params = (beta, a_inf, amp, exp)."""
    if code == CYLINDER:
        return params[1], 0.0, 0.0
    return _power_profile(code, params[0], params[1], params[2], params[3], x)


def tol_boundary(bx: float) -> float:
    return 1e-12 * max(1.0, bx)


@dataclass(frozen=True)
class BoundaryFunction:
    """Profile ``b(x) = a_inf x^beta + f(x)`` of the domain cross-section.

    ``PowerPlusDecay`` adds ``f(x) = decay_amp * x**decay_exp``; ``ShiftedPower``
    is ``a_inf (x + 1)^beta``; ``Cylinder`` is the constant ``a_inf``.
    """

    kind: BoundaryKind
    beta: float
    a_inf: float = 1.0
    decay_amp: float = 0.0
    decay_exp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", BoundaryKind(self.kind))
        if not self.a_inf > 0:
            raise ValueError("a_inf must be positive")
        if not -1.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (-1,1)")
        if self.kind is BoundaryKind.CYLINDER and self.beta != 0.0:
            raise ValueError("a cylinder profile has beta = 0")

    @classmethod
    def pure_power(cls, beta, a_inf=1.0):
        return cls(BoundaryKind.PURE_POWER, beta, a_inf)

    @classmethod
    def shifted_power(cls, beta, a_inf=1.0):
        return cls(BoundaryKind.SHIFTED_POWER, beta, a_inf)

    @classmethod
    def cylinder(cls, a_inf=1.0):
        return cls(BoundaryKind.CYLINDER, 0.0, a_inf)

    @classmethod
    def power_plus_decay(cls, beta, a_inf=1.0, amplitude=1.0, exponent=0.0):
        return cls(BoundaryKind.POWER_PLUS_DECAY, beta, a_inf, amplitude, exponent)

    @classmethod
    def from_config(cls, block: dict) -> "BoundaryFunction":
        kind = BoundaryKind(block["kind"])
        beta = float(block.get("beta", 0.0))
        if not -1.0 < beta < 1.0:
            raise ValueError("beta must lie in (-1,1)")
        return cls(kind, beta, float(block.get("a_inf", 1.0)),
                   float(block.get("amplitude", 0.0)), float(block.get("exponent", 0.0)))

    def to_config(self) -> dict:
        out = {"kind": self.kind.value, "beta": self.beta, "a_inf": self.a_inf}
        if self.kind is BoundaryKind.POWER_PLUS_DECAY:
            out.update(amplitude=self.decay_amp, exponent=self.decay_exp)
        return out

    @property
    def code(self) -> int:
        return _CODES[self.kind]

    @property
    def params(self) -> np.ndarray:
        return np.array([self.beta, self.a_inf, self.decay_amp, self.decay_exp])

    def evaluate(self, x: float) -> tuple[float, float, float]:
        return boundary_eval(self, x)

    def __call__(self, x):
        return boundary_eval(self, x)[0]

    def perturbation(self, x: float) -> tuple[float, float, float]:
        """``f = b - a_inf x^beta`` and its first two derivatives."""
        v, d1, d2 = boundary_eval(self, x)
        p = self.a_inf * x ** self.beta
        return (v - p, d1 - self.beta * p / x, d2 - self.beta * (self.beta - 1.0) * p / (x * x))


def boundary_eval(b: BoundaryFunction, x: float) -> tuple[float, float, float]:
    """Value, first and second derivative of the profile at ``x > 0``."""
    if not x > 0:
        raise NonPositiveX(f"boundary profile evaluated at non-positive x={x}")
    v, d1, d2 = b_eval(b.code, b.params, float(x))
    return float(v), float(d1), float(d2)


def _decays(values: np.ndarray, atol: float = 1e-13) -> bool:
    """True when a tail sequence shrinks monotonically (or is identically ~0)."""
    values = np.abs(np.asarray(values, dtype=float))
    if np.all(values <= atol):
        return True
    if np.any(np.diff(values) > 1e-9 * values[:-1] + atol):
        return False
    return bool(values[-1] <= 0.5 * values[0])


def d2_plus_rates(b: BoundaryFunction, xs=None) -> dict[str, np.ndarray]:
    """Perturbation ``f, f', f''`` scaled by the inverse of their allowed rates."""
    xs = np.logspace(2, 6, 17) if xs is None else np.asarray(xs, dtype=float)
    beta = b.beta
    f = np.array([b.perturbation(x) for x in xs])
    return {
        "x": xs,
        "f": xs ** ((1 - 3 * beta) / 2) * f[:, 0],
        "f1": xs ** ((3 - 3 * beta) / 2) * f[:, 1],
        "f2": xs ** ((5 - 3 * beta) / 2) * f[:, 2],
    }


def check_d2_plus(b: BoundaryFunction, xs=None) -> tuple[bool, str]:
    rates = d2_plus_rates(b, xs)
    bad = [k for k in ("f", "f1", "f2") if not _decays(rates[k])]
    if bad:
        return False, "perturbation rates not decaying: " + ", ".join(bad)
    return True, "f, f', f'' decay faster than the required powers"


def check_d1(b: BoundaryFunction) -> tuple[bool, str]:
    """Numerical look at the behaviour near the origin (b(0)=0, b b' and b''/b'^3)."""
    xs = np.logspace(-4, -10, 7)
    vals = np.array([b_eval(b.code, b.params, x) for x in xs])
    v, d1, d2 = vals[:, 0], vals[:, 1], vals[:, 2]
    if not (np.all(np.isfinite(vals)) and v[-1] < 1e-3 and np.all(np.diff(v) <= 0)):
        return False, "b does not vanish at the origin"
    bb = v * d1
    if not np.min(bb) > 1e-8:
        return False, "liminf b b' at 0 is not positive"
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d2 / d1 ** 3
    if not (np.all(np.isfinite(ratio[-2:])) and abs(ratio[-1] - ratio[-2]) <= 1e-3 * max(1.0, abs(ratio[-1]))
            and ratio[-1] <= 1e-9):
        return False, "b''/b'^3 has no limit in (-inf, 0]"
    return True, "cusp conditions at the origin hold"


@dataclass(frozen=True)
class ParabolicDomain:
    boundary: BoundaryFunction
    dim_y: int = 1
    x_guard: float = 0.5

    def __post_init__(self):
        if self.dim_y < 1:
            raise ValueError("dim_y must be a positive integer")
        if not self.x_guard > 0:
            raise ValueError("x_guard must be positive")

    def b(self, x: float) -> float:
        return boundary_eval(self.boundary, x)[0]

    def split(self, z) -> tuple[float, np.ndarray]:
        z = np.asarray(z, dtype=float)
        if z.shape != (1 + self.dim_y,):
            raise ValueError(f"expected a point in R^{1 + self.dim_y}, got shape {z.shape}")
        return float(z[0]), z[1:]

    def on_boundary(self, z, tol=None) -> bool:
        x, y = self.split(z)
        if x < self.x_guard:
            return False
        bx = self.b(x)
        tol = 1e-9 * max(1.0, bx) if tol is None else tol
        return abs(np.linalg.norm(y) - bx) <= tol


def contains(dom: ParabolicDomain, z) -> bool:
    x, y = dom.split(z)
    if x < dom.x_guard:
        return False
    bx = dom.b(x)
    return bool(np.linalg.norm(y) <= bx + tol_boundary(bx))


def radial_boundary_point(dom: ParabolicDomain, z) -> np.ndarray:
    """Same-``x`` radial projection ``(x, b(x) y/|y|)`` onto the boundary."""
    x, y = dom.split(z)
    r = np.linalg.norm(y)
    if r == 0:
        raise DegenerateRadialDirection("radial direction undefined at |y| = 0")
    return np.concatenate(([x], dom.b(x) * y / r))


def inward_normal(dom: ParabolicDomain, z, tol=None) -> np.ndarray:
    x, y = dom.split(z)
    if not dom.on_boundary(z, tol):
        raise NotOnBoundary(f"point {np.asarray(z).tolist()} is not on the boundary")
    bx, d1, _ = boundary_eval(dom.boundary, x)
    u = y / np.linalg.norm(y)
    n = np.concatenate(([d1], -u)) / math.sqrt(1.0 + d1 * d1)
    probe = np.asarray(z, dtype=float) + 1e-6 * bx * n
    # the guard line is an artificial cut, so only the lateral surface is probed
    pb = boundary_eval(dom.boundary, probe[0])[0]
    if not np.linalg.norm(probe[1:]) <= pb + tol_boundary(pb):
        raise ReflectError("computed normal does not point into the domain")
    return n


@dataclass(frozen=True)
class WindowMap:
    """Affine map ``(x, y) -> ((x - x0)/b(x0), y/b(x0))`` with time factor ``b(x0)^2``."""

    x0: float
    scale: float

    @property
    def time_scale(self) -> float:
        return self.scale * self.scale

    def forward(self, z):
        z = np.asarray(z, dtype=float)
        w = z / self.scale
        w[..., 0] = (z[..., 0] - self.x0) / self.scale
        return w

    def inverse(self, w):
        w = np.asarray(w, dtype=float)
        z = w * self.scale
        z[..., 0] = w[..., 0] * self.scale + self.x0
        return z


def window_map(x0: float, b: BoundaryFunction) -> WindowMap:
    scale = boundary_eval(b, x0)[0]
    if not scale > 0:
        raise ValueError("window scale b(x0) must be positive")
    return WindowMap(float(x0), scale)
