"""Diffusion and reflection coefficient fields and the closed-form limit constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import BetaOutOfRange, NotOnBoundary, NotPositiveDefinite
from .geometry import (
    BoundaryFunction,
    ParabolicDomain,
    _decays,
    b_eval,
    boundary_eval,
    check_d1,
    check_d2_plus,
    inward_normal,
)
from .linalg import EIG_FLOOR, sqrtm_spd, sqrtm_spd_kernel, symmetric_eigh

DEFAULT_MARGIN = 0.1

# layout of the packed float parameter vector handed to the kernels
FP_BETA, FP_A, FP_BAMP, FP_BEXP, FP_XG = 0, 1, 2, 3, 4
FP_S0, FP_C0, FP_SWIRL, FP_RAMP, FP_REXP, FP_DAMP, FP_DEXP = 5, 6, 7, 8, 9, 10, 11
IP_BCODE, IP_D, IP_DKIND, IP_RKIND = 0, 1, 2, 3


class DiffusionKind(str, Enum):
    CONSTANT = "constant"
    ASYMPTOTIC = "asymptotic"


class ReflectionKind(str, Enum):
    NORMAL = "normal"
    OBLIQUE = "oblique"


@dataclass(frozen=True, eq=False)
class DiffusionField:
    """``Sigma(x, y) = Sigma_inf + amplitude * x**(-exponent) * direction``.

    ``exponent=None`` defers to the owning model, which picks the decay
    threshold of the boundary exponent plus a margin.
    """

    sigma_inf: np.ndarray
    kind: DiffusionKind = DiffusionKind.CONSTANT
    amplitude: float = 0.0
    exponent: float | None = None
    direction: np.ndarray | None = None

    def __post_init__(self):
        s = np.array(self.sigma_inf, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 2:
            raise ValueError("sigma_inf must be a (1+d)x(1+d) matrix with d >= 1")
        if not np.allclose(s, s.T, rtol=0, atol=1e-12 * max(1.0, np.abs(s).max())):
            raise ValueError("sigma_inf must be symmetric")
        s = 0.5 * (s + s.T)
        s.setflags(write=False)
        object.__setattr__(self, "sigma_inf", s)
        object.__setattr__(self, "kind", DiffusionKind(self.kind))
        p = np.eye(s.shape[0]) if self.direction is None else np.array(self.direction, dtype=float)
        if p.shape != s.shape or not np.allclose(p, p.T):
            raise ValueError("direction must be a symmetric matrix shaped like sigma_inf")
        p.setflags(write=False)
        object.__setattr__(self, "direction", p)

    @classmethod
    def identity(cls, d: int = 1) -> "DiffusionField":
        return cls(np.eye(1 + d))

    @property
    def dim(self) -> int:
        return self.sigma_inf.shape[0]

    @property
    def sigma_bar_sq(self) -> float:
        return float(np.trace(self.sigma_inf) - self.sigma_inf[0, 0])

    @property
    def sqrt_sigma_inf(self) -> np.ndarray:
        return sqrtm_spd(self.sigma_inf)

    def min_eigenvalue(self) -> float:
        return float(symmetric_eigh(self.sigma_inf)[0].min())

    def to_config(self) -> dict:
        out = {"kind": self.kind.value, "sigma_inf": self.sigma_inf.tolist()}
        if self.kind is DiffusionKind.ASYMPTOTIC:
            out.update(amplitude=self.amplitude, exponent=self.exponent,
                       direction=self.direction.tolist())
        return out


@dataclass(frozen=True)
class ReflectionField:
    """``phi(x, b(x) u) = (s0 + amplitude x^-exponent, -c0 u + swirl J u)``.

    ``J`` rotates the first two y-coordinates by a right angle, so the swirl
    term is tangential and leaves ``<phi_inf(u), -u> = c0`` intact.
    """

    s0: float = 1.0
    c0: float = 1.0
    kind: ReflectionKind = ReflectionKind.NORMAL
    swirl: float = 0.0
    amplitude: float = 0.0
    exponent: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ReflectionKind(self.kind))
        if self.kind is ReflectionKind.NORMAL and self.swirl != 0.0:
            raise ValueError("normal reflection has no tangential swirl")

    def phi_inf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = -self.c0 * u
        if self.swirl != 0.0:
            out[0] -= self.swirl * u[1]
            out[1] += self.swirl * u[0]
        return out

    def to_config(self) -> dict:
        out = {"kind": self.kind.value, "s0": self.s0, "c0": self.c0}
        if self.swirl:
            out["swirl"] = self.swirl
        if self.amplitude:
            out.update(amplitude=self.amplitude, exponent=self.exponent)
        return out


class Packed(NamedTuple):
    ip: np.ndarray
    fp: np.ndarray
    sig_inf: np.ndarray
    sig_sqrt: np.ndarray
    direction: np.ndarray


@njit(cache=True, inline="always")
def sigma_kernel(ip, fp, sig_inf, direction, x, out):
    """``Sigma`` at horizontal position ``x`` (the fields do not depend on y)."""
    m = sig_inf.shape[0]
    if ip[IP_DKIND] == 0:
        for i in range(m):
            for j in range(m):
                out[i, j] = sig_inf[i, j]
        return
    env = fp[FP_DAMP] * x ** (-fp[FP_DEXP])
    for i in range(m):
        for j in range(m):
            out[i, j] = sig_inf[i, j] + env * direction[i, j]


@njit(cache=True, inline="always")
def phi_kernel(ip, fp, x, u, out):
    """Reflection vector at the boundary point with abscissa ``x`` and direction ``u``."""
    d = u.shape[0]
    s0 = fp[FP_S0]
    if fp[FP_RAMP] != 0.0:
        s0 += fp[FP_RAMP] * x ** (-fp[FP_REXP])
    out[0] = s0
    c0 = fp[FP_C0]
    for i in range(d):
        out[1 + i] = -c0 * u[i]
    sw = fp[FP_SWIRL]
    if sw != 0.0 and d >= 2:
        out[1] -= sw * u[1]
        out[2] += sw * u[0]


@dataclass(frozen=True, eq=False)
class CoefficientModel:
    domain: ParabolicDomain
    diffusion: DiffusionField
    reflection: ReflectionField
    margin: float = DEFAULT_MARGIN
    _packed: Packed | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.diffusion.dim != 1 + self.domain.dim_y:
            raise ValueError(
                f"diffusion matrix is {self.diffusion.dim}x{self.diffusion.dim} but the domain has d={self.domain.dim_y}")
        if self.reflection.swirl != 0.0 and self.d < 2:
            raise ValueError("tangential swirl needs d >= 2")

    @property
    def d(self) -> int:
        return self.domain.dim_y

    @property
    def beta(self) -> float:
        return self.domain.boundary.beta

    @property
    def a_inf(self) -> float:
        return self.domain.boundary.a_inf

    @property
    def s0(self) -> float:
        return self.reflection.s0

    @property
    def c0(self) -> float:
        return self.reflection.c0

    @property
    def sigma_inf(self) -> np.ndarray:
        return self.diffusion.sigma_inf

    @property
    def sigma_bar_sq(self) -> float:
        return self.diffusion.sigma_bar_sq

    def default_exponent(self) -> float:
        return (1.0 - self.beta) / 2.0 + self.margin

    @property
    def diffusion_exponent(self) -> float:
        e = self.diffusion.exponent
        return self.default_exponent() if e is None else float(e)

    @property
    def reflection_exponent(self) -> float:
        e = self.reflection.exponent
        return self.default_exponent() if e is None else float(e)

    def pack(self) -> Packed:
        if self._packed is not None:
            return self._packed
        b = self.domain.boundary
        dkind = 0 if self.diffusion.kind is DiffusionKind.CONSTANT else 1
        rkind = 0 if self.reflection.kind is ReflectionKind.NORMAL else 1
        ip = np.array([b.code, self.d, dkind, rkind], dtype=np.int64)
        fp = np.array([
            b.beta, b.a_inf, b.decay_amp, b.decay_exp, self.domain.x_guard,
            self.s0, self.c0, self.reflection.swirl, self.reflection.amplitude,
            self.reflection_exponent, self.diffusion.amplitude, self.diffusion_exponent,
        ])
        m = self.diffusion.dim
        sig_sqrt = np.eye(m)
        if sqrtm_spd_kernel(np.ascontiguousarray(self.sigma_inf), sig_sqrt) is False and dkind == 0:
            sig_sqrt = np.full((m, m), np.nan)
        packed = Packed(ip, fp, np.ascontiguousarray(self.sigma_inf), sig_sqrt,
                        np.ascontiguousarray(self.diffusion.direction))
        object.__setattr__(self, "_packed", packed)
        return packed

    def with_boundary(self, boundary: BoundaryFunction) -> "CoefficientModel":
        dom = ParabolicDomain(boundary, self.domain.dim_y, self.domain.x_guard)
        return CoefficientModel(dom, self.diffusion, self.reflection, self.margin)

    def to_config(self) -> dict:
        return {
            "boundary": self.domain.boundary.to_config(),
            "dim_y": self.d,
            "x_guard": self.domain.x_guard,
            "diffusion": self.diffusion.to_config(),
            "reflection": self.reflection.to_config(),
        }

    @classmethod
    def from_config(cls, block: dict) -> "CoefficientModel":
        boundary = BoundaryFunction.from_config(block.get("boundary", {"kind": "cylinder"}))
        d = int(block.get("dim_y", 1))
        dom = ParabolicDomain(boundary, d, float(block.get("x_guard", 0.5)))
        dblock = block.get("diffusion", {"kind": "constant", "sigma_inf": "identity"})
        s = dblock.get("sigma_inf", "identity")
        s = np.eye(1 + d) if isinstance(s, str) and s == "identity" else np.array(s, dtype=float)
        diffusion = DiffusionField(s, DiffusionKind(dblock.get("kind", "constant")),
                                   float(dblock.get("amplitude", 0.0)), dblock.get("exponent"),
                                   dblock.get("direction"))
        rblock = block.get("reflection", {"kind": "normal"})
        reflection = ReflectionField(float(rblock.get("s0", 1.0)), float(rblock.get("c0", 1.0)),
                                     ReflectionKind(rblock.get("kind", "normal")),
                                     float(rblock.get("swirl", 0.0)),
                                     float(rblock.get("amplitude", 0.0)), rblock.get("exponent"))
        return cls(dom, diffusion, reflection)


def canonical_model(beta: float = 0.0, d: int = 1, a_inf: float = 1.0, s0: float = 1.0,
                    c0: float = 1.0, x_guard: float = 0.5) -> CoefficientModel:
    """Identity diffusion with normal y-reflection.

    The profile is a cylinder at beta = 0, ``a_inf x^beta`` for beta > 0 and
    ``a_inf (x+1)^beta`` for beta < 0.
    """
    if beta == 0.0:
        b = BoundaryFunction.cylinder(a_inf)
    elif beta > 0.0:
        b = BoundaryFunction.pure_power(beta, a_inf)
    else:
        b = BoundaryFunction.shifted_power(beta, a_inf)
    return CoefficientModel(ParabolicDomain(b, d, x_guard), DiffusionField.identity(d),
                            ReflectionField(s0, c0))


def sigma_eval(model: CoefficientModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Diffusion matrix at ``z`` and its symmetric square root."""
    x, _ = model.domain.split(z)
    pk = model.pack()
    m = model.diffusion.dim
    s = np.empty((m, m))
    sigma_kernel(pk.ip, pk.fp, pk.sig_inf, pk.direction, float(x), s)
    root = np.empty((m, m))
    if not sqrtm_spd_kernel(s, root):
        raise NotPositiveDefinite(f"diffusion matrix at x={x} has an eigenvalue below {EIG_FLOOR}")
    return s, root


def phi_eval(model: CoefficientModel, z, tol=None) -> np.ndarray:
    dom = model.domain
    if not dom.on_boundary(z, tol):
        raise NotOnBoundary(f"point {np.asarray(z).tolist()} is not on the boundary")
    x, y = dom.split(z)
    out = np.empty(1 + model.d)
    pk = model.pack()
    phi_kernel(pk.ip, pk.fp, float(x), y / np.linalg.norm(y), out)
    return out


def _phi_at(model: CoefficientModel, x: float, u: np.ndarray) -> np.ndarray:
    out = np.empty(1 + model.d)
    pk = model.pack()
    phi_kernel(pk.ip, pk.fp, float(x), np.asarray(u, dtype=float), out)
    return out


def _sigma_at(model: CoefficientModel, x: float) -> np.ndarray:
    pk = model.pack()
    out = np.empty((model.diffusion.dim,) * 2)
    sigma_kernel(pk.ip, pk.fp, pk.sig_inf, pk.direction, float(x), out)
    return out


def sphere_grid(d: int, n: int = 16) -> np.ndarray:
    """Deterministic unit vectors covering the sphere in R^d."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        th = 2 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(th), np.sin(th)])
    g = np.random.default_rng(12345).standard_normal((n * d, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass
class ValidationEntry:
    name: str
    passed: bool
    detail: str
    required: bool = True


@dataclass
class ValidationReport:
    entries: list[ValidationEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries if e.required)

    def __getitem__(self, name: str) -> ValidationEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def failures(self) -> list[str]:
        return [e.name for e in self.entries if e.required and not e.passed]

    def to_rows(self) -> list[dict]:
        return [{"assumption": e.name, "passed": e.passed, "required": e.required,
                 "detail": e.detail} for e in self.entries]


def validate_assumptions(model: CoefficientModel, grid: dict | None = None) -> ValidationReport:
    """Numerical checks of the boundary, diffusion and reflection assumptions."""
    grid = grid or {}
    xs = np.logspace(math.log10(grid.get("x_min", 1e2)), math.log10(grid.get("x_max", 1e6)),
                     int(grid.get("n_x", 17)))
    us = sphere_grid(model.d, int(grid.get("n_u", 16)))
    beta = model.beta
    dom = model.domain
    entries: list[ValidationEntry] = []

    ok, msg = check_d2_plus(dom.boundary, xs)
    entries.append(ValidationEntry("D2+", ok, msg))
    ok, msg = check_d1(dom.boundary)
    entries.append(ValidationEntry("D1", ok, msg, required=False))

    # (C+): ellipticity everywhere we can look, then convergence rates
    lam = model.diffusion.min_eigenvalue()
    near = np.concatenate((np.linspace(dom.x_guard, 10.0, 20), xs))
    lam_field = min(float(symmetric_eigh(_sigma_at(model, x))[0].min()) for x in near)
    ok = lam > EIG_FLOOR and lam_field > EIG_FLOOR
    entries.append(ValidationEntry("C+ ellipticity", ok,
                                   f"min eigenvalue {min(lam, lam_field):.3e}"))
    dev = np.array([np.abs(_sigma_at(model, x) - model.sigma_inf).max() for x in xs])
    tr = np.array([np.trace(_sigma_at(model, x)) - _sigma_at(model, x)[0, 0] for x in xs])
    rate = xs ** ((1 - beta) / 2) * (tr - model.sigma_bar_sq)
    ok = _decays(dev) and _decays(rate)
    entries.append(ValidationEntry("C+ convergence", ok,
                                   f"x^((1-beta)/2)|tr_y Sigma - sigma_bar^2| tail {abs(rate[-1]):.3e}"))

    ok = model.s0 > 0 and model.c0 > 0
    entries.append(ValidationEntry("V+ constants", ok, f"s0={model.s0}, c0={model.c0}"))
    worst = np.inf
    for x in near:
        bx = dom.b(x)
        for u in us:
            z = np.concatenate(([x], bx * u))
            worst = min(worst, float(np.dot(_phi_at(model, x, u), inward_normal(dom, z))))
    entries.append(ValidationEntry("V+ obliqueness", worst > 0, f"min <phi, n> = {worst:.4g}"))
    c0_err = max(abs(float(np.dot(model.reflection.phi_inf(u), -u)) - model.c0) for u in us)
    entries.append(ValidationEntry("V+ c0", c0_err < 1e-12 and model.c0 > 0,
                                   f"max |<phi_inf(u),-u> - c0| = {c0_err:.2e}"))
    limit = [np.concatenate(([model.s0], model.reflection.phi_inf(u))) for u in us]
    pdev = np.array([max(np.abs(_phi_at(model, x, u) - lim).max() for u, lim in zip(us, limit))
                     for x in xs])
    ok = _decays(xs ** ((1 - beta) / 2) * pdev)
    entries.append(ValidationEntry("V+ convergence", ok, "x^((1-beta)/2)|phi - (s0, phi_inf)| -> 0"))

    # (S): derivatives of sigma and, along the boundary at fixed angle, of phi
    eps = float(grid.get("s_eps", model.margin / 2))
    dsig = []
    dphi = []
    for x in xs:
        h = 1e-5 * x
        try:
            root_p = sqrtm_spd(_sigma_at(model, x + h))
            root_m = sqrtm_spd(_sigma_at(model, x - h))
            dsig.append(np.abs(root_p - root_m).max() / (2 * h))
        except NotPositiveDefinite:
            dsig.append(np.inf)
        worst_phi = 0.0
        for u in us:
            worst_phi = max(worst_phi,
                            np.abs(_phi_at(model, x + h, u) - _phi_at(model, x - h, u)).max() / (2 * h))
        dphi.append(worst_phi)
    w = xs ** (beta + eps)
    dsig = np.array(dsig)
    entries.append(ValidationEntry("S sigma", bool(np.all(np.isfinite(dsig))) and _decays(w * dsig, atol=1e-9),
                                   "x^(beta+eps)|d sigma| -> 0"))
    entries.append(ValidationEntry("S phi", _decays(w * np.array(dphi), atol=1e-9),
                                   "x^(beta+eps)|d phi along the boundary| -> 0"))
    return ValidationReport(entries)


def c1_constant(model: CoefficientModel) -> float:
    """Strong-law constant ``((1+beta) s0 sigma_bar^2 / (2 a_inf c0))^(1/(1+beta))``."""
    beta = model.beta
    base = (1 + beta) * model.s0 * model.sigma_bar_sq / (2 * model.a_inf * model.c0)
    return base ** (1.0 / (1.0 + beta))


@dataclass
class MuMoments:
    """First and second moments of the invariant law on the unit ball.

    ``first_se`` / ``second_se`` hold standard errors when simulated (zeros if exact).
    """

    first: np.ndarray
    second: np.ndarray
    first_se: np.ndarray | None = None
    second_se: np.ndarray | None = None
    n: int = 0
    exact: bool = False

    def __post_init__(self):
        self.first = np.atleast_1d(np.asarray(self.first, dtype=float))
        self.second = np.atleast_2d(np.asarray(self.second, dtype=float))
        d = self.first.shape[0]
        if self.second.shape != (d, d):
            raise ValueError("second moment matrix must be d x d")
        if self.first_se is None:
            self.first_se = np.zeros(d)
        if self.second_se is None:
            self.second_se = np.zeros((d, d))

    @classmethod
    def uniform_ball(cls, d: int) -> "MuMoments":
        return cls(np.zeros(d), np.eye(d) / (d + 2), exact=True)


def _moments(mu) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(mu, MuMoments):
        return mu.first, mu.second
    first, second = mu
    return np.atleast_1d(np.asarray(first, float)), np.atleast_2d(np.asarray(second, float))


def _quadratic_form(model: CoefficientModel, mu) -> float:
    first, second = _moments(mu)
    s = model.sigma_inf
    k = model.s0 / model.c0
    return float(s[0, 0] + 2 * k * np.dot(s[0, 1:], first) + k * k * np.sum(s[1:, 1:] * second))


def _require_clt_range(beta: float) -> None:
    if not beta > -1.0 / 3.0:
        raise BetaOutOfRange(f"beta={beta} outside (-1/3, 1)")


def upsilon_constant(model: CoefficientModel, mu_moments) -> float:
    """Asymptotic variance of ``(X_t - c1 t^(1/(1+beta)))/sqrt(t)``."""
    _require_clt_range(model.beta)
    beta = model.beta
    return (1 + beta) / (1 + 3 * beta) * _quadratic_form(model, mu_moments)


def q_polynomial(model: CoefficientModel, y_scaled) -> float:
    y = np.atleast_1d(np.asarray(y_scaled, dtype=float))
    s = model.sigma_inf
    k = model.s0 / (model.c0 * model.a_inf)
    return float(s[0, 0] + 2 * k * np.dot(s[0, 1:], y) + k * k * y @ s[1:, 1:] @ y)


def s_squared_constant(model: CoefficientModel, mu_moments) -> float:
    """Limit of ``T^(-1-2beta/(1+beta)) [M]_T`` for the Lyapunov martingale."""
    _require_clt_range(model.beta)
    beta = model.beta
    pref = (1 + beta) / (1 + 3 * beta) * model.a_inf ** 2 * c1_constant(model) ** (2 * beta)
    return pref * _quadratic_form(model, mu_moments)
