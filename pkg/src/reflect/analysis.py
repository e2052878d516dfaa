"""Estimators and deterministic checks that confront simulations with the limit theory."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .engine import (
    EnsembleRecords,
    ReflectedPath,
    cylinder_ensemble,
    sder_continue,
    sder_ensemble,
    toy_ensemble,
    toy_strong_constant,
)
from .errors import BetaOutOfRange, InsufficientSamples, WindowExceedsHorizon
from .geometry import boundary_eval
from .model import (
    CoefficientModel,
    MuMoments,
    _phi_at,
    _sigma_at,
    c1_constant,
    q_polynomial,
    upsilon_constant,
)

DEFAULT_BATCHES = 50
DEFAULT_BURN_IN = 0.1


@dataclass
class EstimateWithCI:
    value: float
    stderr: float
    n: int
    method: str = "iid"
    batches: int | None = None

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be non-negative")
        if self.method == "batch_means" and (self.batches is None or self.batches < 20):
            raise ValueError("batch means need at least 20 batches")

    def dof(self) -> int:
        return (self.batches if self.method == "batch_means" else self.n) - 1

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        q = stats.t.ppf(0.5 + level / 2, max(self.dof(), 1))
        return self.value - q * self.stderr, self.value + q * self.stderr

    def covers(self, truth: float, level: float = 0.95) -> bool:
        lo, hi = self.ci(level)
        return lo <= truth <= hi

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.value - target) <= k * self.stderr


def iid_mean(samples) -> EstimateWithCI:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientSamples("need at least two samples")
    return EstimateWithCI(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)), int(x.size))


def iid_variance(samples) -> EstimateWithCI:
    """Sample variance with the delta-method standard error ``sqrt((m4 - s^4)/n)``."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise InsufficientSamples("need at least four samples")
    c = x - x.mean()
    var = float(c @ c / (n - 1))
    m4 = float(np.mean(c ** 4))
    return EstimateWithCI(var, math.sqrt(max(m4 - var * var, 0.0) / n), int(n))


def batch_means(series, n_batches: int = DEFAULT_BATCHES, burn_in: float = DEFAULT_BURN_IN) -> EstimateWithCI:
    """Mean of a correlated series with a non-overlapping batch-means standard error."""
    x = np.asarray(series, dtype=float).ravel()
    x = x[int(round(burn_in * x.size)):]
    per = x.size // n_batches
    if per < 1:
        raise InsufficientSamples(f"{x.size} samples cannot fill {n_batches} batches")
    means = x[: per * n_batches].reshape(n_batches, per).mean(axis=1)
    return _from_batches(means, per * n_batches)


def _from_batches(means, n_total: int) -> EstimateWithCI:
    means = np.asarray(means, dtype=float)
    b = means.shape[0]
    return EstimateWithCI(float(means.mean()), float(means.std(ddof=1) / math.sqrt(b)), int(n_total),
                          "batch_means", b)


# ---------------------------------------------------------------------------
# invariant law of the ball process


@dataclass
class MomentEstimate:
    """Simulated moments of the ball process with their batch-means errors."""

    moments: MuMoments
    first: list[EstimateWithCI]
    second: list[list[EstimateWithCI]]

    @property
    def trace(self) -> EstimateWithCI:
        d = len(self.first)
        n = self.second[0][0].n
        b = self.second[0][0].batches
        batch_tr = self._batch_trace
        return _from_batches(batch_tr, n) if batch_tr is not None else EstimateWithCI(
            float(np.trace(self.moments.second)), float(np.sqrt(sum(self.second[i][i].stderr ** 2 for i in range(d)))),
            n, "batch_means", b)

    _batch_trace: np.ndarray | None = field(default=None, repr=False)


def moments_from_batches(first_batches, second_batches, n_total: int) -> MomentEstimate:
    """Assemble :class:`MuMoments` from per-batch averages of ``y`` and ``y y^T``."""
    fb = np.asarray(first_batches, dtype=float)
    sb = np.asarray(second_batches, dtype=float)
    d = fb.shape[1]
    first = [_from_batches(fb[:, i], n_total) for i in range(d)]
    second = [[_from_batches(sb[:, i, j], n_total) for j in range(d)] for i in range(d)]
    mean2 = sb.mean(axis=0)
    mean2 = 0.5 * (mean2 + mean2.T)
    mm = MuMoments(fb.mean(axis=0), mean2, np.array([e.stderr for e in first]),
                   np.array([[e.stderr for e in row] for row in second]), n=n_total)
    return MomentEstimate(mm, first, second, np.trace(sb, axis1=1, axis2=2))


def ergodic_moments(paths, burn_in: float = DEFAULT_BURN_IN, n_batches: int = DEFAULT_BATCHES,
                    min_samples: int = 100_000) -> MomentEstimate:
    """Time averages of ``y`` and ``y y^T`` over recorded ball paths (states are ``y``)."""
    if isinstance(paths, ReflectedPath):
        paths = [paths]
    fbs, sbs = [], []
    total = 0
    for p in paths:
        y = np.asarray(p.states, dtype=float)
        y = y[int(round(burn_in * y.shape[0])):]
        per = y.shape[0] // n_batches
        if per < 1:
            raise InsufficientSamples("path too short for batch means")
        y = y[: per * n_batches]
        total += y.shape[0]
        yb = y.reshape(n_batches, per, -1)
        fbs.append(yb.mean(axis=1))
        sbs.append(np.einsum("bki,bkj->bij", yb, yb) / per)
    if total < min_samples:
        raise InsufficientSamples(f"{total} post-burn-in samples, need {min_samples}")
    return moments_from_batches(np.mean(fbs, axis=0), np.mean(sbs, axis=0), total)


# ---------------------------------------------------------------------------
# limit theorems on ensembles


def centering(model: CoefficientModel, t, x0: float = 0.0):
    """``(x0^(1+beta) + c1^(1+beta) t)^(1/(1+beta))``: the strong-law curve started at ``x0``.

    It equals ``x0 + c1 t`` at beta = 0 and differs from ``c1 t^(1/(1+beta))``
    by ``o(sqrt(t))`` whenever beta > -1/3.
    """
    beta = model.beta
    c1 = c1_constant(model)
    return (x0 ** (1 + beta) + c1 ** (1 + beta) * np.asarray(t, dtype=float)) ** (1 / (1 + beta))


@dataclass
class CheckResult:
    name: str
    estimate: float
    stderr: float
    n: int
    target: float
    passed: bool
    params: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        self.estimate = float(self.estimate)
        self.stderr = float(self.stderr)
        self.target = float(self.target)
        self.n = int(self.n)
        self.passed = bool(self.passed)

    def row(self) -> dict:
        out = {"check": self.name, "estimate": self.estimate, "stderr": self.stderr, "n": self.n,
               "target": self.target, "passed": bool(self.passed)}
        out.update({f"param_{k}": v for k, v in self.params.items()})
        return out


def strong_law_check(records: EnsembleRecords, model: CoefficientModel, t: float | None = None,
                     tol: float = 0.05) -> CheckResult:
    """Mean of ``X_T / T^(1/(1+beta))`` against ``c1``."""
    k = -1 if t is None else records.at(t)
    T = float(records.times[k])
    if records.n_paths < 30:
        raise InsufficientSamples("strong-law check needs at least 30 paths")
    ratio = records.states[:, k, 0] / T ** (1 / (1 + model.beta))
    est = iid_mean(ratio)
    c1 = c1_constant(model)
    return CheckResult("strong_law", est.value, est.stderr, est.n, c1, abs(est.value - c1) <= tol * c1,
                       {"T": T, "beta": model.beta, "tol": tol})


@dataclass
class CltResult:
    samples: np.ndarray
    y_scaled: np.ndarray
    variance: EstimateWithCI
    mean: EstimateWithCI
    target: float
    ks_statistic: float
    ks_pvalue: float
    correlations: np.ndarray

    def checks(self, var_tol: float = 0.15, p_min: float = 0.01, corr_max: float = 0.1) -> list[CheckResult]:
        n = self.variance.n
        return [
            CheckResult("clt_variance", self.variance.value, self.variance.stderr, n, self.target,
                        abs(self.variance.value - self.target) <= var_tol * self.target, {"tol": var_tol}),
            CheckResult("clt_mean", self.mean.value, self.mean.stderr, n, 0.0, self.mean.within(0.0)),
            CheckResult("clt_ks_pvalue", self.ks_pvalue, 0.0, n, p_min, self.ks_pvalue > p_min),
            CheckResult("clt_independence", float(np.max(np.abs(self.correlations))), 0.0, n, corr_max,
                        bool(np.max(np.abs(self.correlations)) < corr_max)),
        ]


def clt_check(records: EnsembleRecords, model: CoefficientModel, mu_moments, t: float | None = None,
              x0: float | None = None) -> CltResult:
    """Normalized fluctuations ``(X_T - centering)/sqrt(T)`` against ``N(0, Upsilon)``."""
    if not model.beta > -1 / 3:
        raise BetaOutOfRange(f"beta={model.beta} outside (-1/3, 1)")
    k = -1 if t is None else records.at(t)
    T = float(records.times[k])
    if x0 is None:
        x0 = 0.0
    x = records.states[:, k, 0]
    s = (x - centering(model, T, x0)) / math.sqrt(T)
    ups = upsilon_constant(model, mu_moments)
    beta = model.beta
    y_scaled = records.states[:, k, 1:] / (model.a_inf * c1_constant(model) ** beta * T ** (beta / (1 + beta)))
    ks = stats.kstest(s, stats.norm(scale=math.sqrt(ups)).cdf)
    corr = np.array([stats.pearsonr(s, y_scaled[:, j])[0] for j in range(y_scaled.shape[1])]
                    + [stats.pearsonr(s, np.sum(y_scaled ** 2, axis=1))[0]])
    return CltResult(s, y_scaled, iid_variance(s), iid_mean(s), ups, float(ks.statistic), float(ks.pvalue), corr)


def independence_check(records: EnsembleRecords, model: CoefficientModel, t: float | None = None,
                       x0: float = 0.0, corr_max: float = 0.1) -> CheckResult:
    """Largest ``|corr|`` between the CLT fluctuation and ``Y_T/b(X_T)`` (components and squared norm)."""
    k = -1 if t is None else records.at(t)
    T = float(records.times[k])
    s = (records.states[:, k, 0] - centering(model, T, x0)) / math.sqrt(T)
    v = _y_over_b(records, model, k)
    feats = [v[:, j] for j in range(v.shape[1])] + [np.sum(v ** 2, axis=1)]
    corr = np.array([stats.pearsonr(s, f)[0] for f in feats])
    worst = float(np.max(np.abs(corr)))
    return CheckResult("independence_corr", worst, 1 / math.sqrt(s.shape[0]), s.shape[0], corr_max,
                       worst < corr_max, {"T": T}, {"correlations": corr.tolist()})


def uniform_ball_radial_cdf(d: int):
    return lambda r: np.clip(np.asarray(r, dtype=float), 0, 1) ** d


def _y_over_b(records: EnsembleRecords, model: CoefficientModel, k: int) -> np.ndarray:
    x = records.states[:, k, 0]
    b = np.array([boundary_eval(model.domain.boundary, xi)[0] for xi in x])
    return records.states[:, k, 1:] / b[:, None]


def ks_against_uniform_ball(v: np.ndarray, reference=None):
    """KS of samples in the unit ball against the uniform law (or a reference sample).

    d = 1 compares the signed coordinate with Uniform(-1, 1); larger d compares
    ``|v|^d`` with Uniform(0, 1).
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    d = v.shape[1]
    stat_of = (lambda a: a[:, 0]) if d == 1 else (lambda a: np.linalg.norm(a, axis=1) ** d)
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        ref = ref[:, None] if ref.ndim == 1 else ref
        res = stats.ks_2samp(stat_of(v), stat_of(ref))
    elif d == 1:
        res = stats.kstest(v[:, 0], stats.uniform(loc=-1, scale=2).cdf)
    else:
        res = stats.kstest(stat_of(v), stats.uniform().cdf)
    return float(res.statistic), float(res.pvalue)


def y_law_check(records: EnsembleRecords, model: CoefficientModel, t: float | None = None, reference=None,
                p_min: float = 0.01) -> CheckResult:
    """``Y_T / b(X_T)`` against the invariant law of the ball process."""
    k = -1 if t is None else records.at(t)
    v = _y_over_b(records, model, k)
    stat, p = ks_against_uniform_ball(v, reference)
    m = iid_mean(v[:, 0])
    return CheckResult("y_law_ks", p, 0.0, v.shape[0], p_min, p > p_min,
                       {"T": float(records.times[k])}, {"ks_statistic": stat, "mean": m.value, "mean_stderr": m.stderr})


def additive_functional_check(path: ReflectedPath, model: CoefficientModel, p0: float, p1, p2,
                              burn_in_time: float = 0.0) -> tuple[float, float]:
    """``T^(-1-2beta/(1+beta)) int X^(2beta) P(Y/X^beta) dt`` and its limit.

    ``P(y) = p0 + p1.y + y^T p2 y``; the limit is
    ``(1+beta)/(1+3beta) c1^(2beta) int (p0 + a p1.y + a^2 y^T p2 y) dmu``
    with uniform ``mu``.
    """
    beta = model.beta
    if not beta > -1 / 3:
        raise BetaOutOfRange(f"beta={beta} outside (-1/3, 1)")
    d = model.d
    p1 = np.broadcast_to(np.asarray(p1, dtype=float), (d,))
    p2 = np.broadcast_to(np.asarray(p2, dtype=float), (d, d))
    t = np.asarray(path.times, dtype=float)
    x = np.maximum(path.states[:, 0], 1e-300)
    y = path.states[:, 1:] / x[:, None] ** beta
    poly = p0 + y @ p1 + np.einsum("ki,ij,kj->k", y, p2, y)
    integrand = x ** (2 * beta) * poly
    T = t[-1]
    value = np.trapezoid(integrand, t) / T ** (1 + 2 * beta / (1 + beta))
    a = model.a_inf
    mu = MuMoments.uniform_ball(d)
    ptilde = p0 + a * float(p1 @ mu.first) + a * a * float(np.sum(p2 * mu.second))
    target = (1 + beta) / (1 + 3 * beta) * c1_constant(model) ** (2 * beta) * ptilde
    return float(value), float(target)


# ---------------------------------------------------------------------------
# Lyapunov machinery


@dataclass
class LyapunovEval:
    g: float
    grad: np.ndarray
    hess: np.ndarray
    drift_mu: float
    boundary_lambda: float
    qv_f: float


def lyapunov_eval(model: CoefficientModel, z) -> LyapunovEval:
    """``g = x + (s0/2c0)|y|^2/b(x)`` with its derivatives, drift, boundary term and QV density.

    ``boundary_lambda`` uses ``phi`` at the radial boundary anchor of ``z``
    (NaN on the axis ``y = 0``).
    """
    x, y = model.domain.split(z)
    if x < 1.0:
        raise ValueError("Lyapunov functions are evaluated for x >= 1")
    k = model.s0 / (2 * model.c0)
    bnd = model.domain.boundary
    b, b1, b2 = boundary_eval(bnd, x)
    yy = float(y @ y)
    d = model.d
    g = x + k * yy / b
    grad = np.empty(1 + d)
    grad[0] = 1 - k * yy * b1 / (b * b)
    grad[1:] = 2 * k * y / b
    hess = np.empty((1 + d, 1 + d))
    hess[0, 0] = k * yy * (2 * b1 * b1 / b ** 3 - b2 / (b * b))
    hess[0, 1:] = hess[1:, 0] = -2 * k * y * b1 / (b * b)
    hess[1:, 1:] = 2 * k * np.eye(d) / b
    sigma = _sigma_at(model, x)
    bg, bg1, _ = boundary_eval(bnd, g)
    quad = float(grad @ sigma @ grad)
    lap = float(np.sum(sigma * hess))
    r = math.sqrt(yy)
    if r > 0:
        phi = _phi_at(model, x, y / r)
        lam = bg * float(phi @ grad)
    else:
        lam = float("nan")
    return LyapunovEval(g, grad, hess, 0.5 * (bg * lap + bg1 * quad), lam, bg * bg * quad)


def gradient_fd_error(model: CoefficientModel, z, h: float | None = None) -> float:
    """Max relative error between the analytic gradient of ``g`` and central differences."""
    z = np.asarray(z, dtype=float)
    ev = lyapunov_eval(model, z)
    worst = 0.0
    for i in range(z.shape[0]):
        step = (h if h is not None else 1e-5 * max(1.0, abs(z[i])))
        e = np.zeros_like(z)
        e[i] = step
        fd = (g_function(model, z + e) - g_function(model, z - e)) / (2 * step)
        worst = max(worst, abs(fd - ev.grad[i]) / max(abs(ev.grad[i]), 1e-3))
    return worst


def g_function(model: CoefficientModel, z) -> float:
    x, y = model.domain.split(z)
    return x + model.s0 / (2 * model.c0) * float(y @ y) / model.domain.b(x)


@dataclass
class LyapunovReport:
    x: np.ndarray
    drift_dev: np.ndarray
    lambda_dev: np.ndarray
    f_dev: np.ndarray
    f_positive: bool

    @staticmethod
    def _decreasing(v, floor=1e-13):
        v = np.asarray(v)
        if np.all(v <= floor):
            return True
        return bool(np.all(np.diff(v) <= 1e-12 * v[:-1] + floor) and v[-1] < v[0])

    @staticmethod
    def _slope(x, v):
        ok = v > 0
        if ok.sum() < 2:
            return float("-inf")
        return float(np.polyfit(np.log10(x[ok]), np.log10(v[ok]), 1)[0])

    def summary(self) -> dict:
        return {name: {"decreasing": self._decreasing(v), "slope_per_decade": self._slope(self.x, v),
                       "max": float(np.max(v)), "tail": float(v[-1])}
                for name, v in (("drift_mu", self.drift_dev), ("boundary_lambda", self.lambda_dev),
                                ("qv_f", self.f_dev))}

    @property
    def passed(self) -> bool:
        s = self.summary()
        return self.f_positive and all(v["decreasing"] for v in s.values())


def lyapunov_asymptotics_check(model: CoefficientModel, xs=None, y_samples=None) -> LyapunovReport:
    """Normalized deviations of drift, boundary term and QV density from their limits.

    ``y_samples`` are points of the closed unit ball, scaled by ``b(x)``;
    the boundary term uses their radial projections onto the sphere.
    """
    xs = np.logspace(2, 6, 17) if xs is None else np.asarray(xs, dtype=float)
    d = model.d
    if y_samples is None:
        if d == 1:
            y_samples = np.linspace(-1, 1, 9)[:, None]
        else:
            g = np.random.default_rng(2024).standard_normal((32, d))
            r = np.random.default_rng(2025).uniform(size=(32, 1)) ** (1 / d)
            y_samples = g / np.linalg.norm(g, axis=1, keepdims=True) * r
    y_samples = np.asarray(y_samples, dtype=float).reshape(-1, d)
    beta = model.beta
    a = model.a_inf
    mu_lim = model.s0 * model.sigma_bar_sq / (2 * model.c0)
    drift_dev, lam_dev, f_dev = [], [], []
    positive = True
    for x in xs:
        b = model.domain.b(x)
        dm = lam = fd = 0.0
        for v in y_samples:
            y = b * v
            ev = lyapunov_eval(model, np.concatenate(([x], y)))
            positive &= ev.qv_f > 0
            dm = max(dm, abs(ev.drift_mu - mu_lim))
            q = q_polynomial(model, y / x ** beta)
            fd = max(fd, abs(ev.qv_f - a * a * x ** (2 * beta) * q))
            nv = np.linalg.norm(v)
            if nv > 0:
                eb = lyapunov_eval(model, np.concatenate(([x], b * v / nv)))
                lam = max(lam, abs(eb.boundary_lambda))
        drift_dev.append(dm * x ** ((1 - beta) / 2))
        lam_dev.append(lam * x ** ((1 - 3 * beta) / 2))
        f_dev.append(fd * x ** (-2 * beta))
    return LyapunovReport(xs, np.array(drift_dev), np.array(lam_dev), np.array(f_dev), bool(positive))


# ---------------------------------------------------------------------------
# local time, mixing, phase transition, toy model, windows


def local_time_consistency(records: EnsembleRecords, model: CoefficientModel, x0: float) -> dict:
    """Per record time: mean ``|X_T - x0 - s0 L_T| / T^(1/(1+beta))`` and ``L_T / T^(1/(1+beta))``."""
    p = 1 / (1 + model.beta)
    rows = []
    for k, T in enumerate(records.times):
        resid = np.abs(records.states[:, k, 0] - x0 - model.s0 * records.local_time[:, k]) / T ** p
        c2 = iid_mean(records.local_time[:, k] / T ** p)
        rows.append({"T": float(T), "residual_ratio": float(resid.mean()), "c2": c2.value,
                     "c2_stderr": c2.stderr})
    ratios = [r["residual_ratio"] for r in rows]
    return {"rows": rows, "decreasing": bool(np.all(np.diff(ratios) < 0)),
            "c2_target": c1_constant(model) / model.s0}


def _tv_hist(samples: np.ndarray, d: int, bins: int) -> np.ndarray:
    if d == 1:
        h, _ = np.histogram(samples[:, 0], bins=bins, range=(-1.0, 1.0))
    else:
        r2 = np.clip(np.sum(samples[:, :2] ** 2, axis=1), 0, 1)
        th = np.arctan2(samples[:, 1], samples[:, 0])
        h, _, _ = np.histogram2d(r2, th, bins=bins, range=((0.0, 1.0), (-math.pi, math.pi)))
    return h.ravel() / samples.shape[0]


@dataclass
class MixingResult:
    times: np.ndarray
    tv: np.ndarray
    band: np.ndarray
    lam_hat: float
    lam_stderr: float
    fit_window: tuple[float, float]

    def tv_at(self, t: float) -> float:
        return float(self.tv[int(np.argmin(np.abs(self.times - t)))])

    def non_increasing(self) -> bool:
        """Each step may rise by at most twice the binned noise band."""
        return bool(np.all(np.diff(self.tv) <= 2 * self.band[1:]))


def tv_mixing_estimate(model: CoefficientModel, times, n_paths: int, dt: float = 1e-3, seed: int = 0,
                       bins: int | None = None, fit_window=(0.5, 3.0), boundary_correction: bool = True,
                       starts=None) -> MixingResult:
    """Binned TV distance between ball laws started at antipodal boundary points."""
    d = model.d
    if n_paths < 1000:
        raise InsufficientSamples("TV estimation needs at least 1000 paths per start")
    bins = (40 if d == 1 else 20) if bins is None else bins
    times = np.asarray(times, dtype=float)
    if starts is None:
        e = np.zeros(d)
        e[0] = 1.0
        starts = (e, -e)
    pos_times = times[times > 0]
    hists = []
    for j, y0 in enumerate(starts):
        idx = np.arange(n_paths) + j * n_paths
        rec = cylinder_ensemble(model, y0, dt, pos_times, seed, idx, boundary_correction=boundary_correction)
        per_t = [_tv_hist(np.broadcast_to(np.asarray(y0, float), (n_paths, d)), d, bins)] if times[0] == 0 else []
        per_t += [_tv_hist(rec.states[:, k, 1:], d, bins) for k in range(pos_times.shape[0])]
        hists.append(np.array(per_t))
    p, q = hists
    tv = 0.5 * np.abs(p - q).sum(axis=1)
    band = 0.5 * np.sqrt((p * (1 - p) + q * (1 - q)) / n_paths).sum(axis=1)
    lo, hi = fit_window
    sel = (times >= lo) & (times <= hi) & (tv > 2 * band)
    if sel.sum() >= 3:
        res = stats.linregress(times[sel], np.log(tv[sel]))
        lam, lam_se = math.exp(res.slope), math.exp(res.slope) * res.stderr
    else:
        lam, lam_se = float("nan"), float("nan")
    return MixingResult(times, tv, band, lam, lam_se, (lo, hi))


def ols_slope(x, y) -> tuple[float, float, float]:
    """OLS slope, its standard error and intercept."""
    res = stats.linregress(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    return float(res.slope), float(res.stderr), float(res.intercept)


def variance_growth_slope(records: EnsembleRecords, column=None) -> tuple[float, float]:
    """Slope of ``log Var(X_t)`` against ``log t`` across the record times."""
    x = records.states[:, :, 0] if column is None else column
    v = x.var(axis=0, ddof=1)
    slope, se, _ = ols_slope(np.log(records.times), np.log(v))
    return slope, se


def phase_scan(betas, model_for_beta, times, n_paths: int, dt: float, seed: int, x0: float | dict = 20.0,
               boundary_correction: bool = True, toy_dt: float | None = None, c_prime=None,
               ensemble=None, toy=None, regime_threshold: float = -1 / 3) -> list[dict]:
    """Per beta, the growth exponent of ``Var(X_t)`` over geometric times (and the toy cross-check).

    ``model_for_beta(beta)`` builds the model; the toy drift defaults to the
    heuristic ``c' = s0 sigma_bar^2/(2 a_inf c0)`` of the matching model.
    ``x0`` is one start or a map ``beta -> start`` (missing betas start at 20).
    ``ensemble`` / ``toy`` replace :func:`sder_ensemble` / :func:`toy_ensemble`
    (same call signature), e.g. by a parallel executor.
    """
    ensemble = sder_ensemble if ensemble is None else ensemble
    toy = toy_ensemble if toy is None else toy
    times = np.asarray(times, dtype=float)
    if times.shape[0] < 4:
        raise InsufficientSamples("exponent fits need at least four time points")
    rows = []
    for i, beta in enumerate(betas):
        model = model_for_beta(beta)
        start = float(x0.get(float(beta), 20.0)) if isinstance(x0, dict) else float(x0)
        rec = ensemble(model, np.concatenate(([start], np.zeros(model.d))), dt, times, seed + i,
                       np.arange(n_paths), boundary_correction=boundary_correction)
        slope, se = variance_growth_slope(rec)
        row = {"beta": float(beta), "x0": start, "slope": slope, "stderr": se,
               "theory": 1.0 if beta > -1 / 3 else 2 * (1 / (1 + beta) - 1),
               "regime": "clt" if beta >= regime_threshold else "no CLT"}
        if toy_dt is not None:
            cp = model.s0 * model.sigma_bar_sq / (2 * model.a_inf * model.c0) if c_prime is None else c_prime
            trec = toy(cp, beta, start, float(toy_dt), times, seed + 1000 + i, np.arange(n_paths))
            tslope, tse = variance_growth_slope(trec)
            row.update(toy_slope=tslope, toy_stderr=tse)
        rows.append(row)
    return rows


def toy_clt_check(records: EnsembleRecords, c_prime: float, beta: float, t: float | None = None,
                  x0: float = 0.0, tol: float = 0.10) -> CheckResult:
    """Variance of ``t^(-1/2)(X_t - x_t)`` against ``(1+beta)/(1+3beta)``.

    ``x_t`` is the noise-free solution from ``x0``; it differs from
    ``c t^(1/(1+beta))`` by a deterministic ``o(sqrt t)`` shift that leaves
    the variance unchanged.
    """
    if not beta > -1 / 3:
        raise BetaOutOfRange(f"beta={beta} outside (-1/3, 1)")
    k = -1 if t is None else records.at(t)
    T = float(records.times[k])
    c = toy_strong_constant(c_prime, beta)
    x_t = (x0 ** (1 + beta) + c ** (1 + beta) * T) ** (1 / (1 + beta))
    s = (records.states[:, k, 0] - x_t) / math.sqrt(T)
    v = iid_variance(s)
    target = (1 + beta) / (1 + 3 * beta)
    return CheckResult("toy_clt_variance", v.value, v.stderr, v.n, target, abs(v.value - target) <= tol * target,
                       {"beta": beta, "T": T, "c_prime": c_prime}, {"mean": float(s.mean())})


def toy_variance_growth(records: EnsembleRecords, t1: float, t2: float) -> float:
    """Ratio of the sqrt(t)-normalized variances at ``t2`` and ``t1``."""
    k1, k2 = records.at(t1), records.at(t2)
    v1 = records.states[:, k1, 0].var(ddof=1) / t1
    v2 = records.states[:, k2, 0].var(ddof=1) / t2
    return float(v2 / v1)


def toy_stabilization(records: EnsembleRecords, c_prime: float, beta: float, t1: float, t2: float,
                      rel: float = 0.05) -> dict:
    """Fraction of paths whose ``A_t`` and ``t^(beta/(1+beta))(X_t - c t^(1/(1+beta)))`` move by < ``rel``."""
    k1, k2 = records.at(t1), records.at(t2)
    c = toy_strong_constant(c_prime, beta)
    a1, a2 = records.extra["A"][:, k1], records.extra["A"][:, k2]

    def fluct(k):
        t = records.times[k]
        return t ** (beta / (1 + beta)) * (records.states[:, k, 0] - c * t ** (1 / (1 + beta)))

    f1, f2 = fluct(k1), fluct(k2)
    a_ok = np.abs(a2 - a1) < rel * np.abs(a1)
    f_ok = np.abs(f2 - f1) < rel * np.abs(f1)
    return {"frac_A": float(a_ok.mean()), "frac_fluct": float(f_ok.mean()),
            "frac_both": float((a_ok & f_ok).mean()), "n": int(a1.shape[0])}


@dataclass
class WindowResult:
    T: float
    y_window: np.ndarray
    x_window: np.ndarray
    ks_statistic: float
    ks_pvalue: float
    x_mean: EstimateWithCI


def window_samples(model: CoefficientModel, states, positions, T: float, s: float, dt: float, seed: int,
                   indices, horizon: float | None = None, boundary_correction: bool = True) -> WindowResult:
    """Continue every path from its state at ``T`` for window time ``s`` (real time ``b(X_T)^2 s``).

    ``positions`` are the stream counters at ``T``, so the window is the
    path's own future.
    """
    states = np.asarray(states, dtype=float)
    x_t = states[:, 0]
    scale = np.array([boundary_eval(model.domain.boundary, xi)[0] for xi in x_t])
    durations = scale ** 2 * s
    if horizon is not None and np.any(T + durations > horizon):
        raise WindowExceedsHorizon("window reaches beyond the configured horizon")
    cont = sder_continue(model, states, positions, dt, durations, seed, indices,
                         boundary_correction=boundary_correction)
    end = cont.states[:, 0, :]
    yw = end[:, 1:] / scale[:, None]
    xw = (end[:, 0] - x_t) / scale
    stat, p = ks_against_uniform_ball(yw)
    return WindowResult(T, yw, xw, stat, p, iid_mean(xw))


def cylinder_window_oracle(model: CoefficientModel, s: float, n_paths: int, dt: float, seed: int,
                           boundary_correction: bool = True) -> EstimateWithCI:
    """Mean of ``X_s`` for the cylinder limit started from the uniform law on the ball."""
    d = model.d
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x0C11]))
    g = rng.standard_normal((n_paths, d))
    y0 = g / np.linalg.norm(g, axis=1, keepdims=True) * rng.uniform(size=(n_paths, 1)) ** (1 / d)
    rec = cylinder_ensemble(model, y0, dt, [s], seed, np.arange(n_paths), boundary_correction=boundary_correction)
    return iid_mean(rec.states[:, 0, 0])


@dataclass
class WindowLawResult:
    windows: list[WindowResult]
    oracle: EstimateWithCI
    s: float

    def ks_non_increasing(self, slack: float | None = None) -> bool:
        """KS statistics non-increasing in T, allowing one sampling standard deviation of slack."""
        ks = [w.ks_statistic for w in self.windows]
        n = self.windows[0].y_window.shape[0]
        slack = 1.0 / math.sqrt(n) if slack is None else slack
        return all(b <= a + slack for a, b in zip(ks, ks[1:]))

    def checks(self, p_min: float = 0.01) -> list[CheckResult]:
        out = []
        for w in self.windows:
            n = w.y_window.shape[0]
            out.append(CheckResult("window_y_ks", w.ks_pvalue, 0.0, n, p_min, w.ks_pvalue > p_min,
                                   {"T": w.T, "s": self.s}, {"ks_statistic": w.ks_statistic}))
            se = math.hypot(w.x_mean.stderr, self.oracle.stderr)
            out.append(CheckResult("window_x_mean", w.x_mean.value, se, n, self.oracle.value,
                                   abs(w.x_mean.value - self.oracle.value) <= 3 * se, {"T": w.T, "s": self.s}))
        ks = [w.ks_statistic for w in self.windows]
        out.append(CheckResult("window_ks_trend", ks[-1], 0.0, len(ks), ks[0], self.ks_non_increasing()))
        return out


def window_law_check(model: CoefficientModel, t_list, s: float, n_paths: int, dt: float, seed: int,
                     x0: float = 20.0, oracle_paths: int | None = None,
                     boundary_correction: bool = True) -> WindowLawResult:
    """Windows at each ``T`` of ``t_list`` cut from one ensemble, plus the cylinder oracle for the mean."""
    t_list = sorted(float(t) for t in t_list)
    indices = np.arange(n_paths)
    states = np.broadcast_to(np.concatenate(([x0], np.zeros(model.d))), (n_paths, 1 + model.d))
    positions = np.zeros(n_paths, dtype=np.int64)
    t_cur = 0.0
    windows = []
    for T in t_list:
        cont = sder_continue(model, states, positions, dt, np.full(n_paths, T - t_cur), seed, indices,
                             boundary_correction=boundary_correction)
        states, positions, t_cur = cont.states[:, 0, :], cont.positions, T
        windows.append(window_samples(model, states, positions, T, s, dt, seed, indices,
                                      boundary_correction=boundary_correction))
    oracle = cylinder_window_oracle(model, s, oracle_paths or n_paths, dt, seed + 1, boundary_correction)
    return WindowLawResult(windows, oracle, s)


def result_rows(experiment: str, checks: list[CheckResult]) -> list[dict]:
    return [dict(experiment=experiment, **c.row()) for c in checks]


__all__ = [name for name in dir() if not name.startswith("_")] + ["asdict"]
