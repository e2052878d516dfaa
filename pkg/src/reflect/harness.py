"""JSON-configured experiments, deterministic parallel ensembles, artifacts and the ``reflect`` CLI."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata, resources
from pathlib import Path

import numpy as np

from . import analysis as an
from .engine import (
    EnsembleRecords,
    SimConfig,
    ball_moments,
    cylinder_ensemble,
    sder_ensemble,
    simulate_sder,
    toy_ensemble,
)
from .errors import ConfigError, MissingArtifacts, ReflectError, SimulationError
from .geometry import contains
from .linalg import sqrtm_spd
from .model import (
    CoefficientModel,
    MuMoments,
    canonical_model,
    upsilon_constant,
    validate_assumptions,
)
from .rng import RngStream

EXPERIMENTS = ("simulate", "ergodic", "clt", "toy", "phase_scan", "window", "lyapunov", "validate", "mixing")
MAX_TRACE_ROWS = 10_000


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg)).hexdigest()[:16]


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def build_model(block: dict, key: str = "model") -> CoefficientModel:
    """A model from ``{"canonical": {...}}`` or a full coefficient block."""
    if not isinstance(block, dict):
        raise ConfigError(f"{key}: expected an object")
    try:
        if "canonical" in block:
            c = block["canonical"]
            return canonical_model(float(c.get("beta", 0.0)), int(c.get("d", 1)), float(c.get("a_inf", 1.0)),
                                   float(c.get("s0", 1.0)), float(c.get("c0", 1.0)), float(c.get("x_guard", 0.5)))
        return CoefficientModel.from_config(block)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        sub = "canonical" if "canonical" in block else "boundary"
        raise ConfigError(f"{key}.{sub}: {exc}") from exc


@dataclass
class ExperimentConfig:
    experiment: str
    model: dict
    sim: dict
    analysis: dict
    output: str
    cases: list = field(default_factory=list)
    name: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentConfig":
        if not isinstance(cfg, dict):
            raise ConfigError("config: expected a JSON object")
        exp = cfg.get("experiment")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"experiment: {exp!r} is not one of {', '.join(EXPERIMENTS)}")
        out = cls(exp, cfg.get("model", {"canonical": {}}), cfg.get("sim", {}), cfg.get("analysis", {}),
                  cfg.get("output", "results"), list(cfg.get("cases", [])), cfg.get("name", exp), cfg)
        for i, case in enumerate(out.case_dicts()):
            prefix = f"cases[{i}]." if out.cases else ""
            sim = case["sim"]
            if "seed" not in sim:
                raise ConfigError(f"{prefix}sim.seed: required (no wall-clock default)")
            if not isinstance(sim["seed"], int) or sim["seed"] < 0:
                raise ConfigError(f"{prefix}sim.seed: must be a non-negative integer")
            if "n_paths" in sim and (not isinstance(sim["n_paths"], int) or sim["n_paths"] < 1):
                raise ConfigError(f"{prefix}sim.n_paths: must be an integer >= 1")
            if "dt" in sim and not float(sim["dt"]) > 0:
                raise ConfigError(f"{prefix}sim.dt: must be positive")
            if exp not in ("toy",):
                build_model(case["model"], f"{prefix}model")
            else:
                beta = float(sim.get("beta", 0.0))
                if not -1 < beta < 1:
                    raise ConfigError(f"{prefix}sim.beta: beta must lie in (-1,1)")
        return out

    def case_dicts(self) -> list[dict]:
        base = {"model": self.model, "sim": self.sim, "analysis": self.analysis}
        if not self.cases:
            return [dict(base, label="")]
        out = []
        for i, c in enumerate(self.cases):
            merged = _merge(base, {k: v for k, v in c.items() if k not in ("label", "model")})
            if "model" in c:
                merged["model"] = copy.deepcopy(c["model"])
            out.append(dict(merged, label=c.get("label", str(i))))
        return out


def load_config(source) -> dict:
    """A config from a dict, an inline JSON string, a path, or a bundled name such as ``AC3``."""
    if isinstance(source, dict):
        return copy.deepcopy(source)
    text = str(source)
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
    path = Path(text)
    if not path.exists():
        bundled = bundled_config_path(text)
        if bundled is None:
            raise ConfigError(f"config: file {text!r} not found")
        path = bundled
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {path} ({exc})") from exc


def bundled_config_path(name: str) -> Path | None:
    stem = Path(name).stem
    p = resources.files("reflect") / "configs" / f"{stem}.json"
    return Path(str(p)) if p.is_file() else None


def bundled_configs() -> list[str]:
    root = resources.files("reflect") / "configs"
    return sorted((p.name[:-5] for p in root.iterdir() if p.name.endswith(".json")),
                  key=lambda s: (len(s), s))


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    started: str
    finished: str
    per_path_seeds: list
    outputs: list
    status: str = "ok"
    error: dict | None = None

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class EnsembleSpec:
    """Monte Carlo ensemble: path ``i`` uses stream ``(seed, i)``."""

    kind: str
    n_paths: int
    dt: float
    times: tuple
    seed: int
    model: dict | None = None
    z0: tuple = ()
    boundary_correction: bool = False
    noise_scale: float = 1.0
    c_prime: float = 1.0
    beta: float = 0.0
    x0: float = 1.0

    def key(self) -> bytes:
        return canonical_json(asdict(self))


def _run_chunk(spec: EnsembleSpec, lo: int, hi: int) -> EnsembleRecords:
    idx = np.arange(lo, hi)
    if spec.kind == "sder":
        return sder_ensemble(build_model(spec.model), np.array(spec.z0), spec.dt, spec.times, spec.seed, idx,
                             spec.noise_scale, boundary_correction=spec.boundary_correction)
    if spec.kind == "cylinder":
        return cylinder_ensemble(build_model(spec.model), np.array(spec.z0[1:]), spec.dt, spec.times, spec.seed,
                                 idx, spec.z0[0], spec.noise_scale, boundary_correction=spec.boundary_correction)
    if spec.kind == "toy":
        return toy_ensemble(spec.c_prime, spec.beta, spec.x0, spec.dt, spec.times, spec.seed, idx,
                            spec.noise_scale)
    raise ConfigError(f"ensemble kind {spec.kind!r} unknown")


_CACHE: dict[bytes, EnsembleRecords] = {}


def ensemble_execute(spec: EnsembleSpec, workers: int = 1, use_cache: bool = True) -> EnsembleRecords:
    """Run the ensemble in contiguous path-index chunks; records come back sorted by index.

    Each path owns its stream, so the result does not depend on ``workers``.
    """
    if workers < 1:
        raise ConfigError("workers: must be >= 1")
    if use_cache and spec.key() in _CACHE:
        return _CACHE[spec.key()]
    n = spec.n_paths
    cuts = np.linspace(0, n, min(workers, n) + 1).astype(int)
    bounds = [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]
    if len(bounds) == 1:
        parts = [_run_chunk(spec, *bounds[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [spec] * len(bounds), *zip(*bounds)))
    rec = EnsembleRecords.concat(parts)
    if use_cache:
        _CACHE[spec.key()] = rec
    return rec


def clear_cache() -> None:
    _CACHE.clear()


# ---------------------------------------------------------------------------
# experiments


@dataclass
class Context:
    workers: int = 1
    seeds: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    def add_table(self, name: str, rows: list[dict], label: str = "") -> None:
        self.tables.setdefault(name, []).extend(dict(case=label, **r) for r in rows)

    def add_checks(self, checks, label: str = "") -> None:
        for c in checks:
            if label:
                c.params = dict(case=label, **c.params)
            self.checks.append(c)

    def note_seeds(self, seed: int, n: int) -> None:
        self.seeds.extend([seed, i] for i in range(n))


def _z0(model: CoefficientModel, sim: dict) -> tuple:
    y0 = sim.get("y0", [0.0] * model.d)
    return (float(sim.get("x0", 20.0)), *map(float, y0))


def _sder_spec(model_block, model, sim) -> EnsembleSpec:
    times = sim.get("times", [sim.get("T")])
    return EnsembleSpec("sder", int(sim["n_paths"]), float(sim["dt"]), tuple(float(t) for t in times),
                        int(sim["seed"]), model_block, _z0(model, sim), bool(sim.get("boundary_correction", False)),
                        float(sim.get("noise_scale", 1.0)))


def _terminal_rows(rec: EnsembleRecords) -> list[dict]:
    rows = []
    for i in range(rec.n_paths):
        for k, t in enumerate(rec.times):
            row = {"path": int(rec.indices[i]), "t": float(t), "x": float(rec.states[i, k, 0])}
            for j in range(1, rec.states.shape[2]):
                row[f"y{j}"] = float(rec.states[i, k, j])
            row["L"] = float(rec.local_time[i, k])
            rows.append(row)
    return rows


def exp_simulate(case, ctx: Context):
    model = build_model(case["model"])
    sim, ana = case["sim"], case["analysis"]
    label = case["label"]
    if "n_paths" not in sim:
        cfg = SimConfig(float(sim["dt"]), float(sim["T"]), _z0(model, sim), int(sim["seed"]),
                        record=sim.get("record", "full"), boundary_correction=bool(sim.get("boundary_correction")))
        path = simulate_sder(model, cfg, RngStream(int(sim["seed"]), int(sim.get("stream", 0))))
        ctx.note_seeds(int(sim["seed"]), 1)
        stride = max(1, math.ceil(path.times.shape[0] / MAX_TRACE_ROWS))
        rows = [{"t": float(path.times[k]), "x": float(path.states[k, 0]),
                 **{f"y{j}": float(path.states[k, j]) for j in range(1, path.states.shape[1])},
                 "L": float(path.local_time[k]), "reflected": bool(path.reflected[k])}
                for k in range(0, path.times.shape[0], stride)]
        ctx.add_table("path_trace", rows, label)
        inside = all(contains(model.domain, z) for z in path.states)
        ctx.add_checks([
            an.CheckResult("trace_time_monotone", float(np.min(np.diff(path.times))), 0.0, len(path.times), 0.0,
                           bool(np.all(np.diff(path.times) > 0))),
            an.CheckResult("local_time_nondecreasing", float(np.min(np.diff(path.local_time))), 0.0,
                           len(path.times), 0.0, bool(np.all(np.diff(path.local_time) >= 0))),
            an.CheckResult("path_in_domain", float(inside), 0.0, len(path.times), 1.0, inside),
        ], label)
        return
    spec = _sder_spec(case["model"], model, sim)
    rec = ensemble_execute(spec, ctx.workers)
    ctx.note_seeds(spec.seed, spec.n_paths)
    ctx.add_table("terminal_records", _terminal_rows(rec), label)
    checks = []
    if "determinism_workers" in ana:
        tables = [_terminal_rows(ensemble_execute(spec, int(w), use_cache=False)) for w in ana["determinism_workers"]]
        same = all(canonical_json(t) == canonical_json(tables[0]) for t in tables)
        checks.append(an.CheckResult("worker_determinism", float(same), 0.0, spec.n_paths, 1.0, same,
                                     {"workers": list(ana["determinism_workers"])}))
        toy = EnsembleSpec("toy", spec.n_paths, 0.01, (10.0,), spec.seed, c_prime=1.0, beta=0.5, x0=1.0)
        ttabs = [_terminal_rows(ensemble_execute(toy, int(w), use_cache=False)) for w in ana["determinism_workers"]]
        same = all(canonical_json(t) == canonical_json(ttabs[0]) for t in ttabs)
        checks.append(an.CheckResult("worker_determinism_toy", float(same), 0.0, toy.n_paths, 1.0, same))
    if "sqrtm_trials" in ana:
        checks.append(_sqrtm_check(int(ana["sqrtm_trials"]), int(sim["seed"]), float(ana.get("sqrtm_tol", 1e-10))))
    if "coverage_reps" in ana:
        checks.append(_coverage_check(int(ana["coverage_reps"]), int(sim["seed"]),
                                      float(ana.get("coverage_min", 0.9))))
    if "step_halving" in ana:
        checks.extend(_step_halving(model, ana["step_halving"], int(sim["seed"]), ctx, label))
    ctx.add_checks(checks, label)


def _sqrtm_check(trials: int, seed: int, tol: float) -> an.CheckResult:
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x5A]))
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(2, 5))
        a = rng.standard_normal((m, m))
        s = a @ a.T + 0.1 * np.eye(m)
        r = sqrtm_spd(s)
        worst = max(worst, float(np.max(np.abs(r @ r - s)) / max(1.0, np.max(np.abs(s)))))
    return an.CheckResult("sqrtm_residual", worst, 0.0, trials, tol, worst < tol)


def _coverage_check(reps: int, seed: int, minimum: float) -> an.CheckResult:
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xC0]))
    hits = 0
    for _ in range(reps):
        est = an.batch_means(rng.standard_normal(5000), burn_in=0.0)
        hits += est.covers(0.0)
    frac = hits / reps
    return an.CheckResult("batch_means_coverage", frac, 0.0, reps, minimum, frac >= minimum)


def _step_halving(model, block, seed, ctx, label):
    d = model.d
    target = d / (d + 2)
    rows = []
    for dt in block["dts"]:
        f, s = ball_moments(model, np.zeros(d), float(dt), int(block["n_steps"]), seed,
                            boundary_correction=bool(block.get("boundary_correction", False)))
        est = an.moments_from_batches(f, s, int(block["n_steps"])).trace
        rows.append({"dt": float(dt), "trace": est.value, "stderr": est.stderr, "discrepancy": abs(est.value - target)})
    ctx.add_table("step_halving", rows, label)
    disc = [r["discrepancy"] for r in rows]
    ok = all(b < a for a, b in zip(disc, disc[1:]))
    return [an.CheckResult("step_halving_shrinks", disc[-1], rows[-1]["stderr"], len(rows), disc[0], ok,
                           {"dts": list(block["dts"])})]


def exp_ergodic(case, ctx: Context):
    model = build_model(case["model"])
    sim, ana, label = case["sim"], case["analysis"], case["label"]
    d = model.d
    dt, n_steps, seed = float(sim["dt"]), int(sim["n_steps"]), int(sim["seed"])
    burn = float(ana.get("burn_in", an.DEFAULT_BURN_IN))
    nb = int(ana.get("n_batches", an.DEFAULT_BATCHES))
    bc = bool(sim.get("boundary_correction", False))
    f, s = ball_moments(model, np.asarray(sim.get("y0", np.zeros(d)), float), dt, n_steps, seed,
                        burn_in=burn, n_batches=nb, boundary_correction=bc)
    ctx.note_seeds(seed, 1)
    n_used = n_steps - int(round(burn * n_steps))
    if n_used < 100_000:
        raise an.InsufficientSamples(f"{n_used} post-burn-in steps, need 100000")
    est = an.moments_from_batches(f, s, n_used)
    tol = float(ana.get("tol", 0.01))
    target = d / (d + 2)
    tr = est.trace
    sec = est.moments.second
    checks = [an.CheckResult("second_moment_trace", tr.value, tr.stderr, tr.n, target, abs(tr.value - target) <= tol,
                             {"d": d, "dt": dt, "tol": tol, "boundary_correction": bc})]
    for j, e in enumerate(est.first):
        checks.append(an.CheckResult(f"first_moment_{j + 1}", e.value, e.stderr, e.n, 0.0, e.within(0.0), {"d": d}))
    sym = float(np.max(np.abs(s.mean(axis=0) - s.mean(axis=0).T)))
    psd = float(np.min(np.linalg.eigvalsh(sec)))
    checks.append(an.CheckResult("second_moment_symmetric_psd", psd, 0.0, tr.n, 0.0, sym <= 1e-12 and psd >= -1e-10,
                                 {"asymmetry": sym}))
    if model.beta > -1 / 3:
        ups = np.array([upsilon_constant(model, MuMoments(f[b], s[b])) for b in range(f.shape[0])])
        u = an._from_batches(ups, n_used)
        exact = upsilon_constant(model, MuMoments.uniform_ball(d))
        checks.append(an.CheckResult("upsilon_consistency", u.value, u.stderr, n_used, exact,
                                     abs(u.value - exact) <= 3 * u.stderr + 1e-12, {"d": d}))
    ctx.add_checks(checks, label)
    rows = [{"d": d, "dt": dt, "n_steps": n_steps, "boundary_correction": bc, "trace": tr.value,
             "trace_stderr": tr.stderr}]
    if ana.get("report_uncorrected") and bc:
        f2, s2 = ball_moments(model, np.zeros(d), dt, n_steps, seed, burn_in=burn, n_batches=nb)
        t2 = an.moments_from_batches(f2, s2, n_used).trace
        rows.append({"d": d, "dt": dt, "n_steps": n_steps, "boundary_correction": False, "trace": t2.value,
                     "trace_stderr": t2.stderr})
    ctx.add_table("ergodic_moments", rows, label)


def exp_clt(case, ctx: Context):
    model = build_model(case["model"])
    sim, ana, label = case["sim"], case["analysis"], case["label"]
    spec = _sder_spec(case["model"], model, sim)
    rec = ensemble_execute(spec, ctx.workers)
    ctx.note_seeds(spec.seed, spec.n_paths)
    x0 = spec.z0[0]
    T = float(ana.get("T", spec.times[-1]))
    wanted = ana.get("checks", ["strong_law", "clt", "independence", "y_law", "local_time"])
    checks = []
    if "strong_law" in wanted:
        checks.append(an.strong_law_check(rec, model, T, float(ana.get("strong_law_tol", 0.05))))
    if "clt" in wanted or "independence" in wanted:
        res = an.clt_check(rec, model, MuMoments.uniform_ball(model.d), T, x0)
        if "clt" in wanted:
            checks.extend(c for c in res.checks(float(ana.get("variance_tol", 0.15)))
                          if c.name != "clt_independence")
        if "independence" in wanted:
            checks.append(an.independence_check(rec, model, T, x0, float(ana.get("corr_max", 0.1))))
    if "y_law" in wanted:
        checks.append(an.y_law_check(rec, model, T))
    if "local_time" in wanted:
        lt = an.local_time_consistency(rec, model, x0)
        ctx.add_table("local_time", lt["rows"], label)
        last = lt["rows"][-1]
        tol = float(ana.get("c2_tol", 0.1))
        checks.append(an.CheckResult("local_time_c2", last["c2"], last["c2_stderr"], rec.n_paths, lt["c2_target"],
                                     abs(last["c2"] - lt["c2_target"]) <= tol * lt["c2_target"],
                                     {"T": last["T"], "tol": tol}))
        checks.append(an.CheckResult("local_time_residual_decreasing", lt["rows"][-1]["residual_ratio"], 0.0,
                                     rec.n_paths, lt["rows"][0]["residual_ratio"], lt["decreasing"]))
    ctx.add_checks(checks, label)
    ctx.add_table("terminal_records", _terminal_rows(rec), label)


def exp_toy(case, ctx: Context):
    sim, ana, label = case["sim"], case["analysis"], case["label"]
    cp, beta, x0 = float(sim.get("c_prime", 1.0)), float(sim.get("beta", 0.0)), float(sim.get("x0", 1.0))
    spec = EnsembleSpec("toy", int(sim["n_paths"]), float(sim["dt"]), tuple(float(t) for t in sim["times"]),
                        int(sim["seed"]), c_prime=cp, beta=beta, x0=x0, noise_scale=float(sim.get("noise_scale", 1.0)))
    rec = ensemble_execute(spec, ctx.workers)
    ctx.note_seeds(spec.seed, spec.n_paths)
    checks = []
    if "clt" in ana:
        b = ana["clt"]
        checks.append(an.toy_clt_check(rec, cp, beta, float(b.get("T", spec.times[-1])), x0, float(b.get("tol", 0.1))))
    if "growth" in ana:
        b = ana["growth"]
        ratio = an.toy_variance_growth(rec, float(b["t1"]), float(b["t2"]))
        checks.append(an.CheckResult("toy_variance_growth", ratio, 0.0, rec.n_paths, float(b.get("min_ratio", 3.0)),
                                     ratio >= float(b.get("min_ratio", 3.0)), {"beta": beta, "t1": b["t1"], "t2": b["t2"]}))
    if "stabilization" in ana:
        b = ana["stabilization"]
        st = an.toy_stabilization(rec, cp, beta, float(b["t1"]), float(b["t2"]), float(b.get("rel", 0.05)))
        need = float(b.get("min_fraction", 0.9))
        for key in ("frac_A", "frac_fluct"):
            checks.append(an.CheckResult(f"toy_stabilization_{key[5:]}", st[key], 0.0, st["n"], need, st[key] >= need,
                                         {"beta": beta, "t1": b["t1"], "t2": b["t2"]}))
    ctx.add_checks(checks, label)
    rows = [{"path": int(rec.indices[i]), "t": float(t), "x": float(rec.states[i, k, 0]),
             "A": float(rec.extra["A"][i, k]), "M": float(rec.extra["M"][i, k])}
            for i in range(rec.n_paths) for k, t in enumerate(rec.times)]
    ctx.add_table("toy_records", rows, label)


def exp_phase_scan(case, ctx: Context):
    sim, ana, label = case["sim"], case["analysis"], case["label"]
    betas = [float(b) for b in ana["betas"]]
    a_map = {float(k): float(v) for k, v in ana.get("a_inf", {}).items()}
    base = case["model"].get("canonical", {})
    tol = float(ana.get("tol", 0.3))
    threshold = float(ana.get("regime_threshold", -1 / 3))

    def block_for(beta):
        return {"canonical": dict(base, beta=beta, a_inf=a_map.get(beta, base.get("a_inf", 1.0)))}

    def sder_runner(model, z0, dt, times, seed, indices, boundary_correction=False):
        spec = EnsembleSpec("sder", len(indices), dt, tuple(float(t) for t in times), seed,
                            block_for(model.beta), tuple(map(float, z0)), boundary_correction)
        ctx.note_seeds(seed, len(indices))
        return ensemble_execute(spec, ctx.workers)

    def toy_runner(cp, beta, x0, dt, times, seed, indices):
        spec = EnsembleSpec("toy", len(indices), dt, tuple(float(t) for t in times), seed, c_prime=cp, beta=beta,
                            x0=x0)
        return ensemble_execute(spec, ctx.workers)

    x0 = sim.get("x0", 20.0)
    x0 = {float(k): float(v) for k, v in x0.items()} if isinstance(x0, dict) else float(x0)
    rows = an.phase_scan(betas, lambda b: build_model(block_for(b)), sim["times"], int(sim["n_paths"]),
                         float(sim["dt"]), int(sim["seed"]), x0,
                         bool(sim.get("boundary_correction", False)),
                         toy_dt=sim.get("toy_dt"), ensemble=sder_runner, toy=toy_runner,
                         regime_threshold=threshold)
    checks = []
    for r in rows:
        checks.append(an.CheckResult("variance_growth_slope", r["slope"], r["stderr"], int(sim["n_paths"]), r["theory"],
                                     abs(r["slope"] - r["theory"]) <= tol, {"beta": r["beta"], "tol": tol}))
        if "toy_slope" in r:
            checks.append(an.CheckResult("toy_slope_agreement", r["toy_slope"], r["toy_stderr"], int(sim["n_paths"]),
                                         r["slope"], abs(r["toy_slope"] - r["slope"]) <= tol,
                                         {"beta": r["beta"], "tol": tol}))
    ctx.add_checks(checks, label)
    ctx.add_table("phase_scan_table", rows, label)


def exp_window(case, ctx: Context):
    model = build_model(case["model"])
    sim, ana, label = case["sim"], case["analysis"], case["label"]
    res = an.window_law_check(model, ana["T_list"], float(ana.get("s", 5.0)), int(sim["n_paths"]), float(sim["dt"]),
                              int(sim["seed"]), float(sim.get("x0", 20.0)), ana.get("oracle_paths"),
                              bool(sim.get("boundary_correction", False)))
    ctx.note_seeds(int(sim["seed"]), int(sim["n_paths"]))
    ctx.add_checks(res.checks(float(ana.get("p_min", 0.01))), label)
    ctx.add_table("window_summary", [{"T": w.T, "ks_statistic": w.ks_statistic, "ks_pvalue": w.ks_pvalue,
                                      "x_mean": w.x_mean.value, "x_stderr": w.x_mean.stderr,
                                      "oracle_mean": res.oracle.value, "oracle_stderr": res.oracle.stderr}
                                     for w in res.windows], label)


def exp_lyapunov(case, ctx: Context):
    model = build_model(case["model"])
    ana, label = case["analysis"], case["label"]
    xs = np.logspace(math.log10(float(ana.get("x_min", 1e2))), math.log10(float(ana.get("x_max", 1e6))),
                     int(ana.get("n_x", 17)))
    checks = []
    if ana.get("fd_points"):
        worst = max(an.gradient_fd_error(model, z) for z in ana["fd_points"])
        tol = float(ana.get("fd_tol", 1e-6))
        checks.append(an.CheckResult("gradient_fd", worst, 0.0, len(ana["fd_points"]), tol, worst <= tol))
    rep = an.lyapunov_asymptotics_check(model, xs)
    summ = rep.summary()
    mode = ana.get("mode", "decay")
    for name, s in summ.items():
        if mode == "exact":
            checks.append(an.CheckResult(f"{name}_exact", s["max"], 0.0, len(xs), 0.0, s["max"] <= 1e-12))
        else:
            checks.append(an.CheckResult(f"{name}_decreasing", s["tail"], 0.0, len(xs), s["max"], s["decreasing"],
                                         {"slope_per_decade": s["slope_per_decade"]}))
    checks.append(an.CheckResult("qv_f_positive", float(rep.f_positive), 0.0, len(xs), 1.0, rep.f_positive))
    ctx.add_checks(checks, label)
    ctx.add_table("lyapunov_deviations", [{"x": float(x), "drift_mu": float(a), "boundary_lambda": float(b),
                                           "qv_f": float(c)}
                                          for x, a, b, c in zip(rep.x, rep.drift_dev, rep.lambda_dev, rep.f_dev)],
                  label)


def exp_validate(case, ctx: Context):
    model = build_model(case["model"])
    rep = validate_assumptions(model, case["analysis"].get("grid"))
    ctx.add_checks([an.CheckResult(f"assumption_{e.name}", float(e.passed), 0.0, 1, 1.0, e.passed or not e.required,
                                   {"required": e.required}, {"detail": e.detail})
                    for e in rep.entries], case["label"])
    ctx.add_table("validation", [{"name": e.name, "passed": e.passed, "required": e.required, "detail": e.detail}
                                 for e in rep.entries], case["label"])


def exp_mixing(case, ctx: Context):
    model = build_model(case["model"])
    sim, ana, label = case["sim"], case["analysis"], case["label"]
    times = np.asarray(ana["times"], dtype=float)
    n = int(sim["n_paths"])
    res = an.tv_mixing_estimate(model, times, n, float(sim["dt"]), int(sim["seed"]), ana.get("bins"),
                                tuple(ana.get("fit_window", (0.5, 3.0))), bool(sim.get("boundary_correction", False)))
    ctx.note_seeds(int(sim["seed"]), 2 * n)
    t_end = float(ana.get("t_check", times[-1]))
    tv_max = float(ana.get("tv_max", 0.05))
    in_range = bool(np.all((res.tv >= 0) & (res.tv <= 1)))
    checks = [
        an.CheckResult("tv_non_increasing", float(np.max(np.diff(res.tv))), 0.0, n, 0.0, res.non_increasing()),
        an.CheckResult("tv_final", res.tv_at(t_end), float(res.band[-1]), n, tv_max, res.tv_at(t_end) < tv_max,
                       {"t": t_end}),
        an.CheckResult("lambda_hat", res.lam_hat, res.lam_stderr, n, 1.0, bool(res.lam_hat < 1.0),
                       {"fit_window": list(res.fit_window)}),
        an.CheckResult("tv_in_unit_interval", float(in_range), 0.0, n, 1.0, in_range),
    ]
    if times[0] == 0:
        checks.append(an.CheckResult("tv_initial", float(res.tv[0]), 0.0, n, 1.0, abs(res.tv[0] - 1.0) < 1e-12))
    ctx.add_checks(checks, label)
    ctx.add_table("tv_series", [{"t": float(t), "tv": float(v), "band": float(b)}
                                for t, v, b in zip(res.times, res.tv, res.band)], label)


RUNNERS = {
    "simulate": exp_simulate, "ergodic": exp_ergodic, "clt": exp_clt, "toy": exp_toy,
    "phase_scan": exp_phase_scan, "window": exp_window, "lyapunov": exp_lyapunov,
    "validate": exp_validate, "mixing": exp_mixing,
}


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True, separators=(",", ":"))
    return str(v)


def write_csv(path: Path, rows: list[dict], chash: str) -> None:
    cols = ["config_hash"]
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            full = dict(r, config_hash=chash)
            w.writerow([_fmt(full[c]) if c in full else "" for c in cols])


@dataclass
class RunOutcome:
    exit_code: int
    summary: dict
    out_dir: Path
    checks: list


def run_experiment(config, workers: int = 1, seed_override: int | None = None, out: str | Path | None = None,
                   write: bool = True) -> RunOutcome:
    """Execute a config; write ``<experiment>_results.csv``, tables, ``manifest.json`` and ``summary.json``.

    The exit code is 0 iff every check passes.
    """
    raw = load_config(config)
    if seed_override is not None:
        raw = copy.deepcopy(raw)
        raw.setdefault("sim", {})["seed"] = int(seed_override)
        for c in raw.get("cases", []):
            if "seed" in c.get("sim", {}):
                c["sim"]["seed"] = int(seed_override)
    cfg = ExperimentConfig.from_dict(raw)
    chash = config_hash(raw)
    out_dir = Path(out if out is not None else cfg.output)
    ctx = Context(workers=workers)
    started = datetime.now(timezone.utc).isoformat()
    outputs: list[str] = []
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    try:
        for case in cfg.case_dicts():
            RUNNERS[cfg.experiment](case, ctx)
    except (SimulationError, ReflectError) as exc:
        if write:
            err = {"type": type(exc).__name__, "message": str(exc),
                   "path_index": getattr(exc, "path_index", None), "time": getattr(exc, "time", None)}
            RunManifest(chash, code_version(), started, datetime.now(timezone.utc).isoformat(), ctx.seeds, outputs,
                        "failed", err).write(out_dir / "manifest.json")
        raise
    results = [dict(experiment=cfg.name, **c.row()) for c in ctx.checks]
    failures = [f"{r['check']}[{r.get('param_case', '')}]" if r.get("param_case") else r["check"]
                for r in results if not r["passed"]]
    summary = {"config_hash": chash, "experiment": cfg.experiment, "name": cfg.name, "passed": not failures,
               "n_checks": len(results), "failures": failures,
               "checks": [{k: (_fmt(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()}
                          for r in results]}
    if write:
        res_file = f"{cfg.experiment}_results.csv"
        write_csv(out_dir / res_file, results, chash)
        outputs.append(res_file)
        for name, rows in ctx.tables.items():
            write_csv(out_dir / f"{name}.csv", rows, chash)
            outputs.append(f"{name}.csv")
        (out_dir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
        outputs.append("summary.json")
        RunManifest(chash, code_version(), started, datetime.now(timezone.utc).isoformat(), ctx.seeds,
                    outputs + ["manifest.json"]).write(out_dir / "manifest.json")
    return RunOutcome(0 if not failures else 1, summary, out_dir, ctx.checks)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_reference_figures(results_dir) -> list[Path]:
    """Plot-ready CSVs: the phase diagram and subsampled path traces."""
    root = Path(results_dir)
    written = []
    phase = root / "phase_scan_table.csv"
    trace = root / "path_trace.csv"
    if not phase.exists() and not trace.exists():
        raise MissingArtifacts(f"{root} holds neither phase_scan_table.csv nor path_trace.csv")
    if phase.exists():
        rows = _read_csv(phase)
        out = root / "phase_diagram.csv"
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config_hash", "beta", "slope", "stderr", "regime"])
            for r in sorted(rows, key=lambda r: float(r["beta"])):
                w.writerow([r["config_hash"], r["beta"], r["slope"], r["stderr"], r["regime"]])
        written.append(out)
    if trace.exists():
        rows = _read_csv(trace)
        stride = max(1, math.ceil(len(rows) / MAX_TRACE_ROWS))
        out = root / "trace_figure.csv"
        ycols = [c for c in rows[0] if c.startswith("y")] if rows else []
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config_hash", "case", "t", "x", *ycols, "L"])
            for r in rows[::stride]:
                w.writerow([r["config_hash"], r.get("case", ""), r["t"], r["x"], *(r[c] for c in ycols), r["L"]])
        written.append(out)
    return written


# ---------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reflect", description="Reflected diffusion experiments in parabolic domains.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="JSON file, inline JSON or bundled name (AC1 ... AC12)")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--seed-override", type=int, default=None)
    r.add_argument("--out", default=None)
    v = sub.add_parser("validate", help="parse a config and check the model assumptions")
    v.add_argument("config")
    f = sub.add_parser("figures", help="emit plot-ready CSVs from a results directory")
    f.add_argument("results_dir")
    sub.add_parser("list", help="list bundled configs")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            t0 = time.perf_counter()
            res = run_experiment(args.config, args.workers, args.seed_override, args.out)
            for c in res.summary["checks"]:
                print(f"{'PASS' if c['passed'] else 'FAIL'} {c['check']}: estimate={c['estimate']!r} "
                      f"target={c['target']!r}")
            print(f"{res.summary['name']}: {'passed' if res.exit_code == 0 else 'FAILED'} "
                  f"({time.perf_counter() - t0:.1f} s) -> {res.out_dir}")
            return res.exit_code
        if args.command == "validate":
            cfg = ExperimentConfig.from_dict(load_config(args.config))
            ok = True
            for case in cfg.case_dicts():
                if cfg.experiment == "toy":
                    continue
                rep = validate_assumptions(build_model(case["model"]))
                for e in rep.entries:
                    print(f"{'PASS' if e.passed else 'FAIL'}{'' if e.required else ' (optional)'} {e.name}: {e.detail}")
                ok &= rep.passed
            print("config valid")
            return 0 if ok else 1
        if args.command == "figures":
            for p in emit_reference_figures(args.results_dir):
                print(p)
            return 0
        if args.command == "list":
            print("\n".join(bundled_configs()))
            return 0
    except ConfigError as exc:
        print(f"ConfigError: {exc}", file=sys.stderr)
        return 2
    except ReflectError as exc:
        extra = ""
        if isinstance(exc, SimulationError):
            extra = f" (path {exc.path_index}, t={exc.time})"
        print(f"{type(exc).__name__}: {exc}{extra}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
