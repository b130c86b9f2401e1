"""Config-driven experiment runner.

A config is a JSON object::

    {
      "schema_version": 1,
      "kind": "bck",
      "model": {"k": 1, "scale": 1.0},
      "numerics": {"dt0": 1e-3, "t_max": 1e4},
      "sampling": {"replicates": 10000, "master_seed": 7},
      "schedule": {"alpha": 2.0},
      "analysis": {"fit_window": [10, 1000], "points_per_decade": 8},
      "check": {"slope": -0.3333, "tolerance": 0.05},
      "output": "curve.csv"
    }

Sections that a kind does not use may be omitted.  Replicate ``i`` always
draws from ``derive_stream(master_seed, i)`` and results are merged in
replicate order, so the thread count never changes the output.
"""

from concurrent.futures import ThreadPoolExecutor
import copy
import csv
import io
import json
import math
import os
import subprocess
import time
from pathlib import Path

import numpy as np

from .gaussian import agreement_hyperplane, build_kernel, log_density_ratio, tv_distance
from .lookahead import (
    BlockSchedule,
    block_variances,
    bounded_horizon_survival_exact,
    build_E,
    lookahead_survival_exact,
    simulate_bounded_horizon,
    simulate_lookahead_paths,
    simulate_lookahead_scalar,
    _bounded_variances,
)
from .markovian import simulate_bck, simulate_mu_t
from .paths import derive_stream
from .survival import default_window, estimate_survival, tail_window, fit_rate, survival_from_counts, wilson_interval

__all__ = ["SCHEMA_VERSION", "KINDS", "ConfigError", "ExperimentConfig", "run_experiment", "report_json",
           "curve_csv", "default_threads"]

SCHEMA_VERSION = 1
KINDS = ("bck", "mu_t", "lookahead_scalar", "lookahead_paths", "bounded_horizon",
         "tv_table", "hyperplane_check")
THREADS_ENV = "KOLCOUPLE_THREADS"

_DEFAULTS = {
    "model": {"k": 1, "scale": 1.0},
    "numerics": {"dt0": 1e-3, "K": 1024, "grid_per_block": 32},
    "sampling": {"replicates": 1000, "master_seed": 0},
    "schedule": {"alpha": 2.0},
    "analysis": {"points_per_decade": 8},
}


class ConfigError(ValueError):
    """Invalid experiment config; ``errors`` lists every violated field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


class ExperimentConfig:
    """Validated experiment config.  ``raw`` keeps the input exactly as given."""

    def __init__(self, raw):
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a JSON object"])
        self.raw = copy.deepcopy(raw)
        merged = {}
        for sec, vals in _DEFAULTS.items():
            merged[sec] = dict(vals)
            merged[sec].update(raw.get(sec) or {})
        for sec in ("check",):
            merged[sec] = dict(raw.get(sec) or {})
        self.kind = raw.get("kind")
        self.output = raw.get("output")
        self.model = merged["model"]
        self.numerics = merged["numerics"]
        self.sampling = merged["sampling"]
        self.schedule = merged["schedule"]
        self.analysis = merged["analysis"]
        self.check = merged["check"]
        self._validate(raw)

    @classmethod
    def from_json(cls, text):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON: {exc}"]) from None
        return cls(raw)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError([f"cannot read {path}: {exc}"]) from None
        return cls.from_json(text)

    def with_replicates(self, n):
        raw = copy.deepcopy(self.raw)
        raw.setdefault("sampling", {})["replicates"] = n
        return ExperimentConfig(raw)

    # -- validation -----------------------------------------------------------

    def _validate(self, raw):
        errs = []
        if raw.get("schema_version") != SCHEMA_VERSION:
            errs.append(f"schema_version: expected {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
        if self.kind not in KINDS:
            errs.append(f"kind: must be one of {', '.join(KINDS)}, got {self.kind!r}")
        known = {"schema_version", "kind", "model", "numerics", "sampling", "schedule",
                 "analysis", "check", "output"}
        for key in sorted(set(raw) - known):
            errs.append(f"{key}: unknown top-level field")

        def need(cond, msg):
            if not cond:
                errs.append(msg)

        def is_int(v):
            return isinstance(v, int) and not isinstance(v, bool)

        def is_num(v):
            return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)

        k = self.model.get("k")
        need(is_int(k) and 0 <= k <= 20, f"model.k: integer in [0, 20] required, got {k!r}")
        n_rep = self.sampling.get("replicates")
        need(is_int(n_rep) and n_rep >= 1, f"sampling.replicates: positive integer required, got {n_rep!r}")
        seed = self.sampling.get("master_seed")
        need(is_int(seed) and 0 <= seed < 2**64, f"sampling.master_seed: integer in [0, 2^64) required, got {seed!r}")
        ppd = self.analysis.get("points_per_decade")
        need(is_int(ppd) and ppd >= 1, f"analysis.points_per_decade: positive integer required, got {ppd!r}")
        win = self.analysis.get("fit_window")
        if win is not None:
            need(isinstance(win, list) and len(win) == 2 and all(is_num(w) and w > 0 for w in win)
                 and win[0] < win[1], f"analysis.fit_window: [lo, hi] with 0 < lo < hi required, got {win!r}")
        for key in ("slope", "tolerance", "max_rel_error"):
            if key in self.check:
                need(is_num(self.check[key]), f"check.{key}: number required")
        if "slope" in self.check:
            need("tolerance" in self.check, "check.tolerance: required alongside check.slope")

        kind = self.kind
        dim = k + 1 if is_int(k) else None

        def vec(name):
            v = self.model.get(name)
            ok = isinstance(v, list) and all(is_num(c) for c in v) and (dim is None or len(v) == dim)
            need(ok, f"model.{name}: list of {dim} numbers required, got {v!r}")
            return v if ok else None

        if kind in ("bck", "mu_t"):
            need(k == 1, f"model.k: {kind} is defined for k = 1 only, got {k!r}")
            dt0 = self.numerics.get("dt0")
            need(is_num(dt0) and 0 < dt0 <= 0.1, f"numerics.dt0: number in (0, 0.1] required, got {dt0!r}")
        if kind == "bck":
            s = self.model.get("scale")
            need(is_num(s) and s != 0, f"model.scale: nonzero number required, got {s!r}")
            tm = self.numerics.get("t_max")
            need(is_num(tm) and tm > 1, f"numerics.t_max: number > 1 required, got {tm!r}")
        if kind == "mu_t":
            tg = self.numerics.get("target_t")
            need(isinstance(tg, list) and len(tg) > 0 and all(is_num(t) and t > 0 for t in tg),
                 f"numerics.target_t: nonempty list of positive numbers required, got {tg!r}")
        if kind in ("lookahead_scalar", "lookahead_paths", "bounded_horizon", "tv_table"):
            if "z" in self.model:
                z = vec("z")
            else:
                x1, x2 = vec("x1"), vec("x2")
                z = None if x1 is None or x2 is None else [a - b for a, b in zip(x1, x2)]
            if z is not None and kind != "lookahead_paths":
                need(any(c != 0 for c in z), "model.z: discrepancy must be nonzero")
        if kind in ("lookahead_scalar", "lookahead_paths"):
            a = self.schedule.get("alpha")
            need(is_num(a) and a > 1, f"schedule.alpha: number > 1 required, got {a!r}")
            nm = self.numerics.get("n_max")
            need(is_int(nm) and nm >= 1, f"numerics.n_max: positive integer required, got {nm!r}")
        if kind == "lookahead_paths":
            K = self.numerics.get("K")
            need(is_int(K) and dim is not None and K >= dim, f"numerics.K: integer >= k+1 required, got {K!r}")
            g = self.numerics.get("grid_per_block")
            need(is_int(g) and g >= 1, f"numerics.grid_per_block: positive integer required, got {g!r}")
        if kind == "bounded_horizon":
            need(is_int(k) and k >= 1, "model.k: bounded_horizon needs k >= 1")
            nm = self.numerics.get("n_max")
            need(is_int(nm) and nm >= 1, f"numerics.n_max: positive integer required, got {nm!r}")
        if kind == "tv_table":
            tg = self.numerics.get("T")
            need(isinstance(tg, list) and len(tg) >= 2 and all(is_num(t) and t > 0 for t in tg),
                 f"numerics.T: list of at least 2 positive times required, got {tg!r}")
        if kind == "hyperplane_check":
            n = self.numerics.get("pairs", 20)
            need(is_int(n) and n >= 1, f"numerics.pairs: positive integer required, got {n!r}")
        if errs:
            raise ConfigError(errs)

    # -- convenience ----------------------------------------------------------

    @property
    def replicates(self):
        return self.sampling["replicates"]

    @property
    def seed(self):
        return self.sampling["master_seed"]

    def z(self):
        if "z" in self.model:
            return np.asarray(self.model["z"], dtype=float)
        return np.asarray(self.model["x1"], float) - np.asarray(self.model["x2"], float)


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_replicates(fn, n, threads, chunk=256):
    """``[fn(i) for i in range(n)]`` computed over a thread pool, in order."""
    if threads <= 1 or n <= chunk:
        return [fn(i) for i in range(n)]
    spans = [range(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda r: [fn(i) for i in r], spans)
        return [x for part in parts for x in part]


def _log_grid(lo, hi, per_decade):
    n = int(round(math.log10(hi / lo) * per_decade))
    return np.logspace(math.log10(lo), math.log10(hi), max(n, 1) + 1)


def _curve_dict(curve, x_name="t"):
    return {
        x_name: [float(v) for v in curve.times],
        "survival": [None if math.isnan(v) else float(v) for v in curve.estimates],
        "ci_lo": [None if math.isnan(v) else float(v) for v in curve.ci_lo],
        "ci_hi": [None if math.isnan(v) else float(v) for v in curve.ci_hi],
        "n_at_risk": [int(v) for v in curve.n_at_risk],
    }


def _fit(cfg, curve, sparse=False):
    # geometric block ends give too few points per decade for the decade rule
    win = cfg.analysis.get("fit_window")
    try:
        window = tuple(win) if win else (tail_window(curve) if sparse else default_window(curve))
        slope, se = fit_rate(curve, window)
    except ValueError as exc:
        return {"error": str(exc)}
    return {"window": [float(window[0]), float(window[1])], "slope": slope, "stderr": se}


def _build_id():
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return __version__


# -- per-kind runners ---------------------------------------------------------

def _run_bck(cfg, threads):
    scale = float(cfg.model["scale"])
    dt0, t_max = float(cfg.numerics["dt0"]), float(cfg.numerics["t_max"])
    seed = cfg.seed
    outcomes = _map_replicates(
        lambda i: simulate_bck(scale, dt0, t_max, derive_stream(seed, i)), cfg.replicates, threads)
    t_min = float(cfg.numerics.get("t_min", scale * scale))
    curve = estimate_survival(outcomes, _log_grid(t_min, t_max, cfg.analysis["points_per_decade"]))
    ratios = [(o.half_cycle_times[1] - o.half_cycle_times[0]) / o.half_cycle_times[0]
              for o in outcomes if o.half_cycle_times.size >= 2]
    extra = {
        "coupled_fraction": float(np.mean([o.coupled for o in outcomes])),
        "half_cycle_ratio_median": float(np.median(ratios)) if ratios else None,
    }
    return curve, "t", _fit(cfg, curve), extra


def _run_mu_t(cfg, threads):
    dt0, seed, n = float(cfg.numerics["dt0"]), cfg.seed, cfg.replicates
    rows = []
    for j, target in enumerate(cfg.numerics["target_t"]):
        # targets get disjoint replicate ids so their samples are independent
        outs = _map_replicates(
            lambda i: simulate_mu_t(float(target), dt0, derive_stream(seed, j * n + i)), n, threads)
        late = np.array([(not o.coupled) or o.tau > target + 1 for o in outs], dtype=float)
        s1 = np.array([o.stage_one for o in outs])
        p = late.mean()
        rows.append({
            "target_t": float(target),
            "scaled_tail": float(target * p),
            "scaled_tail_se": float(target * math.sqrt(p * (1 - p) / n)),
            "p_stage_one_over_1": float(np.mean(s1[:, 0] > 1.0)),
            "p_v_over_2": float(np.mean(s1[:, 1] > 2.0)),
        })
    return None, None, None, {"targets": rows}


def _run_lookahead_scalar(cfg, threads):
    kernel = build_kernel(cfg.model["k"])
    z, alpha, n_max = cfg.z(), float(cfg.schedule["alpha"]), cfg.numerics["n_max"]
    var = block_variances(kernel, z, alpha, n_max)
    seed = cfg.seed
    blocks = _map_replicates(
        lambda i: simulate_lookahead_scalar(kernel, z, alpha, n_max, derive_stream(seed, i), variances=var),
        cfg.replicates, threads)
    curve = _block_curve(blocks, n_max, BlockSchedule(alpha).end(np.arange(1, n_max + 1)))
    extra = {"exact_survival": [float(v) for v in lookahead_survival_exact(kernel, z, alpha, n_max)]}
    return curve, "S_n", _fit(cfg, curve, sparse=True), extra


def _block_curve(blocks, n_max, ends):
    b = np.array([n if n is not None else n_max + 1 for n in blocks])
    survivors = (b[None, :] > np.arange(1, n_max + 1)[:, None]).sum(axis=1)
    curve = survival_from_counts(ends, survivors, len(blocks))
    return curve


def _run_lookahead_paths(cfg, threads):
    kernel = build_kernel(cfg.model["k"])
    alpha, n_max = float(cfg.schedule["alpha"]), cfg.numerics["n_max"]
    K, grid = cfg.numerics["K"], cfg.numerics["grid_per_block"]
    if "x1" in cfg.model:
        x1, x2 = np.asarray(cfg.model["x1"], float), np.asarray(cfg.model["x2"], float)
    else:
        x1, x2 = cfg.z(), np.zeros(kernel.dim)
    E = build_E(kernel, K)
    seed = cfg.seed
    results = _map_replicates(
        lambda i: simulate_lookahead_paths(kernel, x1, x2, alpha, K, n_max, grid, derive_stream(seed, i), E=E),
        cfg.replicates, threads)
    curve = _block_curve([r.coupled_block for r in results], n_max,
                         BlockSchedule(alpha).end(np.arange(1, n_max + 1)))
    gaps = [np.max(np.abs(r.F_path - r.F_scalar) / np.maximum(r.F_prior, r.F_scalar))
            for r in results if r.F_path.size]
    extra = {"max_relative_discrepancy_gap": float(max(gaps)) if gaps else 0.0}
    return curve, "S_n", _fit(cfg, curve, sparse=True), extra


def _run_bounded(cfg, threads):
    kernel = build_kernel(cfg.model["k"])
    z, n_max = cfg.z(), cfg.numerics["n_max"]
    var = _bounded_variances(kernel, z, n_max)
    seed = cfg.seed
    blocks = _map_replicates(
        lambda i: simulate_bounded_horizon(kernel, z, n_max, derive_stream(seed, i), variances=var),
        cfg.replicates, threads)
    curve = _block_curve(blocks, n_max, np.arange(1, n_max + 1, dtype=float))
    surv = int(curve.n_at_risk[-1])
    lo, hi = wilson_interval(surv, cfg.replicates, level=0.99)
    extra = {
        "final_survival": surv / cfg.replicates,
        "ci99": [float(lo), float(hi)],
        "exact_final_survival": float(bounded_horizon_survival_exact(kernel, z, n_max)[-1]),
    }
    return curve, "block_n", None, extra


def _run_tv_table(cfg, threads):
    kernel = build_kernel(cfg.model["k"])
    z = cfg.z()
    T = np.asarray(cfg.numerics["T"], dtype=float)
    tv = np.array([tv_distance(kernel, z, np.zeros_like(z), t) for t in T])
    slope = float(np.polyfit(np.log(T), np.log(tv), 1)[0])
    return None, None, {"slope": slope, "stderr": 0.0}, {"T": T.tolist(), "tv": tv.tolist()}


def _run_hyperplane(cfg, threads):
    kernel = build_kernel(cfg.model["k"])
    rng = derive_stream(cfg.seed, 0).generator
    worst = 0.0
    for _ in range(cfg.numerics.get("pairs", 20)):
        xp, xm = rng.standard_normal(kernel.dim), rng.standard_normal(kernel.dim)
        # below t = 1 the plane's points are not representable finely enough in
        # float64 for 1e-9 agreement once k >= 3 (start separation ~ t^-(k+1/2))
        t = float(np.exp(rng.uniform(0.0, 2.0)))
        hp = agreement_hyperplane(kernel, xp, xm, t)
        for _ in range(10):
            # draw at the natural scale of the time-t law, then project onto the plane
            w = np.sqrt(t) * t ** np.arange(kernel.dim) * (kernel.L @ rng.standard_normal(kernel.dim))
            w = hp.offset + w - (w @ hp.normal) * hp.normal
            worst = max(worst, -math.expm1(-abs(log_density_ratio(kernel, xp, xm, t, w))))
    return None, None, None, {"max_rel_error": worst}


_RUNNERS = {
    "bck": _run_bck,
    "mu_t": _run_mu_t,
    "lookahead_scalar": _run_lookahead_scalar,
    "lookahead_paths": _run_lookahead_paths,
    "bounded_horizon": _run_bounded,
    "tv_table": _run_tv_table,
    "hyperplane_check": _run_hyperplane,
}


def _evaluate_checks(cfg, fit, extra):
    checks = []
    c = cfg.check
    if "slope" in c:
        ok = fit is not None and "slope" in fit and abs(fit["slope"] - c["slope"]) <= c["tolerance"]
        checks.append({"name": "slope", "passed": bool(ok),
                       "detail": f"fitted {fit.get('slope') if fit else None} vs {c['slope']} +- {c['tolerance']}"})
    if c.get("ci_excludes_zero") and "ci99" in extra:
        checks.append({"name": "ci_excludes_zero", "passed": extra["ci99"][0] > 0,
                       "detail": f"99% CI {extra['ci99']}"})
    if "max_rel_error" in c and "max_rel_error" in extra:
        checks.append({"name": "max_rel_error", "passed": extra["max_rel_error"] <= c["max_rel_error"],
                       "detail": f"{extra['max_rel_error']:.3g} <= {c['max_rel_error']}"})
    return checks


def run_experiment(config, parallelism=None):
    """Run ``config`` and return the report as a dict.

    The ``curve`` entry (and ``curve_csv``) depend only on the config, never on
    ``parallelism``.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig(config)
    threads = default_threads() if parallelism is None else max(1, int(parallelism))
    start = time.perf_counter()
    curve, x_name, fit, extra = _RUNNERS[cfg.kind](cfg, threads)
    report = {
        "config": cfg.raw,
        "build": _build_id(),
        "wall_time_s": time.perf_counter() - start,
        "threads": threads,
        "curve": _curve_dict(curve, x_name) if curve is not None else None,
        "fit": fit,
        "results": extra,
    }
    report["checks"] = _evaluate_checks(cfg, fit, extra)
    report["_curve_obj"] = curve
    report["_x_name"] = x_name
    return report


def curve_csv(report):
    """CSV text of the report's curve, formatted at 17 significant digits."""
    curve, x_name = report.get("_curve_obj"), report.get("_x_name")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fmt = lambda v: "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.17g}"
    if curve is None:
        rows = report["results"].get("targets")
        if rows:
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([fmt(v) for v in r.values()])
        return buf.getvalue()
    if x_name == "t":
        w.writerow(["t", "survival", "ci_lo", "ci_hi", "n_at_risk"])
        for t, s, lo, hi, n in curve.rows():
            w.writerow([fmt(t), fmt(s), fmt(lo), fmt(hi), int(n)])
    else:
        w.writerow(["block_n", "S_n", "survival", "ci_lo", "ci_hi"])
        for i, (t, s, lo, hi, _) in enumerate(curve.rows(), start=1):
            w.writerow([i, fmt(t), fmt(s), fmt(lo), fmt(hi)])
    return buf.getvalue()


def report_json(report):
    public = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(public, indent=2, sort_keys=False, default=float)
