"""Command-line entry point ``kolcouple``.

Exit codes: 0 success, 2 config error, 3 a ``--check`` failed.
"""

import argparse
import json
import sys
from pathlib import Path

from .gaussian import build_kernel, kernel_to_json
from .harness import SCHEMA_VERSION, ConfigError, ExperimentConfig, curve_csv, report_json, run_experiment
from .markovian import area_density, area_tail

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _common(p):
    p.add_argument("--config", help="JSON experiment config; flags given explicitly override it")
    p.add_argument("--reps-override", type=int, help="replace sampling.replicates")
    p.add_argument("--threads", type=int, help="worker threads (default $KOLCOUPLE_THREADS or 1)")
    p.add_argument("--out", help="curve CSV path; the JSON report goes next to it")
    p.add_argument("--check", action="store_true", help="exit 3 if any configured check fails")


def _parser():
    ap = argparse.ArgumentParser(prog="kolcouple", description="Coupling simulations for Kolmogorov diffusions.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a config file")
    _common(p)

    p = sub.add_parser("simulate-bck", help="reflection/synchronous half-cycle coupling (k = 1)")
    p.add_argument("--scale", type=float)
    p.add_argument("--dt0", type=float)
    p.add_argument("--tmax", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    _common(p)

    p = sub.add_parser("simulate-mu-t", help="per-target coupling from (U, V) = (0, 1)")
    p.add_argument("--targets", type=_floats, help="target times, comma separated")
    p.add_argument("--dt0", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    _common(p)

    p = sub.add_parser("simulate-lookahead", help="finite look-ahead coupling")
    p.add_argument("--k", type=int)
    p.add_argument("--z", type=_floats)
    p.add_argument("--alpha", type=float)
    p.add_argument("--nmax", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("scalar", "paths"), default="scalar")
    p.add_argument("--K", type=int, dest="K_modes")
    p.add_argument("--grid-per-block", type=int)
    _common(p)

    p = sub.add_parser("bounded-horizon", help="unit-block look-ahead coupling")
    p.add_argument("--k", type=int)
    p.add_argument("--z", type=_floats)
    p.add_argument("--nmax", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    _common(p)

    p = sub.add_parser("tv-table", help="closed-form total variation distances")
    p.add_argument("--k", type=int)
    p.add_argument("--z", type=_floats)
    p.add_argument("--T", type=_floats, dest="T_grid")
    _common(p)

    p = sub.add_parser("hyperplane-check", help="density agreement on the agreement hyperplane")
    p.add_argument("--k", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--seed", type=int)
    _common(p)

    p = sub.add_parser("oracle-area", help="Brownian area density and tail")
    p.add_argument("--a", type=float, required=True)
    p.add_argument("--t", type=float, required=True)

    p = sub.add_parser("kernel-dump", help="print H, V, L as JSON")
    p.add_argument("--k", type=int, required=True)
    return ap


_KIND = {
    "simulate-bck": "bck",
    "simulate-mu-t": "mu_t",
    "bounded-horizon": "bounded_horizon",
    "tv-table": "tv_table",
    "hyperplane-check": "hyperplane_check",
}

# (flag attribute, config section, config key)
_FLAG_MAP = [
    ("scale", "model", "scale"), ("k", "model", "k"), ("z", "model", "z"),
    ("dt0", "numerics", "dt0"), ("tmax", "numerics", "t_max"), ("targets", "numerics", "target_t"),
    ("nmax", "numerics", "n_max"), ("K_modes", "numerics", "K"), ("grid_per_block", "numerics", "grid_per_block"),
    ("T_grid", "numerics", "T"), ("pairs", "numerics", "pairs"),
    ("alpha", "schedule", "alpha"), ("reps", "sampling", "replicates"), ("seed", "sampling", "master_seed"),
]


def _raw_config(args):
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot load {args.config}: {exc}"]) from None
    elif args.command == "run":
        raise ConfigError(["--config is required for 'run'"])
    else:
        raw = {"schema_version": SCHEMA_VERSION}
    if args.command == "simulate-lookahead":
        raw["kind"] = "lookahead_paths" if args.mode == "paths" else "lookahead_scalar"
    elif args.command in _KIND:
        raw["kind"] = _KIND[args.command]
    for attr, sec, key in _FLAG_MAP:
        val = getattr(args, attr, None)
        if val is not None:
            raw.setdefault(sec, {})[key] = val
    if args.reps_override is not None:
        raw.setdefault("sampling", {})["replicates"] = args.reps_override
    if args.out:
        raw["output"] = args.out
    return raw


def _emit(report, out):
    text = report_json(report)
    csv_text = curve_csv(report)
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(csv_text)
        path.with_suffix(".report.json").write_text(text + "\n")
        print(f"wrote {path} and {path.with_suffix('.report.json')}")
    else:
        print(text)


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "oracle-area":
        try:
            d, s = area_density(args.a, args.t), area_tail(args.a, args.t)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"density {d:.15e}\ntail    {s:.15e}")
        return EXIT_OK
    if args.command == "kernel-dump":
        try:
            print(kernel_to_json(build_kernel(args.k)))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    try:
        cfg = ExperimentConfig(_raw_config(args))
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    report = run_experiment(cfg, args.threads)
    _emit(report, args.out or cfg.output)
    failed = [c for c in report["checks"] if not c["passed"]]
    for c in report["checks"]:
        print(f"check {c['name']}: {'PASS' if c['passed'] else 'FAIL'} ({c['detail']})", file=sys.stderr)
    if args.check and failed:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
