"""Command line: ``cyclicmix {verify,cutoff,couple,oracle}``.

Exit status is 0 on success, 1 when a verification check fails and 2 for
configuration, usage or capacity errors.  Nothing is written when the
inputs are rejected.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import re
import sys
from itertools import product
from pathlib import Path

import numpy as np

from .chain import (
    BasketPartition,
    ChainParams,
    Configuration,
    CountVector,
    all_count_vectors,
    basket_counts,
    basket_flow_probabilities,
    proportion_kernel_row,
)
from .couplings import (
    active_basket,
    basketwise_table,
    coordinatewise_table,
    l1_change_law,
    marginal_residual,
    moments,
    semi_coordinatewise_table,
    semi_sync_table,
)
from .exact import (
    CapacityError,
    MAX_ORACLE_N,
    brute_force_oracle,
    build_lumped_kernel,
    cutoff_curve,
    drift_identity_check,
    mean_and_variance,
    mixing_times,
    monochromatic_counts,
    stationarity_residual,
    stationary_counts,
)
from .experiments import (
    ExperimentConfig,
    measure_basket_coalescence,
    measure_excursion_exit,
    measure_l2_trajectory,
    measure_overall,
    measure_sync_coalescence,
    measure_T1,
    measure_variance_scaling,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def fmt(x) -> str:
    """Floats with 17 significant digits; everything else via ``str``."""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable({"schema_version": SCHEMA_VERSION, **obj}), indent=2, sort_keys=False) + "\n"


def to_csv(rows: list[dict]) -> str:
    """CSV text with a mandatory header row taken from the first row's keys."""
    buf = io.StringIO()
    if not rows:
        return ""
    writer = csv.writer(buf, lineterminator="\n")
    header = list(rows[0])
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(row[k]) for k in header])
    return buf.getvalue()


# ------------------------------------------------------------------ verify


FAULT_TARGETS = ("l2-drift-identity",)
EXHAUSTIVE_PAIRS = 20_000  # all count-vector pairs up to this many, else a seeded sample
SAMPLED_PAIRS = 2_000


def _check(name, n, residual, tolerance, states):
    return {"name": name, "n": n, "residual": float(residual), "tolerance": tolerance,
            "states": states, "passed": bool(residual <= tolerance)}


def _random_basket_pairs(n, count, rng):
    """Pairs of configurations with equal counts, and a random partition."""
    for _ in range(count):
        x = rng.integers(0, 3, size=n)
        part = BasketPartition(tuple(int(b) for b in rng.integers(0, 3, size=n)))
        y = rng.permutation(x)
        yield Configuration(tuple(int(c) for c in x)), Configuration(tuple(int(c) for c in y)), part


def verify_suite(ns, fault: str | None = None, seed: int = 0) -> list[dict]:
    """Exhaustive identity checks; ``fault`` perturbs one kernel entry by 1e-6 first."""
    checks = []
    rng = np.random.default_rng(seed)
    for n in ns:
        kernel = build_lumped_kernel(ChainParams(n, 0.5))
        if fault == "l2-drift-identity":
            kernel = kernel.perturbed(monochromatic_counts(n), 1, 1e-6)  # a move, not the hold
        states = all_count_vectors(n)
        drift = max(drift_identity_check(cv, kernel).residual for cv in states)
        checks.append(_check("l2-drift-identity", n, drift, 1e-13, len(states)))
        row_err = max(abs(sum(p for _, p in kernel.row(cv)) - 1) for cv in states)
        checks.append(_check("kernel-stochastic", n, row_err, 1e-14, len(states)))
        checks.append(_check("multinomial-stationarity", n, stationarity_residual(n, kernel), 1e-10, len(states)))
        _, var = mean_and_variance(stationary_counts(n))
        checks.append(_check("stationary-variance", n, abs(var - 2 / (3 * n)), 1e-12, len(states)))

        if len(states) ** 2 <= EXHAUSTIVE_PAIRS:
            pairs = [(a, b) for a in states for b in states]
        else:
            picks = rng.integers(len(states), size=(SAMPLED_PAIRS, 2))
            pairs = [(states[i], states[j]) for i, j in picks]
        marg = 0.0
        sync_excess = 0.0
        sc_excess = 0.0
        for a, b in pairs:
            sync = semi_sync_table(a, b)
            sc = semi_coordinatewise_table(a, b)
            marg = max(marg, marginal_residual(sync, a, b), marginal_residual(sc, a, b),
                       *(marginal_residual(coordinatewise_table(a, b, i), a, b) for i in range(3)))
            dist = sum(abs(x - y) for x, y in zip(a, b))
            mean, _ = moments(l1_change_law(a, b, sync))
            sync_excess = max(sync_excess, mean + dist / (2 * n))
            if dist >= 10:
                sc_excess = max(sc_excess, moments(l1_change_law(a, b, sc))[0])
        checks.append(_check("coupling-marginals", n, marg, 1e-13, len(pairs)))
        checks.append(_check("semi-sync-contraction", n, max(0.0, sync_excess), 1e-13, len(pairs)))
        checks.append(_check("semi-coordinatewise-supermartingale", n, max(0.0, sc_excess), 1e-13, len(pairs)))

        bmarg = 0.0
        flow = 0.0
        count = 0
        for x, y, part in _random_basket_pairs(n, 50, rng):
            bc, bc2 = basket_counts(x, part), basket_counts(y, part)
            for m in range(active_basket(bc, bc2) + 1):
                bmarg = max(bmarg, marginal_residual(basketwise_table(bc, bc2, m), bc, bc2))
            for m, k in product(range(3), range(3)):
                if part.sizes[m]:
                    enum, closed = basket_flow_probabilities(x, part, m, k)
                    flow = max(flow, max(abs(e - c) for e, c in zip(enum, closed)))
            count += 1
        checks.append(_check("basketwise-marginals", n, bmarg, 1e-13, count))
        checks.append(_check("basket-flow-probabilities", n, flow, 1e-13, count))
    return checks


def cmd_verify(args) -> int:
    ns = args.n or [6, 15, 30]
    checks = verify_suite(ns, fault=args.inject_fault, seed=args.seed or 0)
    failed = [c["name"] for c in checks if not c["passed"]]
    report = {"command": "verify", "scope": ns, "passed": not failed,
              "failed": sorted(set(failed)), "checks": checks}
    text = dumps(report) if args.format != "csv" else to_csv(checks)
    _emit(args.out, {"verify_report." + ("csv" if args.format == "csv" else "json"): text}, text)
    for c in checks:
        if not c["passed"]:
            print(f"FAILED {c['name']} at n={c['n']}: residual {c['residual']:.3e} > {c['tolerance']:g}",
                  file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


# ------------------------------------------------------------------ cutoff


def cmd_cutoff(args) -> int:
    ns = args.n or [64, 128, 256, 512]
    gammas = args.gamma if args.gamma is not None else [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]
    eps = args.eps or [0.1, 0.25, 0.9]
    p = args.p if args.p is not None else 0.5
    try:
        for n in ns:
            build_lumped_kernel(ChainParams(n, p), max_states=args.max_states)
        curve = [{"n": n, "gamma": g, "t": t, "tv": d} for n, g, t, d in cutoff_curve(ns, gammas, p)]
        mix = []
        for n in ns:
            params = ChainParams(n, p)
            found = mixing_times(monochromatic_counts(n), params, eps)
            for e in eps:
                mix.append({"n": n, "eps": e, "t_mix": found[e],
                            "t_mix_normalized": found[e] * 3 * p / (n * math.log(n))})
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.format == "json":
        text = dumps({"command": "cutoff", "p": p, "curve": curve, "mixing": mix})
        _emit(args.out, {"cutoff.json": text}, text)
    else:
        a, b = to_csv(curve), to_csv(mix)
        _emit(args.out, {"cutoff_curve.csv": a, "mixing_times.csv": b}, a + "\n" + b)
    return EXIT_OK


# ------------------------------------------------------------------ oracle


def cmd_oracle(args) -> int:
    n = (args.n or [4])[0]
    if n > MAX_ORACLE_N or n < 1:
        print(f"capacity error: the brute-force oracle needs 1 <= n <= {MAX_ORACLE_N}, got n={n}", file=sys.stderr)
        return EXIT_CONFIG
    times = args.t or [0, 1, 2, 5, 10, 20]
    p = args.p if args.p is not None else 0.5
    report = brute_force_oracle(ChainParams(n, p), times)
    rows = [{"t": t, "tv_full_mono": a, "tv_lumped": b, "tv_full_max": c} for t, a, b, c in report.rows()]
    if args.format == "json":
        text = dumps({"command": "oracle", "n": n, "p": p, "max_residual": report.max_residual, "rows": rows})
    else:
        text = to_csv(rows)
    _emit(args.out, {"oracle." + ("json" if args.format == "json" else "csv"): text}, text)
    return EXIT_OK if report.max_residual <= 1e-9 else EXIT_FAILED


# ------------------------------------------------------------------ couple


EXPERIMENTS = ("T1", "sync", "basket", "overall", "excursion", "l2", "variance")
REQUIRED_KEYS = ("experiment", "n", "reps", "seed")
CONFIG_KEYS = {
    "experiment": str, "n": "ints", "p": float, "reps": int, "seed": int, "gamma": "floats",
    "log_horizon": float, "samples": int, "r": "floats", "r0": float, "rho": float, "r1": float,
    "start": "ints", "start2": "ints", "schedule": "floats", "threads": int, "stationary": "bool",
}
SECTION = "job"


def _key_lines(text: str) -> dict[str, int]:
    lines = {}
    for k, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*([A-Za-z0-9_]+)\s*[=:]", line)
        if m:
            lines.setdefault(m.group(1).lower(), k)
    return lines


def _convert(key, kind, raw, where):
    try:
        if kind == "ints":
            return [int(x) for x in re.split(r"[,\s]+", raw.strip()) if x]
        if kind == "floats":
            return [float(x) for x in re.split(r"[,\s]+", raw.strip()) if x]
        if kind == "bool":
            if raw.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.strip().lower() in ("true", "1", "yes")
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: bad value {raw!r} for '{key}'") from None


def parse_config(path: str) -> dict:
    """``key = value`` lines (``#`` comments), optionally under one ``[job]`` header.

    Unknown keys, duplicates and malformed values are rejected with the
    offending line number.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    first = next((ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")), "")
    shifted = 0 if first.startswith("[") else 1
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(f"[{SECTION}]\n" * shifted + text, source=path)
    except configparser.Error as exc:
        msg = re.sub(r"\[line\s+(\d+)\]", lambda m: f"line {int(m.group(1)) - shifted}", str(exc))
        raise ConfigError(msg) from None
    sections = parser.sections()
    if len(sections) != 1:
        raise ConfigError(f"{path}: expected a single section, found {sections}")
    lines = _key_lines(text)
    out = {}
    for key, raw in parser[sections[0]].items():
        where = f"{path}:{lines.get(key, '?')}"
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{where}: unknown key '{key}'")
        out[key] = _convert(key, CONFIG_KEYS[key], raw, where)
    return out


def _overrides(args) -> dict:
    out = {}
    for key in ("n", "reps", "seed", "p", "gamma", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if args.horizon is not None:
        out["log_horizon"] = args.horizon
    if args.r is not None:
        out["r"] = args.r
    return out


def build_job(args) -> tuple[str, ExperimentConfig, bool]:
    values = parse_config(args.config) if args.config else {}
    values.update(_overrides(args))
    if args.experiment is not None:
        values["experiment"] = args.experiment
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required field '{missing[0]}'")
    kind = values.pop("experiment")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{kind}', expected one of {', '.join(EXPERIMENTS)}")
    stationary = values.pop("stationary", False)
    if "threads" not in values:
        values["threads"] = os.cpu_count() or 1
    for key in ("start", "start2"):
        if key in values:
            values[key] = tuple(values[key])
    if "schedule" in values:
        values["schedule"] = tuple(values["schedule"])
    try:
        cfg = ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from None
    return kind, cfg, stationary


def _freq_summary(success: dict) -> dict:
    return {f"{g:g}": s.as_dict() for g, s in success.items()}


def run_job(kind: str, cfg: ExperimentConfig, stationary: bool = False) -> tuple[list[dict], dict]:
    """Per-replication (or per-time) rows and a summary dict for one experiment."""
    summary = {"experiment": kind, "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__ if k != "threads"}}
    if kind == "T1":
        res = measure_T1(cfg)
        rows = [{"rep": k, "t1": a, "t2": b} for k, (a, b) in enumerate(zip(res.times.t1, res.times.t2))]
        summary.update(horizon=res.times.horizon, steps={f"{g:g}": int(round(g * res.n)) for g in res.gammas},
                       success=_freq_summary(res.success))
    elif kind == "sync":
        res = measure_sync_coalescence(cfg)
        rows = [{"rep": k, "t_coalesce": t} for k, t in enumerate(res.times.t1)]
        summary.update(horizon=res.times.horizon, steps={f"{g:g}": int(round(g * res.n)) for g in res.gammas},
                       success=_freq_summary(res.success))
    elif kind == "basket":
        rows, per_n = [], []
        for res in measure_basket_coalescence(cfg):
            cols = res.times.columns()
            for k in range(cfg.reps):
                rows.append({"n": res.n, "rep": k, **{c: v[k] for c, v in cols.items()}})
            per_n.append({"n": res.n, "horizon": res.times.horizon,
                          "steps": {f"{g:g}": int(round(g * res.n)) for g in res.gammas},
                          "success": _freq_summary(res.success), "exit": res.extra["exit"].as_dict()})
        summary["results"] = per_n
    elif kind == "overall":
        res = measure_overall(cfg)
        rows = res.rows()
        summary.update(success=res.success.as_dict(), attribution={str(k): v for k, v in res.attribution.items()},
                       boundaries=res.runs[0].boundaries if res.runs else None)
    elif kind == "excursion":
        est = measure_excursion_exit(cfg)
        rows = [{"r": r, **s.as_dict()} for r, s in est.items()]
        summary["estimates"] = {f"{r:g}": s.as_dict() for r, s in est.items()}
    elif kind == "l2":
        tr = measure_l2_trajectory(cfg, stationary=stationary)
        rows = [{"t": int(t), "mean": m, "se": s, "exact": (e if tr.exact is not None else "")}
                for t, m, s, e in zip(tr.times, tr.mean, tr.se, tr.exact if tr.exact is not None else tr.mean)]
        summary["within_4se"] = float(tr.within().mean()) if tr.exact is not None else None
    else:
        res = measure_variance_scaling(cfg, stationary=stationary)
        rows = [{"n": r.n, "sup_scaled_var": r.sup_scaled_var, "se": r.se, "t_at_sup": r.t_at_sup} for r in res]
        summary["rows"] = rows
    return rows, summary


def cmd_couple(args) -> int:
    try:
        kind, cfg, stationary = build_job(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rows, summary = run_job(kind, cfg, stationary)
    except (ValueError, RuntimeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    table, js = to_csv(rows), dumps({"command": "couple", **summary})
    _emit(args.out, {"replications.csv": table, "summary.json": js}, js if args.format == "json" else table)
    return EXIT_OK


# ------------------------------------------------------------------ plumbing


def _emit(out: str | None, files: dict[str, str], fallback: str):
    if out is None:
        sys.stdout.write(fallback)
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (path / name).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclicmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--n", type=int, nargs="+")
        p.add_argument("--p", type=float)
        p.add_argument("--out", help="output directory; stdout if omitted")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--threads", type=int)
        p.add_argument("--seed", type=int)
        return p

    v = common(sub.add_parser("verify", help="exhaustive identity and coupling checks"))
    v.add_argument("--inject-fault", choices=FAULT_TARGETS, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify, format="json")

    c = common(sub.add_parser("cutoff", help="exact cutoff curve and mixing times"))
    c.add_argument("--gamma", type=float, nargs="+")
    c.add_argument("--eps", type=float, nargs="+")
    c.add_argument("--max-states", type=int, default=2_000_000)
    c.set_defaults(func=cmd_cutoff)

    k = common(sub.add_parser("couple", help="Monte Carlo coupling experiments"))
    k.add_argument("--config")
    k.add_argument("--experiment", choices=EXPERIMENTS)
    k.add_argument("--reps", type=int)
    k.add_argument("--gamma", type=float, nargs="+", help="horizons in units of n")
    k.add_argument("--horizon", type=float, help="trajectory horizon in units of n ln n")
    k.add_argument("--r", type=float, nargs="+")
    k.add_argument("--eps", type=float, nargs="+", help=argparse.SUPPRESS)
    k.set_defaults(func=cmd_couple)

    o = common(sub.add_parser("oracle", help="full-chain brute force against the lumped chain (n <= 6)"))
    o.add_argument("--t", type=int, nargs="+")
    o.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
