"""Monte Carlo harness: replications, seed streams, summary statistics.

Every replication draws from its own generator, derived from the master
seed and the replication index alone (:func:`replication_rng`), so results
do not depend on scheduling or on how many worker processes are used.
Aggregation always runs in replication order.

Hitting times that are not observed within the horizon are censored and
stored as ``-1``; they count as failures in every reported frequency.
"""
from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .chain import (
    BasketCounts,
    BasketPartition,
    Configuration,
    CountVector,
    basket_counts,
    count_path,
    in_region,
    in_upper_region,
)
from .couplings import (
    OVERALL_EVENTS,
    OverallSchedule,
    overall_coupling_run,
    run_basketwise,
    run_semi_coordinatewise,
    run_semi_sync,
)
from .exact import closed_form_l2

CENSORED = -1
MAX_STEPS = 50_000_000
NORMAL_Z = 1.959963984540054  # two-sided 95%


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Inputs shared by the measurements; each one reads the fields it needs.

    ``gamma`` lists horizons in units of ``n``; ``log_horizon`` is a horizon
    in units of ``n ln n``.  ``start`` / ``start2`` are count vectors (for a
    single ``n``); ``None`` means the measurement's default start.
    """

    n: tuple = (100,)
    p: float = 0.5
    reps: int = 1000
    seed: int = 0
    gamma: tuple = (10.0,)
    log_horizon: float = 3.0
    samples: int = 40
    r: tuple = (10.0,)
    r0: float = 2.0
    rho: float = 0.2
    r1: float = 3.0
    start: tuple | None = None
    start2: tuple | None = None
    schedule: tuple = (2.0, 10.0, 10.0, 30.0)
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(x) for x in _as_tuple(self.n)))
        object.__setattr__(self, "gamma", tuple(float(x) for x in _as_tuple(self.gamma)))
        object.__setattr__(self, "r", tuple(float(x) for x in _as_tuple(self.r)))
        object.__setattr__(self, "schedule", tuple(float(x) for x in self.schedule))
        for name in ("start", "start2"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, CountVector(*(int(x) for x in val)))
        if self.reps < 1:
            raise ValueError(f"reps must be at least 1, got {self.reps}")
        if not self.n or min(self.n) < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if not self.gamma or min(self.gamma) <= 0 or self.log_horizon <= 0:
            raise ValueError("horizons must be positive")
        if not self.r or min(self.r) <= 0 or self.r0 <= 0 or self.rho <= 0 or self.r1 <= 0:
            raise ValueError("thresholds must be positive")
        if self.samples < 1 or self.threads < 1:
            raise ValueError("samples and threads must be at least 1")
        if len(self.schedule) != 4:
            raise ValueError("schedule needs four phase lengths")
        OverallSchedule(*self.schedule)
        for name in ("start", "start2"):
            val = getattr(self, name)
            if val is not None and val.n not in self.n:
                raise ValueError(f"{name} {tuple(val)} does not sum to any n in {self.n}")


def _as_tuple(x):
    return tuple(x) if isinstance(x, (list, tuple)) else (x,)


# ------------------------------------------------------------------ statistics


@dataclass(frozen=True)
class RunStats:
    """Summary of one quantity over replications.

    For frequencies ``mean`` is the success fraction and ``ci`` the normal
    approximation ``mean +- 1.96 * sqrt(mean (1 - mean) / count)`` clipped to
    [0, 1]; for samples ``ci`` is ``mean +- 1.96 * se``.
    """

    count: int
    mean: float
    variance: float
    se: float
    ci: tuple
    quantiles: dict = field(default_factory=dict)
    successes: int | None = None

    @classmethod
    def of(cls, values, probs=(0.1, 0.5, 0.9)) -> "RunStats":
        x = np.asarray(values, dtype=float)
        var = float(x.var(ddof=1)) if x.size > 1 else 0.0
        se = math.sqrt(var / x.size)
        mean = float(x.mean())
        q = {pr: float(np.quantile(x, pr, method="inverted_cdf")) for pr in probs}
        return cls(int(x.size), mean, var, se, (mean - NORMAL_Z * se, mean + NORMAL_Z * se), q)

    @classmethod
    def frequency(cls, flags) -> "RunStats":
        flags = np.asarray(flags, dtype=bool)
        k, m = int(flags.sum()), int(flags.size)
        f = k / m
        var = f * (1 - f)
        se = math.sqrt(var / m)
        ci = (max(0.0, f - NORMAL_Z * se), min(1.0, f + NORMAL_Z * se))
        return cls(m, f, var, se, ci, {}, k)

    def as_dict(self) -> dict:
        out = {"count": self.count, "mean": self.mean, "variance": self.variance, "se": self.se,
               "ci_low": self.ci[0], "ci_high": self.ci[1], "ci_method": "normal"}
        if self.successes is not None:
            out["successes"] = self.successes
        for pr, v in self.quantiles.items():
            out[f"q{pr:g}"] = v
        return out


def hitting_stats(times, horizon: int) -> RunStats:
    """Quantiles of hitting times with censored runs placed at infinity."""
    x = np.asarray(times, dtype=float)
    x[x < 0] = np.inf
    q = {pr: float(np.quantile(x, pr, method="inverted_cdf")) for pr in (0.1, 0.5, 0.9)}
    seen = x[np.isfinite(x)]
    base = RunStats.of(seen) if seen.size else RunStats(0, math.nan, math.nan, math.nan, (math.nan, math.nan))
    return RunStats(base.count, base.mean, base.variance, base.se, base.ci, q)


@dataclass
class HittingTimes:
    """Per-replication hitting times; ``-1`` marks a time not observed in the horizon."""

    horizon: int
    t1: np.ndarray | None = None
    t2: np.ndarray | None = None
    tau: np.ndarray | None = None
    tau_star: np.ndarray | None = None

    def columns(self) -> dict:
        out = {}
        for name in ("t1", "t2", "tau_star"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        if self.tau is not None:
            for m in range(3):
                out[f"tau{m + 1}"] = self.tau[:, m]
        return out


# ------------------------------------------------------------------ seeds and replication


def replication_rng(seed: int, rep: int, stream: int = 0) -> np.random.Generator:
    """Generator for replication ``rep``: ``SeedSequence(seed, spawn_key=(stream, rep))``.

    ``stream`` separates independent uses of the same replication index
    (e.g. different ``n``).
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, rep))))


def replicate(fn: Callable, reps: int, threads: int = 1) -> list:
    """``[fn(0), ..., fn(reps - 1)]``, optionally across worker processes.

    ``fn`` must be picklable when ``threads > 1``; order is always by index.
    """
    if threads <= 1 or reps < 2:
        return [fn(k) for k in range(reps)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(reps), chunksize=max(1, reps // (4 * threads))))


# ------------------------------------------------------------------ starts


def monochromatic_start(n: int) -> np.ndarray:
    return np.zeros(n, dtype=np.int64)


def stationary_start(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 3, size=n)


def fixed_count_start(cv: Sequence[int]) -> np.ndarray:
    return np.asarray(Configuration.from_counts(CountVector(*cv)).colors, dtype=np.int64)


def rejection_start(n: int, accept: Callable[[CountVector], bool], rng: np.random.Generator,
                    max_tries: int = 10_000) -> CountVector:
    """Counts of a uniform configuration conditioned on ``accept``."""
    for _ in range(max_tries):
        cv = CountVector(*np.bincount(rng.integers(0, 3, size=n), minlength=3).tolist())
        if accept(cv):
            return cv
    raise RuntimeError(f"no acceptable start after {max_tries} draws at n={n}")


def balanced_basket_counts(part: BasketPartition) -> BasketCounts:
    """Each basket split as evenly as possible, remainders rotated so columns balance."""
    rows = []
    for m, size in enumerate(part.sizes):
        q, rem = divmod(size, 3)
        rows.append(tuple(q + (1 if (k - m) % 3 < rem else 0) for k in range(3)))
    return BasketCounts(tuple(rows))


def one_swap_pair(bc: BasketCounts) -> BasketCounts:
    """Basket counts after swapping a color-1 vertex of basket 1 with a color-2 vertex of basket 2.

    The global counts are unchanged and rows 1 and 2 move by one vertex each.
    """
    rows = [list(r) for r in bc.counts]
    if rows[0][0] == 0 or rows[1][1] == 0:
        raise ValueError(f"no vertices to swap in {bc.counts}")
    rows[0][0] -= 1
    rows[0][1] += 1
    rows[1][1] -= 1
    rows[1][0] += 1
    return BasketCounts(tuple(tuple(r) for r in rows))


def _steps(n: int, gamma: float) -> int:
    steps = int(round(gamma * n))
    if steps > MAX_STEPS:
        raise ValueError(f"horizon of {steps} steps exceeds the cap of {MAX_STEPS}")
    return steps


def _log_steps(n: int, mult: float) -> int:
    return _steps(n, mult * math.log(n))


# ------------------------------------------------------------------ l2 trajectory and variance


@dataclass(frozen=True)
class Trajectory:
    n: int
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    exact: np.ndarray | None

    def within(self, k: float = 4.0) -> np.ndarray:
        """Per-time flags ``|mean - exact| <= k * se`` (exact agreement counts when se is 0)."""
        if self.exact is None:
            raise ValueError("no exact reference available")
        return np.abs(self.mean - self.exact) <= k * self.se + 1e-15


def _sample_times(steps: int, samples: int) -> np.ndarray:
    return np.unique(np.linspace(0, steps, samples + 1).round().astype(np.int64))


def _path_rep(rep: int, *, n, steps, p, seed, stationary):
    rng = replication_rng(seed, rep, stream=n)
    start = stationary_start(n, rng) if stationary else monochromatic_start(n)
    return count_path(start, steps, p, rng)


def _paths(cfg: ExperimentConfig, n: int, steps: int, stationary: bool, times: np.ndarray) -> np.ndarray:
    fn = partial(_path_rep, n=n, steps=steps, p=cfg.p, seed=cfg.seed, stationary=stationary)
    return np.stack([path[times] for path in replicate(fn, cfg.reps, cfg.threads)])


def measure_l2_trajectory(cfg: ExperimentConfig, stationary: bool = False) -> Trajectory:
    """Monte Carlo mean of ``||S_t - e||_2^2`` from a monochromatic (or stationary) start.

    The exact reference is the closed form for ``p = 1/2`` (flat ``2/(3n)`` from
    a stationary start) and is omitted for other ``p``.
    """
    n = cfg.n[0]
    steps = _log_steps(n, cfg.log_horizon)
    times = _sample_times(steps, cfg.samples)
    counts = _paths(cfg, n, steps, stationary, times)
    l2 = ((3 * counts - n) ** 2).sum(axis=2) / (9.0 * n * n)
    mean = l2.mean(axis=0)
    se = l2.std(axis=0, ddof=1) / math.sqrt(cfg.reps) if cfg.reps > 1 else np.zeros_like(mean)
    exact = None
    if cfg.p == 0.5:
        if stationary:
            exact = np.full(times.shape, 2.0 / (3 * n))
        else:
            exact = np.array([closed_form_l2((n, 0, 0), int(t)) for t in times])
    return Trajectory(n, times, mean, se, exact)


@dataclass(frozen=True)
class VarianceRow:
    n: int
    sup_scaled_var: float
    se: float
    t_at_sup: int
    scaled_var: np.ndarray
    times: np.ndarray


def measure_variance_scaling(cfg: ExperimentConfig, stationary: bool = False) -> list[VarianceRow]:
    """Per ``n``: sup over sampled t of ``n * sum_k Var(S^k_t)`` from the given start.

    The standard error uses the normal-theory approximation
    ``Var * sqrt(2 / (reps - 1))``.
    """
    rows = []
    for n in cfg.n:
        steps = _log_steps(n, cfg.log_horizon)
        times = _sample_times(steps, cfg.samples)
        props = _paths(cfg, n, steps, stationary, times) / n
        scaled = n * props.var(axis=0, ddof=1).sum(axis=1) if cfg.reps > 1 else np.zeros(times.size)
        k = int(np.argmax(scaled))
        se = scaled[k] * math.sqrt(2 / (cfg.reps - 1)) if cfg.reps > 1 else 0.0
        rows.append(VarianceRow(n, float(scaled[k]), float(se), int(times[k]), scaled, times))
    return rows


# ------------------------------------------------------------------ excursions


def _excursion_rep(rep: int, *, n, steps, p, seed, start, radii):
    rng = replication_rng(seed, rep, stream=n)
    path = count_path(fixed_count_start(start), steps, p, rng)
    peak = int(path.max())
    # exit of S^{rho+} means some S^k >= 1/3 + rho
    return [peak >= (1 / 3 + rho) * n for rho in radii]


def measure_excursion_exit(cfg: ExperimentConfig) -> dict[float, RunStats]:
    """Per ``r``: frequency that some ``S^k_u >= 1/3 + r/sqrt(n)`` for ``u <= gamma n``.

    The start must lie in the upper region of radius ``r0/sqrt(n)``.
    """
    n = cfg.n[0]
    start = cfg.start or CountVector(n - 2 * (n // 3), n // 3, n // 3)
    if not in_upper_region(start, cfg.r0 / math.sqrt(n)):
        raise ValueError(f"start {tuple(start)} is not below 1/3 + r0/sqrt(n)")
    steps = _steps(n, cfg.gamma[0])
    radii = [r / math.sqrt(n) for r in cfg.r]
    fn = partial(_excursion_rep, n=n, steps=steps, p=cfg.p, seed=cfg.seed, start=tuple(start), radii=radii)
    flags = np.array(replicate(fn, cfg.reps, cfg.threads), dtype=bool).reshape(cfg.reps, len(radii))
    return {r: RunStats.frequency(flags[:, k]) for k, r in enumerate(cfg.r)}


def log_slope(estimates: dict[float, RunStats]) -> float | None:
    """Least-squares slope of ``log P`` against ``r^2`` over the positive estimates."""
    pts = [(r * r, math.log(s.mean)) for r, s in estimates.items() if s.mean > 0]
    if len(pts) < 2:
        return None
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


# ------------------------------------------------------------------ coupling measurements


def _pair_starts(cfg: ExperimentConfig, n: int, default_a, default_b):
    a = cfg.start if cfg.start is not None else CountVector(*default_a)
    b = cfg.start2 if cfg.start2 is not None else CountVector(*default_b)
    if a.n != n or b.n != n:
        raise ValueError(f"starts {tuple(a)}, {tuple(b)} do not sum to n={n}")
    return a, b


def spread_pair(n: int, r0: float) -> tuple[CountVector, CountVector]:
    """Two count vectors inside the region of radius ``r0/sqrt(n)``, far apart in l1.

    Colors 1 and 2 are shifted by ``+-d`` in opposite directions, with ``d`` the
    largest shift keeping ``|3 c - n| < 3 r0 sqrt(n)``.
    """
    third = n // 3
    rest = n - 2 * third
    d = 0
    while all(abs(3 * c - n) < 3 * r0 * math.sqrt(n) for c in (third + d + 1, third - d - 1, rest)):
        d += 1
    return CountVector(third + d, third - d, rest), CountVector(third - d, third + d, rest)


def _t1_rep(rep, *, n, a, b, horizon, r, seed):
    return run_semi_coordinatewise(a, b, horizon, r, replication_rng(seed, rep, stream=n))


@dataclass
class T1Result:
    n: int
    gammas: tuple
    times: HittingTimes
    success: dict  # gamma -> RunStats


def measure_T1(cfg: ExperimentConfig) -> T1Result:
    """Semi-coordinatewise coupling: frequency of {T1 < gamma n, no l2 exit up to T1}.

    One run per replication to the largest horizon serves every ``gamma``, so
    the frequencies are non-decreasing in ``gamma`` by construction.
    """
    n = cfg.n[0]
    a, b = _pair_starts(cfg, n, *spread_pair(n, cfg.r0))
    rad = cfg.r0 / math.sqrt(n)
    if not (in_region(a, rad) and in_region(b, rad)):
        raise ValueError(f"starts {tuple(a)}, {tuple(b)} are not within r0/sqrt(n) of the center")
    horizon = _steps(n, max(cfg.gamma))
    fn = partial(_t1_rep, n=n, a=a, b=b, horizon=horizon, r=cfg.r[0], seed=cfg.seed)
    runs = replicate(fn, cfg.reps, cfg.threads)
    t1 = np.array([CENSORED if x.t1 is None else x.t1 for x in runs])
    t2 = np.array([CENSORED if x.t2 is None else x.t2 for x in runs])
    success = {}
    for g in cfg.gamma:
        limit = _steps(n, g)
        success[g] = RunStats.frequency((t1 >= 0) & (t1 < limit) & (t2 < 0))
    return T1Result(n, cfg.gamma, HittingTimes(horizon, t1=t1, t2=t2), success)


def _sync_rep(rep, *, n, a, b, horizon, seed):
    t = run_semi_sync(a, b, horizon, replication_rng(seed, rep, stream=n))
    return CENSORED if t is None else t


@dataclass
class CoalescenceResult:
    n: int
    gammas: tuple
    times: HittingTimes
    success: dict
    extra: dict = field(default_factory=dict)


def measure_sync_coalescence(cfg: ExperimentConfig) -> CoalescenceResult:
    """Semi-synchronized coupling: frequency of ``S = S~`` at ``gamma n``.

    Equality is absorbing under this coupling, so it holds at ``gamma n`` iff
    the coalescence time is at most ``gamma n``.
    """
    n = cfg.n[0]
    third = n // 3
    a, b = _pair_starts(cfg, n, (n - 2 * third + 2, third - 2, third), (n - 2 * third - 2, third + 2, third))
    if sum(abs(x - y) for x, y in zip(a, b)) >= 10:
        raise ValueError("starts must be closer than 10/n in l1")
    horizon = _steps(n, max(cfg.gamma))
    fn = partial(_sync_rep, n=n, a=a, b=b, horizon=horizon, seed=cfg.seed)
    t = np.array(replicate(fn, cfg.reps, cfg.threads))
    success = {g: RunStats.frequency((t >= 0) & (t <= _steps(n, g))) for g in cfg.gamma}
    return CoalescenceResult(n, cfg.gamma, HittingTimes(horizon, t1=t), success)


def _basket_rep(rep, *, n, bc, bc2, horizon, rho, seed):
    run = run_basketwise(bc, bc2, horizon, rho, replication_rng(seed, rep, stream=n))
    tau = [CENSORED if x is None else x for x in run.tau]
    return tau, CENSORED if run.tau_star is None else run.tau_star


def basket_starts(n: int, start2_one_swap: bool = True) -> tuple[BasketCounts, BasketCounts]:
    """Equal-thirds partition by vertex index, balanced counts, and a one-swap partner."""
    bc = balanced_basket_counts(BasketPartition.equal_thirds(n))
    return bc, (one_swap_pair(bc) if start2_one_swap else bc)


def measure_basket_coalescence(cfg: ExperimentConfig) -> list[CoalescenceResult]:
    """Basketwise coupling from a one-swap pair, per ``n``.

    Reports the frequency of full basket coalescence within ``gamma n`` and,
    separately, the frequency that either basket matrix leaves the region of
    radius ``rho`` before full coalescence (or the horizon).
    """
    out = []
    for n in cfg.n:
        bc, bc2 = basket_starts(n)
        horizon = _steps(n, max(cfg.gamma))
        fn = partial(_basket_rep, n=n, bc=bc, bc2=bc2, horizon=horizon, rho=cfg.rho, seed=cfg.seed)
        runs = replicate(fn, cfg.reps, cfg.threads)
        tau = np.array([x[0] for x in runs]).reshape(cfg.reps, 3)
        tau_star = np.array([x[1] for x in runs])
        full = tau[:, 2]
        success = {g: RunStats.frequency((full >= 0) & (full <= _steps(n, g))) for g in cfg.gamma}
        extra = {"exit": RunStats.frequency(tau_star >= 0)}
        out.append(CoalescenceResult(n, cfg.gamma, HittingTimes(horizon, tau=tau, tau_star=tau_star), success, extra))
    return out


def _overall_rep(rep, *, n, schedule, rho, r, r1, seed):
    rng = replication_rng(seed, rep, stream=n)
    return overall_coupling_run(Configuration.monochromatic(n), OverallSchedule(*schedule), rng, rho=rho, r=r, r1=r1)


@dataclass
class OverallResult:
    n: int
    schedule: tuple
    runs: list
    success: RunStats
    attribution: dict  # first failed event (1-based) -> count

    def rows(self) -> list[dict]:
        out = []
        for k, run in enumerate(self.runs):
            row = {"rep": k, "success": int(run.success), "first_failure": run.first_failure or 0,
                   "lambda": run.lam}
            for e, ok in enumerate(run.events):
                row[f"event{e + 1}"] = -1 if ok is None else int(ok)
            for m in range(3):
                row[f"tau{m + 1}"] = CENSORED if run.tau[m] is None else run.tau[m]
            out.append(row)
        return out


def measure_overall(cfg: ExperimentConfig) -> OverallResult:
    """Overall coupling from a monochromatic start; success means equal basket matrices at t5.

    Failed runs are attributed to the first of the seven proof events that
    did not hold.
    """
    n = cfg.n[0]
    fn = partial(_overall_rep, n=n, schedule=cfg.schedule, rho=cfg.rho, r=cfg.r[0], r1=cfg.r1, seed=cfg.seed)
    runs = replicate(fn, cfg.reps, cfg.threads)
    success = RunStats.frequency([x.success for x in runs])
    attribution = Counter(x.first_failure for x in runs if not x.success)
    return OverallResult(n, cfg.schedule, runs, success, dict(sorted(attribution.items())))


__all__ = [
    "CENSORED", "ExperimentConfig", "RunStats", "HittingTimes", "replication_rng", "replicate",
    "monochromatic_start", "stationary_start", "fixed_count_start", "rejection_start",
    "balanced_basket_counts", "one_swap_pair", "spread_pair", "basket_starts", "measure_l2_trajectory",
    "measure_variance_scaling", "measure_excursion_exit", "log_slope", "measure_T1",
    "measure_sync_coalescence", "measure_basket_coalescence", "measure_overall", "OVERALL_EVENTS",
]
