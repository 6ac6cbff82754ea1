"""Exact law of the lumped proportion chain and everything computed from it.

The lumped state space is the set of count vectors ``(a, b, c)`` with
``a + b + c = n``, indexed lexicographically in ``(a, b)``.  Distributions
are dense float64 vectors over that index; the one-step kernel is a static
sparse matrix with at most four entries per row.

Total variation is computed on the lumped space.  For a start that is
invariant under vertex permutations (e.g. monochromatic) both the law of
the full chain and the uniform measure are exchangeable, so their TV equals
the TV of their count-vector laws; :func:`brute_force_oracle` checks this
against the full ``3^n``-state chain for small ``n``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import gammaln

from .chain import (
    ChainParams,
    Configuration,
    CountVector,
    all_count_vectors,
    centered_l2sq_exact,
    centered_norms,
    configuration_kernel_row,
    counts_of,
    proportion_kernel_row,
)

DEFAULT_MAX_STATES = 2_000_000
DEFAULT_MAX_STEPS = 1_000_000
MASS_TOLERANCE = 1e-9


class CapacityError(RuntimeError):
    """Raised when a state table or step count exceeds its budget."""


class MassDriftError(RuntimeError):
    """A distribution lost or gained more probability mass than allowed."""


def n_states(n: int) -> int:
    return (n + 1) * (n + 2) // 2


def max_n_for_states(max_states: int) -> int:
    n = 0
    while n_states(n + 1) <= max_states:
        n += 1
    return n


def state_index(n: int, a: int, b: int) -> int:
    # rows a' < a contribute (n - a' + 1) states each
    return a * (n + 1) - a * (a - 1) // 2 + b


def cutoff_time(n: int, p=0.5) -> float:
    """``n log n / (3p)``, natural logarithm."""
    return n * math.log(n) / (3 * p)


def rounded_time(n: int, gamma: float, p=0.5) -> int:
    """``cutoff_time + gamma n`` rounded to the nearest integer, clamped at 0."""
    return max(0, int(round(cutoff_time(n, p) + gamma * n)))


class LumpedKernel:
    """One-step transition kernel of the proportion chain for fixed ``(n, p)``."""

    def __init__(self, params: ChainParams, max_states: int = DEFAULT_MAX_STATES):
        n = params.n
        size = n_states(n)
        if size > max_states:
            raise CapacityError(
                f"n={n} needs {size} lumped states, budget is {max_states} "
                f"(largest admissible n is {max_n_for_states(max_states)})"
            )
        self.params = params
        self.n = n
        self.p = params.p
        self.states = np.array(all_count_vectors(n), dtype=np.int64)
        rows, cols, vals = [], [], []
        self._rows = []
        for i, s in enumerate(self.states):
            row = []
            for target, prob in proportion_kernel_row(CountVector(*map(int, s)), float(params.p)):
                j = state_index(n, target.c1, target.c2)
                row.append((j, float(prob)))
                rows.append(i)
                cols.append(j)
                vals.append(float(prob))
            self._rows.append(tuple(row))
        # transposed for push-forward: new = K^T old; csr keeps a fixed per-row summation order
        self._push = sparse.csr_matrix((vals, (cols, rows)), shape=(size, size))

    @property
    def size(self) -> int:
        return len(self.states)

    def index(self, cv: Sequence[int]) -> int:
        cv = CountVector(*cv)
        if cv.n != self.n:
            raise ValueError(f"count vector {tuple(cv)} does not have size {self.n}")
        return state_index(self.n, cv.c1, cv.c2)

    def row(self, cv: Sequence[int]) -> tuple[tuple[int, float], ...]:
        return self._rows[self.index(cv)]

    def rows(self):
        return self._rows

    def perturbed(self, state: Sequence[int], entry: int, delta: float) -> "LumpedKernel":
        """A copy with one probability shifted by ``delta`` (fault-injection hook)."""
        other = object.__new__(LumpedKernel)
        other.__dict__.update(self.__dict__)
        i = self.index(state)
        other._rows = list(self._rows)
        row = list(other._rows[i])
        j, prob = row[entry]
        row[entry] = (j, prob + delta)
        other._rows[i] = tuple(row)
        push = self._push.tolil(copy=True)
        push[j, i] = prob + delta
        other._push = push.tocsr()
        return other

    def push(self, probs: np.ndarray) -> np.ndarray:
        return self._push @ probs


def build_lumped_kernel(params: ChainParams, max_states: int = DEFAULT_MAX_STATES) -> LumpedKernel:
    return LumpedKernel(params, max_states=max_states)


@dataclass(frozen=True)
class DistVector:
    """Probability vector over the lumped states of size ``n``."""

    n: int
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (n_states(self.n),):
            raise ValueError(f"expected {n_states(self.n)} entries, got {probs.shape}")
        if probs.min() < -1e-15:
            raise ValueError("negative probability in distribution")
        drift = abs(probs.sum() - 1.0)
        if drift > MASS_TOLERANCE:
            raise MassDriftError(f"distribution mass off by {drift:.3e}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __getitem__(self, cv) -> float:
        cv = CountVector(*cv)
        return float(self.probs[state_index(self.n, cv.c1, cv.c2)])

    def support(self) -> dict[CountVector, float]:
        states = all_count_vectors(self.n)
        return {states[i]: float(self.probs[i]) for i in np.flatnonzero(self.probs)}

    def expect(self, values: np.ndarray) -> float:
        return float(self.probs @ values)


def delta_dist(cv: Sequence[int]) -> DistVector:
    cv = CountVector(*cv)
    probs = np.zeros(n_states(cv.n))
    probs[state_index(cv.n, cv.c1, cv.c2)] = 1.0
    return DistVector(cv.n, probs)


def stationary_counts(n: int) -> DistVector:
    """Multinomial(n; 1/3, 1/3, 1/3): the count law under the uniform measure."""
    states = np.array(all_count_vectors(n), dtype=float)
    logp = gammaln(n + 1) - gammaln(states + 1).sum(axis=1) - n * math.log(3)
    probs = np.exp(logp)
    return DistVector(n, probs / probs.sum())


def evolve(dist: DistVector, kernel: LumpedKernel, steps: int, max_steps: int = DEFAULT_MAX_STEPS) -> DistVector:
    """Push ``dist`` forward ``steps`` times through ``kernel``."""
    if dist.n != kernel.n:
        raise ValueError(f"distribution over n={dist.n} but kernel has n={kernel.n}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps > max_steps:
        raise CapacityError(f"{steps} steps requested, budget is {max_steps}")
    probs = dist.probs
    for _ in range(steps):
        probs = kernel.push(probs)
    return DistVector(dist.n, probs)


def tv_distance(a: DistVector, b: DistVector) -> float:
    if a.n != b.n:
        raise ValueError("distributions live on different state spaces")
    return 0.5 * float(np.abs(a.probs - b.probs).sum())


@dataclass(frozen=True)
class TvProfile:
    n: int
    p: float
    start: CountVector
    points: tuple  # ((t, d(t)), ...)

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [d for _, d in self.points]


def _tv_walk(start: CountVector, kernel: LumpedKernel, target: DistVector, max_steps: int):
    """Yield ``(t, tv)`` for t = 0, 1, 2, ... up to ``max_steps``."""
    probs = delta_dist(start).probs
    target_probs = target.probs
    yield 0, 0.5 * float(np.abs(probs - target_probs).sum())
    for t in range(1, max_steps + 1):
        probs = kernel.push(probs)
        if t % 1024 == 0:
            _check_mass(probs)
        yield t, 0.5 * float(np.abs(probs - target_probs).sum())
    _check_mass(probs)


def _check_mass(probs):
    drift = abs(float(probs.sum()) - 1.0)
    if drift > MASS_TOLERANCE:
        raise MassDriftError(f"distribution mass off by {drift:.3e}")


def tv_profile(start: Sequence[int], params: ChainParams, times: Iterable[int], kernel: LumpedKernel | None = None) -> TvProfile:
    """Exact ``||P^t(start, .) - pi||_TV`` at the requested times, in one pass."""
    start = CountVector(*start)
    kernel = kernel or build_lumped_kernel(params)
    times = [int(t) for t in times]
    if any(t < 0 for t in times):
        raise ValueError("times must be non-negative")
    wanted = set(times)
    horizon = max(times, default=0)
    found = {}
    for t, d in _tv_walk(start, kernel, stationary_counts(params.n), horizon):
        if t in wanted:
            found[t] = d
        if t == horizon:
            break
    return TvProfile(params.n, float(params.p), start, tuple((t, found[t]) for t in times))


def mixing_times(start: Sequence[int], params: ChainParams, eps_list: Iterable[float],
                 kernel: LumpedKernel | None = None, max_steps: int = DEFAULT_MAX_STEPS) -> dict[float, int]:
    """``min{t : d(t) <= eps}`` for each ``eps``, from a single evolution."""
    eps_list = list(eps_list)
    if any(not 0 < e < 1 for e in eps_list):
        raise ValueError("eps must lie in (0, 1)")
    start = CountVector(*start)
    kernel = kernel or build_lumped_kernel(params)
    pending = sorted(set(eps_list), reverse=True)
    out = {}
    for t, d in _tv_walk(start, kernel, stationary_counts(params.n), max_steps):
        while pending and d <= pending[0]:
            out[pending.pop(0)] = t
        if not pending:
            return {e: out[e] for e in eps_list}
    raise CapacityError(f"d(t) stayed above {pending[0]} for {max_steps} steps")


def mixing_time(start: Sequence[int], params: ChainParams, eps: float = 0.25, **kw) -> int:
    return mixing_times(start, params, [eps], **kw)[eps]


def monochromatic_counts(n: int) -> CountVector:
    return CountVector(n, 0, 0)


def cutoff_curve(n_list: Iterable[int], gamma_list: Iterable[float], p=0.5) -> list[tuple[int, float, int, float]]:
    """Rows ``(n, gamma, t, d_n(t))`` with ``t = round(n log n / (3p) + gamma n)``.

    Start is monochromatic; row order follows ``n_list`` then ``gamma_list``.
    """
    gamma_list = list(gamma_list)
    rows = []
    for n in n_list:
        params = ChainParams(n, p)
        times = [rounded_time(n, g, p) for g in gamma_list]
        profile = tv_profile(monochromatic_counts(n), params, times)
        rows.extend((n, g, t, d) for g, (t, d) in zip(gamma_list, profile.points))
    return rows


@dataclass(frozen=True)
class DriftCheck:
    lhs: float
    rhs: float
    residual: float


def drift_identity_check(cv: Sequence[int], kernel: LumpedKernel | None = None, exact: bool = False) -> DriftCheck:
    """One-step drift of ``||S - e||_2^2`` against ``-(3/(2n)) ||S - e||_2^2 + 1/n^2``.

    Only meaningful for p = 1/2.  With ``exact=True`` the kernel row is
    rebuilt in rational arithmetic and the residual is exactly zero when the
    identity holds; otherwise the row comes from ``kernel`` (so a perturbed
    kernel shows up in the residual).
    """
    cv = CountVector(*cv)
    n = cv.n
    if exact:
        base = centered_l2sq_exact(cv)
        lhs = sum(prob * (centered_l2sq_exact(nxt) - base) for nxt, prob in proportion_kernel_row(cv, Fraction(1, 2)))
        rhs = -Fraction(3, 2 * n) * base + Fraction(1, n * n)
        return DriftCheck(float(lhs), float(rhs), float(abs(lhs - rhs)))
    if kernel is None:
        kernel = build_lumped_kernel(ChainParams(n, 0.5))
    if kernel.p != 0.5:
        raise ValueError("the drift identity is stated for p = 1/2")
    base = centered_norms(cv).l2sq
    lhs = 0.0
    for j, prob in kernel.row(cv):
        nxt = CountVector(*map(int, kernel.states[j]))
        lhs += prob * (centered_norms(nxt).l2sq - base)
    rhs = -1.5 / n * base + 1.0 / (n * n)
    return DriftCheck(lhs, rhs, abs(lhs - rhs))


def l2sq_values(n: int) -> np.ndarray:
    """``||S - e||_2^2`` for every lumped state, in index order."""
    states = np.array(all_count_vectors(n), dtype=float)
    return ((3 * states - n) ** 2).sum(axis=1) / (9.0 * n * n)


def linf_values(n: int) -> np.ndarray:
    states = np.array(all_count_vectors(n), dtype=float)
    return np.abs(3 * states - n).max(axis=1) / (3.0 * n)


def expected_l2sq(dist: DistVector) -> float:
    return dist.expect(l2sq_values(dist.n))


def mean_and_variance(dist: DistVector) -> tuple[np.ndarray, float]:
    """Mean proportion vector and summed componentwise variance of ``S``."""
    states = np.array(all_count_vectors(dist.n), dtype=float) / dist.n
    mean = dist.probs @ states
    second = dist.probs @ (states ** 2)
    return mean, float((second - mean ** 2).sum())


def closed_form_l2(start: Sequence[int], t: int) -> float:
    """``E ||S_t - e||_2^2`` for p = 1/2 from the recursion x' = (1 - 3/(2n)) x + 1/n^2."""
    start = CountVector(*start)
    n = start.n
    decay = (1 - 1.5 / n) ** t
    return decay * centered_norms(start).l2sq + 2 / (3 * n) * (1 - decay)


def tail_probabilities(start: Sequence[int], params: ChainParams, t: int, r_list: Iterable[float],
                       kernel: LumpedKernel | None = None) -> dict[float, float]:
    """Exact ``P(||S_t - e||_inf >= r / sqrt(n))`` for each ``r``."""
    start = CountVector(*start)
    n = params.n
    kernel = kernel or build_lumped_kernel(params)
    dist = evolve(delta_dist(start), kernel, t)
    states = np.array(all_count_vectors(n), dtype=float)
    # ||S - e||_inf >= r/sqrt(n)  <=>  max|3c - n| >= 3 r sqrt(n)
    dev = np.abs(3 * states - n).max(axis=1)
    out = {}
    for r in r_list:
        if r <= 0:
            raise ValueError("r must be positive")
        threshold = 3 * r * math.sqrt(n)
        mask = dev >= threshold * (1 - 1e-12)
        out[r] = float(dist.probs[mask].sum())
    return out


def tail_probability(start, params, t, r, kernel=None) -> float:
    return tail_probabilities(start, params, t, [r], kernel=kernel)[r]


MAX_ORACLE_N = 6


@dataclass(frozen=True)
class OracleReport:
    n: int
    p: float
    times: tuple
    tv_full_mono: tuple
    tv_lumped: tuple
    tv_full_max: tuple

    @property
    def max_residual(self) -> float:
        return max(abs(a - b) for a, b in zip(self.tv_full_mono, self.tv_lumped))

    def rows(self):
        return list(zip(self.times, self.tv_full_mono, self.tv_lumped, self.tv_full_max))


def full_chain_matrix(params: ChainParams) -> tuple[list[Configuration], np.ndarray]:
    """Dense ``3^n x 3^n`` transition matrix built from the single-site rule."""
    n = params.n
    configs = [Configuration(c) for c in itertools.product(range(3), repeat=n)]
    index = {c: i for i, c in enumerate(configs)}
    P = np.zeros((len(configs), len(configs)))
    for i, cfg in enumerate(configs):
        for nxt, prob in configuration_kernel_row(cfg, params.p).items():
            P[i, index[nxt]] += prob
    return configs, P


def brute_force_oracle(params: ChainParams, times: Iterable[int]) -> OracleReport:
    """Compare lumped TV with the full chain's TV for ``n <= 6``."""
    n = params.n
    if n > MAX_ORACLE_N:
        raise CapacityError(f"brute-force oracle handles n <= {MAX_ORACLE_N} (3^n states), got n={n}")
    times = sorted(set(int(t) for t in times))
    configs, P = full_chain_matrix(params)
    uniform = np.full(len(configs), 1.0 / len(configs))
    mono = configs.index(Configuration.monochromatic(n))
    lumped = tv_profile(monochromatic_counts(n), params, times)
    full_mono, full_max = [], []
    power = np.eye(len(configs))
    t_prev = 0
    for t in times:
        power = power @ np.linalg.matrix_power(P, t - t_prev)
        t_prev = t
        per_start = 0.5 * np.abs(power - uniform[None, :]).sum(axis=1)
        full_mono.append(float(per_start[mono]))
        full_max.append(float(per_start.max()))
    return OracleReport(n, float(params.p), tuple(times), tuple(full_mono), tuple(lumped.values), tuple(full_max))


def stationarity_residual(n: int, kernel: LumpedKernel | None = None) -> float:
    """``|| pi K - pi ||_1`` for the multinomial ``pi``."""
    kernel = kernel or build_lumped_kernel(ChainParams(n, 0.5))
    pi = stationary_counts(n).probs
    return float(np.abs(kernel.push(pi) - pi).sum())
