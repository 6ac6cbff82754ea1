"""Couplings of two copies of the cyclic dynamics (advance probability 1/2).

Every coupling is defined by a *branch table*: a finite list of
``Branch(i, i2, j, j2, b, b2, rule, m)`` records with probabilities, computed
from the count vectors (or basket-count matrices) of the two chains alone.
``i -> j`` is the color move of the first chain, ``i2 -> j2`` that of the
second; ``b``/``b2`` name the basket holding the chosen vertex when baskets
matter, and ``m`` is the active basket of the basketwise coupling.  The table is the normative definition; sampling draws a branch from
the same table and then *realizes* it by picking concrete vertices
uniformly within the branch's vertex class (:func:`realize`).

Colors and baskets are 0-based here.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import accumulate
from typing import NamedTuple, Sequence

import numpy as np

from .chain import (
    BasketCounts,
    BasketPartition,
    Configuration,
    CountVector,
    advance,
    basket_counts,
    baskets_in_region,
    counts_of,
    in_region,
    run_configuration,
)

HALF = 0.5
CACHE_SIZE = 32_768  # per table family; Monte Carlo runs revisit a small set of pairs


class Branch(NamedTuple):
    i: int
    i2: int
    j: int
    j2: int
    b: int | None = None
    b2: int | None = None
    rule: str | None = None
    m: int | None = None


@dataclass(frozen=True)
class CoupledPair:
    first: Configuration
    second: Configuration

    def __post_init__(self):
        if self.first.n != self.second.n:
            raise ValueError("coupled configurations must have the same size")

    @property
    def n(self) -> int:
        return self.first.n

    def counts(self) -> tuple[CountVector, CountVector]:
        return counts_of(self.first), counts_of(self.second)


class CouplingOutcome:
    """Enumerated joint one-step law of a coupled pair, as a branch table."""

    __slots__ = ("branches", "probs", "case", "_cum")

    def __init__(self, weights: dict, case: str = ""):
        items = [(br, p) for br, p in weights.items() if p > 0]
        self.branches = tuple(br for br, _ in items)
        self.probs = tuple(float(p) for _, p in items)
        self.case = case
        self._cum = list(accumulate(self.probs))

    def __len__(self):
        return len(self.branches)

    def __iter__(self):
        return iter(zip(self.branches, self.probs))

    @property
    def total(self) -> float:
        return math.fsum(self.probs)

    def sample(self, u: float) -> Branch:
        """Branch whose cumulative interval contains ``u`` in [0, 1)."""
        k = bisect.bisect_right(self._cum, u * self._cum[-1])
        return self.branches[min(k, len(self.branches) - 1)]

    def intervals(self):
        """``(branch, lo, hi)`` cumulative intervals used by :meth:`sample`."""
        lo = 0.0
        for br, hi in zip(self.branches, self._cum):
            yield br, lo, hi
            lo = hi

    def marginal_moves(self, second: bool = False) -> dict:
        """Law of one chain's ``(basket, from, to)`` move; basket is None if untracked."""
        out = {}
        for br, p in self:
            key = (br.b2, br.i2, br.j2) if second else (br.b, br.i, br.j)
            out[key] = out.get(key, 0.0) + p
        return out


def _add(weights: dict, key, p):
    if p:
        weights[key] = weights.get(key, 0) + p


def single_chain_moves(cv: CountVector) -> dict:
    """``(None, from, to) -> prob`` for one chain: color ``k`` w.p. S^k, then hold/advance."""
    n = cv.n
    out = {}
    for k in range(3):
        if cv[k]:
            for new in (k, advance(k)):
                out[(None, k, new)] = cv[k] / n * HALF
    return out


def single_basket_moves(bc: BasketCounts) -> dict:
    n = bc.n
    out = {}
    for m in range(3):
        for k in range(3):
            c = bc.counts[m][k]
            if c:
                for new in (k, advance(k)):
                    out[(m, k, new)] = c / n * HALF
    return out


# ---------------------------------------------------------------- sign cases


class SignCase(NamedTuple):
    """Rotation ``r`` and role swap mapping a pair onto the template pattern.

    In the canonical frame color ``k`` of the live pair becomes ``(k - r) % 3``
    and, if ``swapped``, the chains exchange roles; the canonical difference
    vector ``S - S~`` then has sign pattern ``(>=0, <=0, <=0)``.
    """

    rotation: int
    swapped: bool
    tag: str


def canonicalize_sign_case(a: Sequence[int], b: Sequence[int]) -> SignCase:
    a, b = CountVector(*a), CountVector(*b)
    if a.n != b.n:
        raise ValueError("count vectors of different sizes")
    if a == b:
        return SignCase(0, False, "identity")
    for swapped in (False, True):
        d = [y - x for x, y in zip(a, b)] if swapped else [x - y for x, y in zip(a, b)]
        for k in range(3):
            if d[k] >= 0 and all(d[o] <= 0 for o in range(3) if o != k):
                return SignCase(k, swapped, "+--")
    raise AssertionError(f"no sign case for {tuple(a)}, {tuple(b)}")  # unreachable: diffs sum to 0


def _frame(a: CountVector, b: CountVector, case: SignCase):
    if case.swapped:
        a, b = b, a
    return a.rotated(-case.rotation), b.rotated(-case.rotation)


def _unframe(weights: dict, case: SignCase) -> dict:
    r = case.rotation
    out = {}
    for (i, i2, j, j2), p in weights.items():
        i, i2, j, j2 = ((x + r) % 3 for x in (i, i2, j, j2))
        key = Branch(i2, i, j2, j) if case.swapped else Branch(i, i2, j, j2)
        _add(out, key, p)
    return out


# ---------------------------------------------------- semi-synchronized coupling


@lru_cache(maxsize=CACHE_SIZE)
def semi_sync_table(a: CountVector, b: CountVector) -> CouplingOutcome:
    """Semi-synchronized coupling of two proportion chains."""
    a, b = CountVector(*a), CountVector(*b)
    n = a.n
    case = canonicalize_sign_case(a, b)
    A, B = _frame(a, b, case)
    w = {}
    # template: A^1 >= B^1, A^2 <= B^2, A^3 <= B^3
    for (i, i2), mass, outs in (
        ((0, 0), B[0], ((0, 0), (1, 1))),
        ((1, 1), A[1], ((1, 1), (2, 2))),
        ((2, 2), A[2], ((2, 2), (0, 0))),
        ((0, 1), B[1] - A[1], ((0, 2), (1, 1))),
        ((0, 2), B[2] - A[2], ((0, 0), (1, 2))),
    ):
        for j, j2 in outs:
            _add(w, (i, i2, j, j2), mass / n * HALF)
    return CouplingOutcome(_unframe(w, case), case="semi-synchronized")


def color_pair_law(outcome: CouplingOutcome) -> dict:
    """Law of the chosen colors ``(I, I~)``."""
    out = {}
    for br, p in outcome:
        out[(br.i, br.i2)] = out.get((br.i, br.i2), 0.0) + p
    return out


# ------------------------------------------------ semi-independent / coordinatewise


def semi_independent_pair(nu: Sequence, nu2: Sequence, i: int) -> dict:
    """``{i}``-semi-independent coupling of two laws on {0, 1, 2}.

    A shared uniform ``U`` decides: ``U <= min(nu(i), nu2(i))`` gives ``(i, i)``;
    otherwise each side independently takes ``i`` if ``U`` is below its own
    ``nu(i)``, else one of ``i+1, i+2`` proportionally to its weights there.
    Exact if the inputs are Fractions.
    """
    lo, hi = min(nu[i], nu2[i]), max(nu[i], nu2[i])
    out = {}

    def rest(law):
        k1, k2 = (i + 1) % 3, (i + 2) % 3
        tot = law[k1] + law[k2]
        if not tot:
            return ()
        return ((k1, law[k1] / tot), (k2, law[k2] / tot))

    _add(out, (i, i), lo)
    middle = hi - lo
    if middle:
        if nu[i] > nu2[i]:
            for y, q in rest(nu2):
                _add(out, (i, y), middle * q)
        else:
            for x, q in rest(nu):
                _add(out, (x, i), middle * q)
    upper = 1 - hi
    if upper:
        for x, q in rest(nu):
            for y, q2 in rest(nu2):
                _add(out, (x, y), upper * q * q2)
    return out


def _lazy_law(color: int):
    law = [0.0, 0.0, 0.0]
    law[color] = HALF
    law[advance(color)] = HALF
    return law


@lru_cache(maxsize=CACHE_SIZE)
def coordinatewise_table(a: CountVector, b: CountVector, i: int) -> CouplingOutcome:
    """``{i}``-coordinatewise coupling: semi-independent colors, then semi-independent moves."""
    a, b = CountVector(*a), CountVector(*b)
    n = a.n
    w = {}
    stage1 = semi_independent_pair([c / n for c in a], [c / n for c in b], i)
    for (I, I2), q in stage1.items():
        for (J, J2), q2 in semi_independent_pair(_lazy_law(I), _lazy_law(I2), i).items():
            _add(w, Branch(I, I2, J, J2), q * q2)
    return CouplingOutcome(w, case=f"coordinatewise[{i}]")


@lru_cache(maxsize=CACHE_SIZE)
def independent_table(a: CountVector, b: CountVector) -> CouplingOutcome:
    w = {}
    for (_, i, j), p in single_chain_moves(CountVector(*a)).items():
        for (_, i2, j2), p2 in single_chain_moves(CountVector(*b)).items():
            _add(w, Branch(i, i2, j, j2), p * p2)
    return CouplingOutcome(w, case="independent")


def _matched_template(a: CountVector, b: CountVector, i: int) -> dict:
    # requires a[i] == b[i] and a[i+1] >= b[i+1]
    n = a.n
    i1, i2 = (i + 1) % 3, (i + 2) % 3
    w = {}
    for (I, I2), mass, outs in (
        ((i, i), a[i], ((i, i), (i1, i1))),
        ((i1, i1), min(a[i1], b[i1]), ((i1, i1), (i1, i2), (i2, i1), (i2, i2))),
        ((i2, i2), min(a[i2], b[i2]), ((i, i), (i2, i2))),
        ((i1, i2), a[i1] - b[i1], ((i1, i), (i2, i2))),
    ):
        for j, j2 in outs:
            _add(w, Branch(I, I2, j, j2), mass / n / len(outs))
    return w


@lru_cache(maxsize=CACHE_SIZE)
def semi_coordinatewise_table(a: CountVector, b: CountVector) -> CouplingOutcome:
    """Semi-coordinatewise coupling, dispatched on ``min_k |c_k - c~_k|``."""
    a, b = CountVector(*a), CountVector(*b)
    gaps = [abs(x - y) for x, y in zip(a, b)]
    smallest = min(gaps)
    if smallest >= 2:
        return independent_table(a, b)
    i = gaps.index(smallest)
    if smallest == 1:
        return coordinatewise_table(a, b, i)
    i1 = (i + 1) % 3
    if a[i1] >= b[i1]:
        w = _matched_template(a, b, i)
    else:
        w = {Branch(br.i2, br.i, br.j2, br.j): p for br, p in _matched_template(b, a, i).items()}
    return CouplingOutcome(w, case=f"matched[{i}]")


# ------------------------------------------------------------ basketwise coupling


def active_basket(bc: BasketCounts, bc2: BasketCounts) -> int:
    """First basket whose rows differ; 3 once all rows agree."""
    for m in range(3):
        if bc.counts[m] != bc2.counts[m]:
            return m
    return 3


def _blocks(bc: BasketCounts, color: int, m: int):
    # position ranges of color-`color` vertices of baskets m..2, ordered by basket
    out, pos = {}, 0
    for b in range(m, 3):
        size = bc.counts[b][color]
        out[b] = (pos, pos + size)
        pos += size
    return out


@lru_cache(maxsize=CACHE_SIZE)
def basketwise_table(bc: BasketCounts, bc2: BasketCounts, m: int) -> CouplingOutcome:
    """Basketwise coupling for active basket ``m`` (0-based; 3 means all coalesced)."""
    if bc.sizes != bc2.sizes:
        raise ValueError("basket sizes differ between the chains")
    if bc.column_sums() != bc2.column_sums():
        raise ValueError("basketwise coupling needs equal color counts in both chains")
    if any(bc.counts[k] != bc2.counts[k] for k in range(min(m, 3))):
        raise ValueError(f"rows before basket {m + 1} are not coalesced")
    c = bc.column_sums()
    n = c.n
    w = {}
    for I in range(3):
        if not c[I]:
            continue
        for J in (I, advance(I)):
            base = c[I] / n * HALF
            if m < 3:
                rule_b = bc.counts[m][I] != bc2.counts[m][I] and bc.counts[m][J] != bc2.counts[m][J]
                rest = sum(bc.counts[k][I] for k in range(m, 3))
                blocks, blocks2 = _blocks(bc, I, m), _blocks(bc2, I, m)
            for b in range(3):
                here = bc.counts[b][I]
                if not here:
                    continue
                if b < m:
                    _add(w, Branch(I, I, J, J, b, b, "a", m), base * here / c[I])
                elif rule_b:
                    for b2 in range(m, 3):
                        _add(w, Branch(I, I, J, J, b, b2, "b", m), base * here / c[I] * bc2.counts[b2][I] / rest)
                else:
                    lo, hi = blocks[b]
                    for b2 in range(m, 3):
                        lo2, hi2 = blocks2[b2]
                        overlap = min(hi, hi2) - max(lo, lo2)
                        if overlap > 0:
                            _add(w, Branch(I, I, J, J, b, b2, "c", m), base * overlap / c[I])
    return CouplingOutcome(w, case=f"basketwise[{m}]")


# ------------------------------------------------------------ vertex realization


def _color_class_in_baskets(cfg: Configuration, part: BasketPartition, color: int, baskets) -> list[int]:
    # ordered by (basket, vertex index)
    return [v for m in baskets for v in part.members(m) if cfg.colors[v] == color]


def realize_choices(pair: CoupledPair, br: Branch, part: BasketPartition | None = None):
    """Every ``(V, V~, weight)`` realizing ``br``; weights sum to 1.

    Without baskets (or rules a/b) the two vertices are uniform within their
    classes, independently.  Rule c matches the j-th vertex of one ordered
    enumeration with the j-th of the other, j uniform on the overlap.
    """
    s1, s2 = pair.first, pair.second
    if br.b is None:
        pool1 = s1.vertices_with(br.i)
        pool2 = s2.vertices_with(br.i2)
    elif br.rule == "c":
        m = br.m
        v1 = _color_class_in_baskets(s1, part, br.i, range(m, 3))
        v2 = _color_class_in_baskets(s2, part, br.i2, range(m, 3))
        idx1 = [j for j, v in enumerate(v1) if part.assignment[v] == br.b]
        idx2 = set(j for j, v in enumerate(v2) if part.assignment[v] == br.b2)
        shared = [j for j in idx1 if j in idx2]
        if not shared:
            raise AssertionError(f"empty overlap realizing {br}")
        return [(v1[j], v2[j], 1.0 / len(shared)) for j in shared]
    else:
        pool1 = [v for v in part.members(br.b) if s1.colors[v] == br.i]
        pool2 = [v for v in part.members(br.b2) if s2.colors[v] == br.i2]
    if not pool1 or not pool2:
        raise AssertionError(f"empty vertex class realizing {br}")
    wgt = 1.0 / (len(pool1) * len(pool2))
    return [(v, v2, wgt) for v in pool1 for v2 in pool2]


def realize(pair: CoupledPair, br: Branch, rng: np.random.Generator, part: BasketPartition | None = None) -> CoupledPair:
    choices = realize_choices(pair, br, part)
    k = int(rng.integers(len(choices))) if len(choices) > 1 else 0
    # all weights within one branch are equal, so a uniform index is exact
    v, v2, _ = choices[k]
    return CoupledPair(pair.first.recolor(v, br.j), pair.second.recolor(v2, br.j2))


def expand_to_configurations(pair: CoupledPair, outcome: CouplingOutcome,
                             part: BasketPartition | None = None) -> dict:
    """Joint one-step law of the configuration pair implied by a branch table."""
    out = {}
    for br, p in outcome:
        for v, v2, w in realize_choices(pair, br, part):
            key = (pair.first.recolor(v, br.j), pair.second.recolor(v2, br.j2))
            out[key] = out.get(key, 0.0) + p * w
    return out


def configuration_marginals(joint: dict) -> tuple[dict, dict]:
    first, second = {}, {}
    for (c1, c2), p in joint.items():
        first[c1] = first.get(c1, 0.0) + p
        second[c2] = second.get(c2, 0.0) + p
    return first, second


# --------------------------------------------------- configuration-level interface


def semi_sync_enumerate(pair: CoupledPair) -> CouplingOutcome:
    return semi_sync_table(*pair.counts())


def coordinatewise_enumerate(pair: CoupledPair, i: int) -> CouplingOutcome:
    a, b = pair.counts()
    return coordinatewise_table(a, b, i)


def semi_coordinatewise_enumerate(pair: CoupledPair) -> CouplingOutcome:
    return semi_coordinatewise_table(*pair.counts())


def basketwise_enumerate(pair: CoupledPair, part: BasketPartition, m: int | None = None) -> CouplingOutcome:
    a, b = pair.counts()
    if a != b:
        raise ValueError(f"basketwise coupling needs equal counts, got {tuple(a)} and {tuple(b)}")
    bc, bc2 = basket_counts(pair.first, part), basket_counts(pair.second, part)
    if m is None:
        m = active_basket(bc, bc2)
    return basketwise_table(bc, bc2, m)


def _step(pair, outcome, rng, part=None):
    return realize(pair, outcome.sample(rng.random()), rng, part)


def semi_sync_step(pair: CoupledPair, rng: np.random.Generator) -> CoupledPair:
    return _step(pair, semi_sync_enumerate(pair), rng)


def coordinatewise_step(pair: CoupledPair, i: int, rng: np.random.Generator) -> CoupledPair:
    return _step(pair, coordinatewise_enumerate(pair, i), rng)


def semi_coordinatewise_step(pair: CoupledPair, rng: np.random.Generator) -> CoupledPair:
    return _step(pair, semi_coordinatewise_enumerate(pair), rng)


def basketwise_step(pair: CoupledPair, part: BasketPartition, m: int | None, rng: np.random.Generator) -> CoupledPair:
    return _step(pair, basketwise_enumerate(pair, part, m), rng, part)


def marginal_residual(outcome: CouplingOutcome, first, second) -> float:
    """Largest gap between each chain's marginal move law and its own kernel.

    ``first``/``second`` are count vectors for proportion couplings or basket
    counts for the basketwise coupling; the total-mass error is included.
    """
    def kernel(state):
        return single_basket_moves(state) if isinstance(state, BasketCounts) else single_chain_moves(state)

    worst = abs(outcome.total - 1)
    for state, marg in ((first, outcome.marginal_moves()), (second, outcome.marginal_moves(True))):
        ref = kernel(state)
        for key in set(ref) | set(marg):
            worst = max(worst, abs(ref.get(key, 0.0) - marg.get(key, 0.0)))
    return worst


# ---------------------------------------------------------- l1 distance statistics


def l1_change_law(a: CountVector, b: CountVector, outcome: CouplingOutcome) -> dict[int, float]:
    """Law of the one-step change of ``||c - c~||_1`` (in counts; divide by n for S)."""
    diff = [x - y for x, y in zip(a, b)]
    before = sum(abs(d) for d in diff)
    out = {}
    for br, p in outcome:
        d = list(diff)
        d[br.i] -= 1
        d[br.j] += 1
        d[br.i2] += 1
        d[br.j2] -= 1
        key = sum(abs(x) for x in d) - before
        out[key] = out.get(key, 0.0) + p
    return out


def moments(law: dict) -> tuple[float, float]:
    mean = math.fsum(k * p for k, p in law.items())
    var = math.fsum((k - mean) ** 2 * p for k, p in law.items())
    return mean, var


def basket_row_l1(bc: BasketCounts, bc2: BasketCounts, m: int) -> int:
    return sum(abs(x - y) for x, y in zip(bc.counts[m], bc2.counts[m]))


def basket_row_change_law(bc: BasketCounts, bc2: BasketCounts, m: int, outcome: CouplingOutcome) -> dict[int, float]:
    """Law of the change of ``||row_m - row~_m||_1`` in counts (divide by |B_m| for W^m)."""
    before = basket_row_l1(bc, bc2, m)
    out = {}
    for br, p in outcome:
        d = basket_row_l1(bc.moved(br.b, br.i, br.j), bc2.moved(br.b2, br.i2, br.j2), m) - before
        out[d] = out.get(d, 0.0) + p
    return out


# ------------------------------------------------------------------- overall run


@dataclass(frozen=True)
class OverallSchedule:
    """Phase lengths, in units of n, of the six-phase overall coupling."""

    gamma1: float
    gamma2: float
    gamma3: float
    gamma4: float

    def __post_init__(self):
        if self.gamma1 <= 0:
            raise ValueError("gamma1 must be positive")
        if min(self.gamma2, self.gamma3, self.gamma4) < 0:
            raise ValueError("phase lengths must be non-negative")

    def boundaries(self, n: int, p=0.5) -> tuple[int, int, int, int, int]:
        """``(t1, t2, t3, t4, t5)`` with ``t2 = t1 + round(n log n / (3p))``."""
        t1 = int(round(self.gamma1 * n))
        t2 = t1 + int(round(n * math.log(n) / (3 * p)))
        t3 = t2 + int(round(self.gamma2 * n))
        t4 = t3 + int(round(self.gamma3 * n))
        t5 = t4 + int(round(self.gamma4 * n))
        return t1, t2, t3, t4, t5


# ------------------------------------------------------- count-level drivers
#
# Monte Carlo runs only need the count vectors (or basket counts) of the two
# chains, so they sample branches straight from the cached tables and never
# materialize vertices.


class UniformStream:
    """Buffered uniforms on [0, 1) drawn from one generator."""

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self._rng = rng
        self._block = block
        self._buf = []
        self._pos = 0

    def __call__(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._rng.random(self._block).tolist()
            self._pos = 0
        self._pos += 1
        return self._buf[self._pos - 1]


def _l1(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) + abs(a[2] - b[2])


def _l2_exceeds(cv: CountVector, r: float) -> bool:
    # ||S - e||_2 >= r / sqrt(n)  <=>  sum (3c - n)^2 >= 9 r^2 n
    n = cv.n
    return sum((3 * c - n) ** 2 for c in cv) >= 9 * r * r * n


class T1Run(NamedTuple):
    """``t1``: first t with ``||c - c~||_1 < 10``; ``t2``: first l2 exit at or before ``t1``."""

    t1: int | None
    t2: int | None


def run_semi_coordinatewise(a, b, horizon: int, r: float, rng: np.random.Generator) -> T1Run:
    """Semi-coordinatewise coupling of two proportion chains over times ``0..horizon-1``.

    Stops at the first time the l1 count distance drops below 10 (i.e. the
    proportion distance below 10/n).  An exit ``max(||S^||_2, ||S~^||_2) >= r/sqrt(n)``
    observed on the way is reported in ``t2``.
    """
    a, b = CountVector(*a), CountVector(*b)
    u = UniformStream(rng)
    t2 = None
    for t in range(horizon):
        if t2 is None and (_l2_exceeds(a, r) or _l2_exceeds(b, r)):
            t2 = t
        if _l1(a, b) < 10:
            return T1Run(t, t2)
        br = semi_coordinatewise_table(a, b).sample(u())
        a, b = a.moved(br.i, br.j), b.moved(br.i2, br.j2)
    return T1Run(None, t2)


def run_semi_sync(a, b, horizon: int, rng: np.random.Generator) -> int | None:
    """First time ``t <= horizon`` with equal counts under semi-synchronized coupling."""
    a, b = CountVector(*a), CountVector(*b)
    u = UniformStream(rng)
    for t in range(horizon + 1):
        if a == b:
            return t
        if t == horizon:
            break
        br = semi_sync_table(a, b).sample(u())
        a, b = a.moved(br.i, br.j), b.moved(br.i2, br.j2)
    return None


class BasketRun(NamedTuple):
    """``tau[m]``: first time rows ``0..m`` agree; ``tau_star``: first exit from the rho-region."""

    tau: tuple
    tau_star: int | None
    final: tuple


def run_basketwise(bc: BasketCounts, bc2: BasketCounts, horizon: int, rho: float | None,
                   rng: np.random.Generator) -> BasketRun:
    """Basketwise coupling, advancing the active basket as rows coalesce.

    Runs until full coalescence or ``horizon`` steps; the basket-region exit time
    is tracked over the same span (``rho=None`` disables it).
    """
    u = UniformStream(rng)
    tau = [None, None, None]
    tau_star = None
    t = 0
    while True:
        m = active_basket(bc, bc2)
        for k in range(m):
            if tau[k] is None:
                tau[k] = t
        if tau_star is None and rho is not None and not (baskets_in_region(bc, rho) and baskets_in_region(bc2, rho)):
            tau_star = t
        if m == 3 or t == horizon:
            break
        br = basketwise_table(bc, bc2, m).sample(u())
        bc, bc2 = bc.moved(br.b, br.i, br.j), bc2.moved(br.b2, br.i2, br.j2)
        t += 1
    return BasketRun(tuple(tau), tau_star, (bc, bc2))


def _pick_basket(bc: BasketCounts, color: int, u: float) -> int:
    col = [bc.counts[m][color] for m in range(3)]
    x = u * sum(col)
    acc = 0
    for m in range(2):
        acc += col[m]
        if x < acc:
            return m
    return 2


def run_proportion_with_baskets(table_fn, bc: BasketCounts, bc2: BasketCounts, steps: int,
                                rng: np.random.Generator) -> tuple[BasketCounts, BasketCounts]:
    """Run a proportion coupling while tracking basket counts.

    Given the sampled colors, the chosen vertex is uniform in its color class,
    so its basket is drawn proportionally to that color's basket counts.  Both
    baskets come from one shared uniform, so equal basket matrices stay equal
    whenever the two chains pick the same color.
    """
    u = UniformStream(rng)
    a, b = bc.column_sums(), bc2.column_sums()
    for _ in range(steps):
        br = table_fn(a, b).sample(u())
        v = u()
        m, m2 = _pick_basket(bc, br.i, v), _pick_basket(bc2, br.i2, v)
        bc, bc2 = bc.moved(m, br.i, br.j), bc2.moved(m2, br.i2, br.j2)
        a, b = a.moved(br.i, br.j), b.moved(br.i2, br.j2)
    return bc, bc2


OVERALL_EVENTS = (
    "S at t1 in rho-region",
    "baskets form a (1/3 - rho)-partition",
    "S at t2 in r/sqrt(n)-region",
    "S~ at t2 in r/sqrt(n)-region",
    "S equals S~ at t4",
    "basket matrices at t4 in r1/sqrt(n)-region",
    "basket matrices equal at t5",
)


@dataclass(frozen=True)
class OverallRun:
    boundaries: tuple
    partition_sizes: tuple
    events: tuple  # one bool per OVERALL_EVENTS entry; None if never reached
    tau: tuple

    @property
    def lam(self) -> float:
        return min(self.partition_sizes) / sum(self.partition_sizes)

    @property
    def success(self) -> bool:
        return bool(self.events[6])

    @property
    def s_coalesced(self) -> bool:
        return bool(self.events[4])

    @property
    def first_failure(self) -> int | None:
        """1-based index of the first event that did not hold, for failed runs."""
        if self.success:
            return None
        for k, ok in enumerate(self.events):
            if not ok:
                return k + 1
        raise AssertionError("failed run with every event holding")


def overall_coupling_run(start_first: Configuration, schedule: OverallSchedule, rng: np.random.Generator,
                         rho: float = 0.1, r: float = 3.0, r1: float = 3.0) -> OverallRun:
    """One run of the six-phase overall coupling at ``p = 1/2``.

    The second chain starts from a uniform configuration.  Baskets are the
    color classes of the first chain at ``t1``; an empty class ends the run as
    a failure.  If the counts have not met by ``t4`` the basketwise phase is
    not applicable and the run fails.
    """
    n = start_first.n
    bounds = schedule.boundaries(n)
    t1, t2, t3, t4, t5 = bounds
    x = start_first.as_array()
    y = Configuration.uniform(n, rng).as_array()
    x = run_configuration(x, t1, HALF, rng)
    y = run_configuration(y, t1, HALF, rng)
    events = [None] * 7
    events[0] = in_region(np.bincount(x, minlength=3).tolist(), rho)
    part = BasketPartition(tuple(int(c) for c in x))
    sizes = part.sizes
    events[1] = min(sizes) > (1 / 3 - rho) * n
    if min(sizes) == 0:
        return OverallRun(bounds, sizes, tuple(events), (None, None, None))
    x = run_configuration(x, t2 - t1, HALF, rng)
    y = run_configuration(y, t2 - t1, HALF, rng)
    bc = basket_counts(Configuration(tuple(int(c) for c in x)), part)
    bc2 = basket_counts(Configuration(tuple(int(c) for c in y)), part)
    rad = r / math.sqrt(n)
    events[2] = in_region(bc.column_sums(), rad)
    events[3] = in_region(bc2.column_sums(), rad)
    bc, bc2 = run_proportion_with_baskets(semi_coordinatewise_table, bc, bc2, t3 - t2, rng)
    bc, bc2 = run_proportion_with_baskets(semi_sync_table, bc, bc2, t4 - t3, rng)
    events[4] = bc.column_sums() == bc2.column_sums()
    events[5] = baskets_in_region(bc, r1 / math.sqrt(n)) and baskets_in_region(bc2, r1 / math.sqrt(n))
    if not events[4]:
        events[6] = False
        return OverallRun(bounds, sizes, tuple(events), (None, None, None))
    run = run_basketwise(bc, bc2, t5 - t4, None, rng)
    events[6] = run.tau[2] is not None
    return OverallRun(bounds, sizes, tuple(events), run.tau)
