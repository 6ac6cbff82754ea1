"""Cyclic spin dynamics on {1,2,3}^n: configurations, counts, baskets, kernels.

Colors are stored 0-based (0, 1, 2) and advance by ``(c + 1) % 3``.  Every
constructor or accessor that talks to the outside world (``from_labels``,
``labels``) uses the 1-based labels 1, 2, 3.

Count vectors are the canonical state of the lumped (proportion) chain; the
proportion view ``S^k = c_k / n`` is derived on demand.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from numbers import Real
from typing import Iterable, NamedTuple, Sequence

import numpy as np

N_COLORS = 3


def advance(color: int) -> int:
    return (color + 1) % N_COLORS


@dataclass(frozen=True)
class ChainParams:
    """Population size ``n`` and advance probability ``p`` (0 < p < 1)."""

    n: int
    p: Real = 0.5

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p!r}")


@dataclass(frozen=True)
class Configuration:
    """A full spin state; ``colors[v]`` is the 0-based color of vertex ``v``."""

    colors: tuple

    def __post_init__(self):
        colors = tuple(int(c) for c in self.colors)
        if not colors:
            raise ValueError("a configuration needs at least one vertex")
        if any(c not in (0, 1, 2) for c in colors):
            raise ValueError(f"colors must be 0, 1 or 2 internally, got {colors}")
        object.__setattr__(self, "colors", colors)

    @classmethod
    def from_labels(cls, labels: Iterable[int]) -> "Configuration":
        labels = list(labels)
        if any(c not in (1, 2, 3) for c in labels):
            raise ValueError(f"labels must be 1, 2 or 3, got {labels}")
        return cls(tuple(c - 1 for c in labels))

    @classmethod
    def monochromatic(cls, n: int, label: int = 1) -> "Configuration":
        return cls.from_labels([label] * n)

    @classmethod
    def from_counts(cls, cv: "CountVector") -> "Configuration":
        """Vertices 0..c1-1 get color 1, the next c2 color 2, the rest color 3."""
        return cls(tuple([0] * cv.c1 + [1] * cv.c2 + [2] * cv.c3))

    @classmethod
    def uniform(cls, n: int, rng: np.random.Generator) -> "Configuration":
        """A draw from the uniform measure on {1,2,3}^n."""
        return cls(tuple(rng.integers(0, N_COLORS, size=n).tolist()))

    @property
    def n(self) -> int:
        return len(self.colors)

    def labels(self) -> list[int]:
        return [c + 1 for c in self.colors]

    def recolor(self, vertex: int, color: int) -> "Configuration":
        colors = list(self.colors)
        colors[vertex] = color
        return Configuration(tuple(colors))

    def rotate(self, shift: int) -> "Configuration":
        return Configuration(tuple((c + shift) % N_COLORS for c in self.colors))

    def permute(self, perm: Sequence[int]) -> "Configuration":
        """Vertex ``perm[v]`` of the result carries the color of vertex ``v``."""
        colors = [0] * self.n
        for v, w in enumerate(perm):
            colors[w] = self.colors[v]
        return Configuration(tuple(colors))

    def vertices_with(self, color: int, among: Iterable[int] | None = None) -> list[int]:
        pool = range(self.n) if among is None else among
        return [v for v in pool if self.colors[v] == color]

    def as_array(self) -> np.ndarray:
        return np.array(self.colors, dtype=np.int64)


class CountVector(NamedTuple):
    """Integer color counts; ``c1 + c2 + c3 == n``."""

    c1: int
    c2: int
    c3: int

    @property
    def n(self) -> int:
        return self.c1 + self.c2 + self.c3

    def proportions(self) -> np.ndarray:
        return np.array(self, dtype=float) / self.n

    def moved(self, src: int, dst: int) -> "CountVector":
        """Counts after one vertex changes color ``src -> dst`` (0-based)."""
        if src == dst:
            return self
        c = list(self)
        c[src] -= 1
        c[dst] += 1
        if c[src] < 0:
            raise ValueError(f"no vertex of color {src + 1} to move in {tuple(self)}")
        return CountVector(*c)

    def rotated(self, shift: int) -> "CountVector":
        """Counts of the configuration with every color advanced ``shift`` times."""
        return CountVector(*(self[(k - shift) % N_COLORS] for k in range(N_COLORS)))


def all_count_vectors(n: int) -> list[CountVector]:
    """Every count vector of size ``n``, lexicographic in ``(c1, c2)``."""
    return [CountVector(a, b, n - a - b) for a in range(n + 1) for b in range(n - a + 1)]


class CenteredNorms(NamedTuple):
    """Norms of ``S - (1/3, 1/3, 1/3)``: squared l2 and l-infinity."""

    l2sq: float
    linf: float


def centered_norms(cv: CountVector) -> CenteredNorms:
    n = cv.n
    # (c_k - n/3)/n = (3 c_k - n) / (3 n), kept integer until the last division
    dev = [3 * c - n for c in cv]
    return CenteredNorms(sum(d * d for d in dev) / (9 * n * n), max(abs(d) for d in dev) / (3 * n))


def centered_l2sq_exact(cv: CountVector) -> Fraction:
    n = cv.n
    return Fraction(sum((3 * c - n) ** 2 for c in cv), 9 * n * n)


def counts_of(cfg: Configuration) -> CountVector:
    c = [0, 0, 0]
    for color in cfg.colors:
        c[color] += 1
    return CountVector(*c)


def _times(p, count: int, total: int):
    # keeps Fraction inputs exact, floats stay floats
    if isinstance(p, Fraction):
        return p * Fraction(count, total)
    return p * count / total


def proportion_kernel_row(cv: CountVector, p=0.5) -> list[tuple[CountVector, float]]:
    """One-step law of the lumped chain from ``cv``.

    Hold with probability ``1 - p``; otherwise a uniformly chosen vertex of
    color ``k`` (probability ``S^k``) advances to ``k + 1``.  Moves out of
    empty colors are omitted, so the row has at most four entries.
    """
    n = cv.n
    row = [(cv, 1 - p)]
    for k in range(N_COLORS):
        if cv[k]:
            row.append((cv.moved(k, advance(k)), _times(p, cv[k], n)))
    return row


def configuration_kernel_row(cfg: Configuration, p=0.5) -> dict[Configuration, float]:
    """Exact one-step law of the full chain, by enumerating (vertex, coin)."""
    n = cfg.n
    hold = 1 - p
    advance_each = _times(p, 1, n)
    row = {cfg: hold}
    for v, color in enumerate(cfg.colors):
        nxt = cfg.recolor(v, advance(color))
        row[nxt] = row.get(nxt, 0) + advance_each
    return row


def step_configuration(cfg: Configuration, params: ChainParams, rng: np.random.Generator) -> Configuration:
    """One move of the cyclic dynamics: pick a vertex uniformly, advance it w.p. ``p``."""
    v = int(rng.integers(cfg.n))
    if rng.random() < params.p:
        return cfg.recolor(v, advance(cfg.colors[v]))
    return cfg


def _draw_moves(n: int, steps: int, p: float, rng: np.random.Generator):
    # one (vertex, advance?) pair per step, drawn in two vectorized blocks
    vertices = rng.integers(n, size=steps)
    advances = rng.random(steps) < p
    return vertices, advances


def run_configuration(colors: np.ndarray, steps: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Colors after ``steps`` moves; only the final state is formed."""
    colors = np.asarray(colors, dtype=np.int64)
    vertices, advances = _draw_moves(colors.size, steps, p, rng)
    bumps = np.bincount(vertices[advances], minlength=colors.size)
    return (colors + bumps) % N_COLORS


def count_path(colors: np.ndarray, steps: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Count vectors at times ``0..steps`` as a ``(steps + 1, 3)`` integer array.

    Uses the same draws as :func:`run_configuration`, so the last row equals
    the counts of its result.  A vertex's color before its r-th advance is
    its initial color plus r, which lets the whole path be built at once.
    """
    colors = np.asarray(colors, dtype=np.int64)
    n = colors.size
    vertices, advances = _draw_moves(n, steps, p, rng)
    when = np.flatnonzero(advances)
    who = vertices[when]
    order = np.argsort(who, kind="stable")
    sorted_who = who[order]
    group_start = np.searchsorted(sorted_who, sorted_who, side="left")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size) - group_start
    before = (colors[who] + rank) % N_COLORS
    delta = np.zeros((steps + 1, N_COLORS), dtype=np.int64)
    np.add.at(delta, (when + 1, before), -1)
    np.add.at(delta, (when + 1, (before + 1) % N_COLORS), 1)
    delta[0] = np.bincount(colors, minlength=N_COLORS)
    return np.cumsum(delta, axis=0)


@dataclass(frozen=True)
class BasketPartition:
    """A 3-way partition of the vertices; ``assignment[v]`` is a 0-based basket."""

    assignment: tuple

    def __post_init__(self):
        assignment = tuple(int(b) for b in self.assignment)
        if any(b not in (0, 1, 2) for b in assignment):
            raise ValueError("basket indices must be 0, 1 or 2 internally")
        object.__setattr__(self, "assignment", assignment)

    @classmethod
    def from_labels(cls, labels: Iterable[int]) -> "BasketPartition":
        return cls(tuple(b - 1 for b in labels))

    @classmethod
    def from_baskets(cls, n: int, baskets: Sequence[Iterable[int]]) -> "BasketPartition":
        """Build from three vertex collections (0-based vertex indices)."""
        assignment = [-1] * n
        for m, basket in enumerate(baskets):
            for v in basket:
                assignment[v] = m
        if -1 in assignment:
            raise ValueError("baskets do not cover every vertex")
        return cls(tuple(assignment))

    @classmethod
    def equal_thirds(cls, n: int) -> "BasketPartition":
        """Consecutive vertex blocks of sizes as equal as possible."""
        sizes = [n // 3 + (1 if m < n % 3 else 0) for m in range(3)]
        return cls(tuple(m for m in range(3) for _ in range(sizes[m])))

    @classmethod
    def by_color(cls, cfg: Configuration) -> "BasketPartition":
        """Basket ``k`` holds the vertices of color ``k``."""
        return cls(cfg.colors)

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def sizes(self) -> tuple[int, int, int]:
        s = [0, 0, 0]
        for b in self.assignment:
            s[b] += 1
        return tuple(s)

    def members(self, m: int) -> list[int]:
        return [v for v, b in enumerate(self.assignment) if b == m]

    def is_lambda_partition(self, lam: float) -> bool:
        return min(self.sizes) > lam * self.n


@dataclass(frozen=True)
class BasketCounts:
    """Row ``m`` holds the color counts inside basket ``m``."""

    counts: tuple

    def __post_init__(self):
        rows = tuple(tuple(int(x) for x in row) for row in self.counts)
        if len(rows) != 3 or any(len(r) != 3 for r in rows) or any(x < 0 for r in rows for x in r):
            raise ValueError(f"basket counts must be a non-negative 3x3 matrix, got {rows}")
        object.__setattr__(self, "counts", rows)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(sum(r) for r in self.counts)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    def column_sums(self) -> CountVector:
        return CountVector(*(sum(r[k] for r in self.counts) for k in range(3)))

    def row_proportions(self) -> np.ndarray:
        arr = np.array(self.counts, dtype=float)
        return arr / arr.sum(axis=1, keepdims=True)

    def moved(self, basket: int, src: int, dst: int) -> "BasketCounts":
        if src == dst:
            return self
        rows = [list(r) for r in self.counts]
        rows[basket][src] -= 1
        rows[basket][dst] += 1
        return BasketCounts(tuple(tuple(r) for r in rows))

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)


def basket_counts(cfg: Configuration, part: BasketPartition) -> BasketCounts:
    if part.n != cfg.n:
        raise ValueError("partition and configuration sizes differ")
    rows = [[0, 0, 0] for _ in range(3)]
    for color, b in zip(cfg.colors, part.assignment):
        rows[b][color] += 1
    return BasketCounts(tuple(tuple(r) for r in rows))


def q_deviation(bc: BasketCounts, cv: CountVector) -> np.ndarray:
    """``Q[m, k] = S^{m,k} - S^k``: basket proportions minus global proportions."""
    if bc.column_sums() != tuple(cv):
        raise ValueError(f"basket counts {bc.counts} do not aggregate to {tuple(cv)}")
    return bc.row_proportions() - cv.proportions()[None, :]


def basket_flow_probabilities(cfg: Configuration, part: BasketPartition, m: int, k: int, p=0.5):
    """Probabilities of the four moves that shift ``Q[m, k]`` in one step.

    Returns ``(enumerated, closed_form)``, each a 4-tuple for the events

    1. chosen vertex outside basket ``m`` leaves color ``k``;
    2. chosen vertex outside basket ``m`` enters color ``k``;
    3. chosen vertex inside basket ``m`` leaves color ``k``;
    4. chosen vertex inside basket ``m`` enters color ``k``.

    The enumerated values sum over every (vertex, coin) outcome; the closed
    forms are ``p (S^k - l S^{m,k})``, ``p (S^{k-1} - l S^{m,k-1})``,
    ``p l S^{m,k}`` and ``p l S^{m,k-1}`` with ``l = |B_m| / n``.
    """
    n = cfg.n
    enumerated = [0.0, 0.0, 0.0, 0.0]
    for v, color in enumerate(cfg.colors):
        new = advance(color)
        inside = part.assignment[v] == m
        if color == k and new != k:
            enumerated[2 if inside else 0] += p / n
        elif color != k and new == k:
            enumerated[3 if inside else 1] += p / n
    bc = basket_counts(cfg, part)
    size = bc.sizes[m]
    lam0 = size / n
    s = counts_of(cfg).proportions()
    sm = np.array(bc.counts[m], dtype=float) / size
    prev = (k - 1) % 3
    closed = (
        p * (s[k] - lam0 * sm[k]),
        p * (s[prev] - lam0 * sm[prev]),
        p * lam0 * sm[k],
        p * lam0 * sm[prev],
    )
    return tuple(enumerated), closed


def q_square_drift(cfg: Configuration, part: BasketPartition, m: int, k: int, p=0.5):
    """Exact one-step drift of ``Q[m,k]^2`` by enumeration, and its first-order form.

    Returns ``(exact, first_order)`` where ``first_order = Q[m,k] (Q[m,k-1] - Q[m,k]) / n``
    (valid for p = 1/2); the two differ by O(n^-2).
    """
    n = cfg.n
    cv = counts_of(cfg)
    q = q_deviation(basket_counts(cfg, part), cv)
    base = q[m, k] ** 2
    exact = 0.0
    for nxt, prob in configuration_kernel_row(cfg, p).items():
        q_next = q_deviation(basket_counts(nxt, part), counts_of(nxt))
        exact += prob * (q_next[m, k] ** 2 - base)
    first_order = q[m, k] * (q[m, (k - 1) % 3] - q[m, k]) / n
    return exact, first_order


def in_region(cv: Sequence[int], rho: float) -> bool:
    """``S`` lies in the open sup-ball ``||S - (1/3,1/3,1/3)||_inf < rho``."""
    n = sum(cv)
    return max(abs(3 * c - n) for c in cv) < 3 * rho * n


def in_upper_region(cv: Sequence[int], rho: float) -> bool:
    """Every proportion is below ``1/3 + rho``."""
    n = sum(cv)
    return max(cv) < (1 / 3 + rho) * n


def baskets_in_region(bc: BasketCounts, rho: float) -> bool:
    """Every non-empty basket row, as proportions, lies in the sup-ball of radius ``rho``."""
    return all(in_region(row, rho) for row in bc.counts if sum(row))
