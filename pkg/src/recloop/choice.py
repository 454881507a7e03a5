"""Autonomous choice model.

Users who do not follow a recommendation pick from a personal candidate set
with softmax probabilities over a noisy utility

    V(u, i) = c_u + G_u * log(1 + s_i) + lam / (1 + s_i) + xi,

where ``c_u`` is the user's mean number of events per active day, ``G_u``
the Gini of their item counts, ``s_i`` the item's total consumption and
``xi`` a fresh standard-normal draw. ``tau_u`` scales the utilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import InteractionLog
from .metrics import gini

TAU_MIN = 0.05
TAU_MAX = 5.0
TAU_DEFAULT = 1.0

GPOP = "GPop"
IPOP = "IPop"
UNKNOWN = "Unknown"


def _row_gini(row: np.ndarray) -> float:
    nz = row[row > 0]
    return gini(nz) if len(nz) else 0.0


class PopulationStats:
    """Per-user and per-item counters, advanced one day at a time.

    ``counts`` is a dense users x items matrix of cumulative event counts.
    ``day`` is the last day folded in; updates for earlier days are refused.
    """

    def __init__(self, n_users: int, n_items: int):
        self.n_users = n_users
        self.n_items = n_items
        self.counts = np.zeros((n_users, n_items), dtype=np.int64)
        self.strength = np.zeros(n_items, dtype=np.int64)
        self.popularity = np.zeros(n_items, dtype=np.int64)
        self.events = np.zeros(n_users, dtype=np.int64)
        self.active_days = np.zeros(n_users, dtype=np.int64)
        self.last_day = np.full(n_users, -1, dtype=np.int64)
        self.gini = np.zeros(n_users, dtype=np.float64)
        self.tau = np.full(n_users, TAU_DEFAULT, dtype=np.float64)
        self.day = -1

    @classmethod
    def from_log(cls, log: InteractionLog, window=None) -> "PopulationStats":
        """Statistics computed in one pass over a log window."""
        part = log if window is None else log.window(*window)
        stats = cls(log.n_users, log.n_items)
        np.add.at(stats.counts, (part.users, part.items), 1)
        stats.strength = stats.counts.sum(axis=0)
        stats.popularity = (stats.counts > 0).sum(axis=0)
        stats.events = stats.counts.sum(axis=1)
        if len(part):
            pairs = np.unique(part.users * (part.horizon + 1) + part.days)
            stats.active_days = np.bincount(pairs // (part.horizon + 1), minlength=log.n_users)
            np.maximum.at(stats.last_day, part.users, part.days)
            stats.day = part.horizon
        for u in np.flatnonzero(stats.events):
            stats.gini[u] = _row_gini(stats.counts[u])
        return stats

    def copy(self) -> "PopulationStats":
        new = PopulationStats.__new__(PopulationStats)
        new.__dict__ = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return new

    @property
    def mean_daily_events(self) -> np.ndarray:
        """``c_u``: events per active day (0 for users never active)."""
        return np.divide(
            self.events, self.active_days,
            out=np.zeros(self.n_users), where=self.active_days > 0,
        )

    def c(self, u: int) -> float:
        days = self.active_days[u]
        return float(self.events[u] / days) if days else 0.0

    def distinct_count(self, u: int) -> int:
        return int(np.count_nonzero(self.counts[u]))

    def update(self, day: int, users, items) -> "PopulationStats":
        """Fold in the events of ``day`` (in place) and return self."""
        if day < self.day:
            raise ValueError(f"update for day {day} after day {self.day}")
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self.day = day
        if not len(users):
            return self
        pairs = np.unique(users * self.n_items + items)
        pu, pi = pairs // self.n_items, pairs % self.n_items
        fresh = self.counts[pu, pi] == 0
        np.add.at(self.popularity, pi[fresh], 1)
        np.add.at(self.counts, (users, items), 1)
        np.add.at(self.strength, items, 1)
        np.add.at(self.events, users, 1)
        touched = np.unique(users)
        new_day = self.last_day[touched] != day
        self.active_days[touched[new_day]] += 1
        self.last_day[touched] = day
        for u in touched:
            self.gini[u] = _row_gini(self.counts[u])
        return self

    def same_as(self, other: "PopulationStats") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("counts", "strength", "popularity", "events", "active_days", "gini")
        )


# --------------------------------------------------------------------------
# exploration temperature


def estimate_tau(days, items, tau_min=TAU_MIN, tau_max=TAU_MAX, tau_default=TAU_DEFAULT) -> float:
    """Slope of the cumulative new-item curve over a user's active days.

    ``days``/``items`` are the user's events already restricted to the
    estimation window. The least-squares slope of (day, distinct items so
    far) is clamped to ``[tau_min, tau_max]``; fewer than two active days
    give ``tau_default``.
    """
    days = np.asarray(days, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    active = np.unique(days)
    if len(active) < 2:
        return tau_default
    order = np.lexsort((days, items))
    first = np.r_[True, items[order][1:] != items[order][:-1]]
    first_day = days[order][first]
    new_per_day = np.array([np.count_nonzero(first_day == d) for d in active], dtype=np.float64)
    x = active.astype(np.float64)
    y = np.cumsum(new_per_day)
    xc = x - x.mean()
    slope = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
    return min(max(slope, tau_min), tau_max)


def estimate_taus(log: InteractionLog, window=None, **bounds) -> np.ndarray:
    """``estimate_tau`` for every catalog user over a log window."""
    part = log if window is None else log.window(*window)
    taus = np.full(log.n_users, bounds.get("tau_default", TAU_DEFAULT), dtype=np.float64)
    order = np.argsort(part.users, kind="stable")
    users = part.users[order]
    starts = np.r_[0, np.nonzero(np.diff(users))[0] + 1] if len(users) else np.array([], dtype=np.int64)
    ends = np.r_[starts[1:], len(users)]
    for lo, hi in zip(starts, ends):
        sel = order[lo:hi]
        taus[users[lo]] = estimate_tau(part.days[sel], part.items[sel], **bounds)
    return taus


# --------------------------------------------------------------------------
# candidate sets


@dataclass(frozen=True)
class CandidateSet:
    items: np.ndarray
    tags: tuple[str, ...]
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.items)

    def composition(self) -> dict[str, int]:
        return {t: self.tags.count(t) for t in (GPOP, IPOP, UNKNOWN)}


def popularity_order(counts) -> np.ndarray:
    """Indices with positive count, by count descending then index ascending."""
    counts = np.asarray(counts)
    nz = np.flatnonzero(counts > 0)
    return nz[np.argsort(-counts[nz], kind="stable")]


def quotas(size: int) -> tuple[int, int, int]:
    g = math.ceil(0.4 * size)
    return g, g, size - 2 * g


def build_candidate_set(
    u: int,
    stats: PopulationStats,
    size: int,
    gpop_counts,
    rng: np.random.Generator,
    gpop_order: np.ndarray | None = None,
) -> CandidateSet:
    """Mix globally popular, personally popular and never-seen items.

    ``gpop_counts`` are per-item event counts over the most recent completed
    epoch. Each source fills its quota in rank order, skipping items already
    taken; unfilled slots go to GPop, then IPop, then Unknown.
    """
    if size < 5:
        raise ValueError("candidate set size must be >= 5")
    if gpop_order is None:
        gpop_order = popularity_order(gpop_counts)
    own = stats.counts[u]
    sources = (
        (GPOP, gpop_order),
        (IPOP, popularity_order(own)),
        (UNKNOWN, rng.permutation(np.flatnonzero(own == 0))),
    )
    taken = np.zeros(stats.n_items, dtype=bool)
    cursor = [0, 0, 0]
    items: list[int] = []
    tags: list[str] = []

    def take(k: int, n: int) -> int:
        tag, order = sources[k]
        got = 0
        while got < n and cursor[k] < len(order):
            i = int(order[cursor[k]])
            cursor[k] += 1
            if not taken[i]:
                taken[i] = True
                items.append(i)
                tags.append(tag)
                got += 1
        return got

    for k, q in enumerate(quotas(size)):
        take(k, q)
    for k in range(3):
        missing = size - len(items)
        if missing <= 0:
            break
        take(k, missing)
    return CandidateSet(np.asarray(items, dtype=np.int64), tuple(tags), degenerate=len(items) < size)


# --------------------------------------------------------------------------
# utility and sampling


def utility(c_u, g_u, strength, lam: float, noise=0.0):
    """Utility of items with total consumption ``strength`` (vectorised)."""
    s = np.asarray(strength, dtype=np.float64)
    return c_u + g_u * np.log1p(s) + lam / (1.0 + s) + noise


def choice_distribution(utilities, tau: float) -> np.ndarray:
    """Softmax of ``utilities / tau`` along the last axis."""
    z = np.asarray(utilities, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def inverse_cdf(probs, draws) -> np.ndarray:
    """Inverse-CDF sampling, one index per uniform draw.

    ``probs`` is either one distribution shared by all draws or a matrix
    with one row per draw.
    """
    cdf = np.cumsum(probs, axis=-1)
    draws = np.asarray(draws, dtype=np.float64)
    if cdf.ndim == 1:
        idx = np.searchsorted(cdf, draws * cdf[-1], side="right")
    else:
        idx = (cdf <= (draws * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def sample_autonomous(
    u: int,
    candidates: CandidateSet,
    stats: PopulationStats,
    lam: float,
    tau: float,
    rng: np.random.Generator,
    size: int | None = None,
    noise: bool = True,
):
    """Draw item(s) from the softmax choice distribution over ``candidates``.

    Every draw gets its own noise vector over the candidates, followed by one
    uniform for the inverse CDF. Returns an int, or an array when ``size`` is
    given.
    """
    n = 1 if size is None else size
    items = candidates.items
    if n == 0:
        return np.empty(0, dtype=np.int64)
    base = utility(stats.c(u), stats.gini[u], stats.strength[items], lam)
    if noise:
        probs = choice_distribution(base + rng.standard_normal((n, len(items))), tau)
    else:
        probs = choice_distribution(base, tau)
    picks = items[inverse_cdf(probs, rng.random(n))]
    return int(picks[0]) if size is None else picks
