"""Systemic-effect measures over interaction-log windows.

All functions take an optional half-open day window ``(start, end)``;
``None`` means the whole log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .dataset import InteractionLog

EXACT_JACCARD_MAX_USERS = 2000
SAMPLED_JACCARD_PAIRS = 1_000_000


def _window(log: InteractionLog, window) -> InteractionLog:
    return log if window is None else log.window(*window)


def gini(w) -> float:
    """Population Gini coefficient of a non-negative weight vector.

    Equals ``sum_ij |w_i - w_j| / (2 d^2 mean(w))``, evaluated through the
    sorted form ``sum_k (2k - d - 1) w_(k) / (d sum(w))``.
    """
    w = np.sort(np.asarray(w, dtype=np.float64))
    d = len(w)
    if d == 0:
        raise ValueError("gini of an empty vector")
    if w[0] < 0:
        raise ValueError("gini needs non-negative weights")
    total = w.sum()
    if total <= 0:
        raise ValueError("gini of an all-zero vector")
    k = np.arange(1, d + 1, dtype=np.float64)
    return float(np.dot(2 * k - d - 1, w) / (d * total))


def gini_pairwise(w) -> float:
    """O(d^2) double-sum form; kept as an independent reference."""
    w = np.asarray(w, dtype=np.float64)
    d = len(w)
    return float(np.abs(w[:, None] - w[None, :]).sum() / (2 * d * d * w.mean()))


def _user_item_counts(log: InteractionLog):
    """Distinct (user, item) pairs with their counts, sorted by user."""
    key = log.users * log.n_items + log.items
    pairs, counts = np.unique(key, return_counts=True)
    return pairs // log.n_items, pairs % log.n_items, counts


def per_user_gini(log: InteractionLog, window=None) -> dict[int, float]:
    """Gini of each user's item-count vector over the items they consumed."""
    part = _window(log, window)
    if not len(part):
        return {}
    users, _, counts = _user_item_counts(part)
    # sort counts ascending within each user block
    order = np.lexsort((counts, users))
    users, counts = users[order], counts[order].astype(np.float64)
    starts = np.r_[0, np.nonzero(np.diff(users))[0] + 1]
    d = np.diff(np.r_[starts, len(users)])
    rank = np.arange(len(users)) - np.repeat(starts, d) + 1
    d_each = np.repeat(d, d)
    num = np.add.reduceat((2 * rank - d_each - 1) * counts, starts)
    den = d * np.add.reduceat(counts, starts)
    return dict(zip(users[starts].tolist(), (num / den).tolist()))


def mean_individual_gini(log: InteractionLog, window=None) -> float:
    g = per_user_gini(log, window)
    if not g:
        raise ValueError("no events in window")
    return math.fsum(g.values()) / len(g)


def item_strength(log: InteractionLog, window=None) -> np.ndarray:
    """Event count per catalog item."""
    part = _window(log, window)
    return np.bincount(part.items, minlength=log.n_items)


def item_user_popularity(log: InteractionLog, window=None) -> np.ndarray:
    """Number of distinct users per catalog item."""
    part = _window(log, window)
    if not len(part):
        return np.zeros(log.n_items, dtype=np.int64)
    _, items, _ = _user_item_counts(part)
    return np.bincount(items, minlength=log.n_items)


def collective_gini(log: InteractionLog, window=None) -> float:
    """Gini of item strengths over the full catalog, unconsumed items included."""
    s = item_strength(log, window)
    if s.sum() == 0:
        raise ValueError("no events in window")
    return gini(s)


def rank_frequency(v) -> list[tuple[int, float]]:
    """Values sorted descending with 1-based ranks; zeros stay at the tail."""
    v = np.asarray(v)
    if not len(v):
        raise ValueError("empty vector")
    ranked = np.sort(v, kind="stable")[::-1]
    return [(r, x) for r, x in enumerate(ranked.tolist(), start=1)]


def _user_sets(log: InteractionLog):
    users, items, _ = _user_item_counts(log)
    active = np.unique(users)
    row = np.searchsorted(active, users)
    mat = sparse.csr_matrix(
        (np.ones(len(items), dtype=np.int64), (row, items)), shape=(len(active), log.n_items)
    )
    return active, mat


def mean_jaccard(log: InteractionLog, window=None, sample_pairs: int | None = None, seed: int = 0) -> float:
    """Average Jaccard index of item sets over unordered pairs of distinct users.

    Users without events in the window are ignored. With ``sample_pairs``
    smaller than the number of pairs, the mean is estimated from that many
    uniformly drawn pairs (with replacement), which is approximate.
    """
    part = _window(log, window)
    active, mat = _user_sets(part)
    n = len(active)
    if n < 2:
        raise ValueError("mean_jaccard needs at least two users with events")
    n_pairs = n * (n - 1) // 2
    sizes = np.asarray(mat.sum(axis=1)).ravel()
    if sample_pairs is None or sample_pairs >= n_pairs:
        inter = (mat @ mat.T).toarray()
        iu, ju = np.triu_indices(n, k=1)
        common = inter[iu, ju]
        union = sizes[iu] + sizes[ju] - common
        return math.fsum((common / union).tolist()) / n_pairs
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n, size=sample_pairs)
    b = rng.integers(0, n - 1, size=sample_pairs)
    b = b + (b >= a)
    common = np.asarray(mat[a].multiply(mat[b]).sum(axis=1)).ravel()
    union = sizes[a] + sizes[b] - common
    return math.fsum((common / union).tolist()) / sample_pairs


def auto_mean_jaccard(log: InteractionLog, window=None, seed: int = 0) -> float:
    """Exact mean Jaccard up to EXACT_JACCARD_MAX_USERS active users, sampled above."""
    part = _window(log, window)
    n = len(np.unique(part.users))
    pairs = None if n <= EXACT_JACCARD_MAX_USERS else SAMPLED_JACCARD_PAIRS
    return mean_jaccard(part, sample_pairs=pairs, seed=seed)


def item_coverage(items, n_items: int) -> float:
    """Share of the catalog that appears in ``items``.

    ``items`` is an InteractionLog (its events) or any iterable of item
    indices, such as concatenated top-k lists.
    """
    if n_items < 1:
        raise ValueError("catalog must be non-empty")
    if isinstance(items, InteractionLog):
        items = items.items
    arr = items if isinstance(items, np.ndarray) else np.fromiter(items, dtype=np.int64)
    seen = np.unique(arr)
    return len(seen) / n_items


def coconsumption_edges(log: InteractionLog, window=None, focus_items=None) -> list[tuple[int, int, int]]:
    """Item pairs with the number of users who consumed both.

    Returned as ``(item_a, item_b, weight)`` with ``item_a < item_b``,
    sorted by weight descending then by item indices.
    """
    part = _window(log, window)
    if not len(part):
        return []
    _, mat = _user_sets(part)
    if focus_items is not None:
        keep = np.zeros(log.n_items, dtype=bool)
        keep[np.asarray(list(focus_items), dtype=np.int64)] = True
        mat = mat @ sparse.diags(keep.astype(np.int64))
    co = sparse.triu(mat.T @ mat, k=1).tocoo()
    mask = co.data > 0
    a, b, w = co.row[mask], co.col[mask], co.data[mask]
    order = np.lexsort((b, a, -w))
    return [(int(x), int(y), int(z)) for x, y, z in zip(a[order], b[order], w[order])]


def write_edges(edges, item_ids, fh) -> None:
    fh.write("item_a,item_b,weight\n")
    for a, b, w in edges:
        fh.write(f"{item_ids[a]},{item_ids[b]},{w}\n")


@dataclass
class MetricSnapshot:
    mean_individual_gini: float
    collective_gini: float
    mean_jaccard: float
    item_coverage: float
    item_strength_ranked: np.ndarray
    item_popularity_ranked: np.ndarray


def snapshot(log: InteractionLog, window=None, seed: int = 0) -> MetricSnapshot:
    part = _window(log, window)
    return MetricSnapshot(
        mean_individual_gini=mean_individual_gini(part),
        collective_gini=collective_gini(part),
        mean_jaccard=auto_mean_jaccard(part, seed=seed),
        item_coverage=item_coverage(part, log.n_items),
        item_strength_ranked=np.sort(item_strength(part))[::-1],
        item_popularity_ranked=np.sort(item_user_popularity(part))[::-1],
    )
