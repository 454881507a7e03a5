"""Interaction logs: ingestion, filtering, temporal splits, activity traces
and a synthetic generator for desk-scale experiments.

Days are integer indices from the first day of the log. A month is a block
of ``MONTH_DAYS`` consecutive day indices and a year is twelve such months.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Iterator, Sequence

import numpy as np

MONTH_DAYS = 30
MONTHS_PER_YEAR = 12

CANONICAL_HEADER = ("user", "item", "day")


class DataError(ValueError):
    """Raised for unreadable, malformed or empty interaction data."""


def _sort_ids(ids) -> tuple[str, ...]:
    ids = set(ids)
    if ids and all(s.lstrip("-").isdigit() for s in ids):
        return tuple(sorted(ids, key=int))
    return tuple(sorted(ids))


@dataclass(frozen=True, eq=False)
class InteractionLog:
    """Timestamped (user, item, day) events with dense id maps.

    ``user_ids[k]`` is the external identifier of dense user index ``k``
    (likewise for items). The id maps double as the user and item catalogs,
    so they may contain entries without events.
    """

    users: np.ndarray
    items: np.ndarray
    days: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    _user_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("users", "items", "days"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.users) == len(self.items) == len(self.days)):
            raise ValueError("event columns must have equal length")
        if len(self.days) and np.any(np.diff(self.days) < 0):
            raise ValueError("events must be sorted by day")

    def __len__(self) -> int:
        return len(self.days)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def horizon(self) -> int:
        """Largest day index present, or -1 for an empty log."""
        return int(self.days[-1]) if len(self.days) else -1

    @property
    def span(self) -> int:
        return self.horizon + 1

    def user_index(self, user_id: str) -> int:
        if self._user_index is None:
            object.__setattr__(self, "_user_index", {u: k for k, u in enumerate(self.user_ids)})
        return self._user_index[user_id]

    def replace_events(self, users, items, days) -> "InteractionLog":
        return InteractionLog(users, items, days, self.user_ids, self.item_ids)

    def select(self, mask: np.ndarray) -> "InteractionLog":
        return self.replace_events(self.users[mask], self.items[mask], self.days[mask])

    def window(self, start: int | None = None, end: int | None = None) -> "InteractionLog":
        """Events with ``start <= day < end`` (either bound may be open)."""
        lo = 0 if start is None else np.searchsorted(self.days, start, side="left")
        hi = len(self.days) if end is None else np.searchsorted(self.days, end, side="left")
        return self.replace_events(self.users[lo:hi], self.items[lo:hi], self.days[lo:hi])

    def append(self, users, items, days) -> "InteractionLog":
        """New log with extra events appended; they must not precede the horizon."""
        days = np.asarray(days, dtype=np.int64)
        if len(days) and len(self.days) and days.min() < self.horizon:
            raise ValueError("appended events precede the log horizon")
        return self.replace_events(
            np.concatenate([self.users, np.asarray(users, dtype=np.int64)]),
            np.concatenate([self.items, np.asarray(items, dtype=np.int64)]),
            np.concatenate([self.days, days]),
        )

    def canonical(self) -> "InteractionLog":
        """Same events sorted by day, then user, then item."""
        order = np.lexsort((self.items, self.users, self.days))
        return self.replace_events(self.users[order], self.items[order], self.days[order])

    def count_matrix(self):
        """Sparse user x item matrix of event counts over the full catalog."""
        from scipy import sparse

        mat = sparse.csr_matrix(
            (np.ones(len(self), dtype=np.float64), (self.users, self.items)),
            shape=(self.n_users, self.n_items),
        )
        mat.sum_duplicates()
        return mat

    def same_events(self, other: "InteractionLog") -> bool:
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.days, other.days)
        )


def from_events(users: Sequence[str], items: Sequence[str], days: Sequence[int]) -> InteractionLog:
    """Build a canonical log from external identifiers and day indices."""
    users = [str(u) for u in users]
    items = [str(i) for i in items]
    days = np.asarray(days, dtype=np.int64)
    if len(days) and days.min() < 0:
        raise DataError("day indices must be non-negative")
    user_ids = _sort_ids(users)
    item_ids = _sort_ids(items)
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    u_idx = np.fromiter((umap[u] for u in users), dtype=np.int64, count=len(users))
    i_idx = np.fromiter((imap[i] for i in items), dtype=np.int64, count=len(items))
    order = np.lexsort((i_idx, u_idx, days))
    return InteractionLog(u_idx[order], i_idx[order], days[order], user_ids, item_ids)


# --------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class Schema:
    """Column mapping for delimiter-separated input.

    Columns are header names (str) or zero-based positions (int).
    """

    user: str | int
    item: str | int
    time: str | int
    delimiter: str = ","
    header: bool = True


PRESETS = {
    # Last.fm 1K listening log:
    # userid, timestamp, artist-mbid, artist-name, track-mbid, track-name
    "lastfm": Schema(user=0, item=3, time=1, delimiter="\t", header=False),
    # Amazon purchase export, one row per order line
    "amazon": Schema(
        user="Survey ResponseID",
        item="ASIN/ISBN (Product Code)",
        time="Order Date",
        delimiter=",",
        header=True,
    ),
    "canonical": Schema(user="user", item="item", time="day", delimiter=",", header=True),
}


def parse_date(value: str) -> date:
    """Calendar date (UTC) of an epoch-seconds or ISO-8601 timestamp."""
    value = value.strip()
    try:
        secs = float(value)
    except ValueError:
        pass
    else:
        return datetime.fromtimestamp(secs, tz=timezone.utc).date()
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    stamp = datetime.fromisoformat(value)
    if stamp.tzinfo is not None:
        stamp = stamp.astimezone(timezone.utc)
    return stamp.date()


def _resolve(col, header, what):
    if isinstance(col, int):
        return col
    if header is None:
        raise DataError(f"{what} column {col!r} given by name but the input has no header")
    try:
        return header.index(col)
    except ValueError:
        raise DataError(f"{what} column {col!r} not found in header {header}") from None


def load_interactions(path: str | os.PathLike, schema: Schema | str = "canonical") -> InteractionLog:
    """Read a delimiter-separated file into a day-indexed log.

    Day 0 is the calendar day of the earliest timestamp. For the canonical
    schema the time column already holds day indices and is used verbatim.
    """
    if isinstance(schema, str):
        try:
            schema = PRESETS[schema]
        except KeyError:
            raise DataError(f"unknown schema preset {schema!r}") from None
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    canonical = schema == PRESETS["canonical"]
    reader = csv.reader(io.StringIO(text), delimiter=schema.delimiter)
    header = None
    first_row = 1
    if schema.header:
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        first_row = 2
    cu = _resolve(schema.user, header, "user")
    ci = _resolve(schema.item, header, "item")
    ct = _resolve(schema.time, header, "time")
    need = max(cu, ci, ct)

    users, items, stamps = [], [], []
    for rowno, row in enumerate(reader, start=first_row):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) <= need:
            raise DataError(f"{path}: row {rowno}: expected at least {need + 1} columns, got {len(row)}")
        user, item, raw = row[cu].strip(), row[ci].strip(), row[ct]
        if not user or not item:
            raise DataError(f"{path}: row {rowno}: empty user or item")
        try:
            stamp = int(raw) if canonical else parse_date(raw).toordinal()
        except (ValueError, OverflowError, OSError):
            raise DataError(f"{path}: row {rowno}: unparseable timestamp {raw!r}") from None
        users.append(user)
        items.append(item)
        stamps.append(stamp)
    if not users:
        raise DataError(f"{path}: no interactions after parsing")
    stamps = np.asarray(stamps, dtype=np.int64)
    days = stamps if canonical else stamps - stamps.min()
    return from_events(users, items, days)


def write_log(log: InteractionLog, path_or_buf) -> None:
    """Write the canonical ``user,item,day`` form, sorted by day, user, item."""
    log = log.canonical()
    own = isinstance(path_or_buf, (str, os.PathLike))
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        fh.write(",".join(CANONICAL_HEADER) + "\n")
        uid, iid = log.user_ids, log.item_ids
        fh.writelines(
            f"{uid[u]},{iid[i]},{d}\n" for u, i, d in zip(log.users.tolist(), log.items.tolist(), log.days.tolist())
        )
    finally:
        if own:
            fh.close()


def read_log(path) -> InteractionLog:
    return load_interactions(path, "canonical")


# --------------------------------------------------------------------------
# preprocessing


def _redensify(log: InteractionLog, keep: np.ndarray) -> InteractionLog:
    users, items, days = log.users[keep], log.items[keep], log.days[keep]
    u_keep = np.unique(users)
    i_keep = np.unique(items)
    u_new = np.full(log.n_users, -1, dtype=np.int64)
    u_new[u_keep] = np.arange(len(u_keep))
    i_new = np.full(log.n_items, -1, dtype=np.int64)
    i_new[i_keep] = np.arange(len(i_keep))
    return InteractionLog(
        u_new[users],
        i_new[items],
        days,
        tuple(log.user_ids[k] for k in u_keep),
        tuple(log.item_ids[k] for k in i_keep),
    )


def filter_active_users(
    log: InteractionLog, min_active_months: int = 3, month_days: int = MONTH_DAYS
) -> InteractionLog:
    """Keep users with at least ``min_active_months`` active months in every year.

    Years are complete 360-day blocks from day 0. A month counts as active
    for a user if it holds at least one of their events. Items left without events are dropped and both maps re-densified.
    """
    if min_active_months < 1:
        raise ValueError("min_active_months must be >= 1")
    year_days = month_days * MONTHS_PER_YEAR
    if log.span < year_days:
        raise DataError(f"log spans {log.span} days; filtering needs at least one year ({year_days} days)")
    # only complete years are judged; days after the last full year are kept unscored
    n_years = log.span // year_days
    month = log.days // month_days
    scored = month < n_years * MONTHS_PER_YEAR
    pairs = np.unique(log.users[scored] * (n_years * MONTHS_PER_YEAR) + month[scored])
    pair_user = pairs // (n_years * MONTHS_PER_YEAR)
    pair_year = (pairs % (n_years * MONTHS_PER_YEAR)) // MONTHS_PER_YEAR
    per_year = np.zeros((log.n_users, n_years), dtype=np.int64)
    np.add.at(per_year, (pair_user, pair_year), 1)
    good = np.all(per_year >= min_active_months, axis=1)
    if not good.any():
        raise DataError("all users filtered out")
    return _redensify(log, good[log.users])


@dataclass(frozen=True)
class TemporalSplit:
    """Half-open day ranges for train/validation/test and the first simulated day."""

    train_days: tuple[int, int]
    valid_days: tuple[int, int]
    test_days: tuple[int, int]
    sim_start_day: int

    def __post_init__(self):
        a, b, c = self.train_days, self.valid_days, self.test_days
        if not (a[0] < a[1] == b[0] <= b[1] == c[0] < c[1] == self.sim_start_day):
            raise ValueError(f"ranges must be contiguous and ordered: {a} {b} {c} start={self.sim_start_day}")


def temporal_holdout(
    log: InteractionLog,
    month_days: int = MONTH_DAYS,
    train_months: int = 4,
    valid_months: int = 1,
    test_months: int = 1,
) -> TemporalSplit:
    """4/1/1-month holdout; simulation starts with the following month.

    The log must extend at least one month past the test range.
    """
    t = train_months * month_days
    v = t + valid_months * month_days
    s = v + test_months * month_days
    if log.span < s + month_days:
        raise DataError(f"log spans {log.span} days; the holdout needs at least {s + month_days}")
    return TemporalSplit((0, t), (t, v), (v, s), s)


@dataclass(frozen=True)
class ActivityTrace:
    """Who is active on each day of a window and how many events they produce.

    Arrays are sorted by (day, user); each (day, user) appears once.
    """

    window: tuple[int, int]
    days: np.ndarray
    users: np.ndarray
    sizes: np.ndarray

    def _slice(self, day: int) -> slice:
        lo = np.searchsorted(self.days, day, side="left")
        hi = np.searchsorted(self.days, day, side="right")
        return slice(lo, hi)

    def active_users(self, day: int) -> np.ndarray:
        return self.users[self._slice(day)]

    def basket_size(self, day: int, user: int) -> int:
        sl = self._slice(day)
        hit = np.nonzero(self.users[sl] == user)[0]
        return int(self.sizes[sl][hit[0]]) if len(hit) else 0

    def total(self) -> int:
        return int(self.sizes.sum())

    def by_day(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        """Yield (day, users, basket sizes) for every day of the window."""
        for day in range(*self.window):
            sl = self._slice(day)
            yield day, self.users[sl], self.sizes[sl]

    def covers(self, start: int, end: int) -> bool:
        return self.window[0] <= start and end <= self.window[1]


def build_activity_trace(log: InteractionLog, window: tuple[int, int]) -> ActivityTrace:
    start, end = window
    if end <= start:
        raise DataError(f"empty trace window {window}")
    if end - 1 > log.horizon:
        raise DataError(f"trace window {window} extends past the log horizon {log.horizon}")
    part = log.window(start, end)
    key = part.days * log.n_users + part.users
    uniq, counts = np.unique(key, return_counts=True)
    return ActivityTrace(
        window=(int(start), int(end)),
        days=uniq // log.n_users,
        users=uniq % log.n_users,
        sizes=counts.astype(np.int64),
    )


# --------------------------------------------------------------------------
# synthetic data

AFFINITY = 5.0


def synthetic_clusters(n_users: int, n_items: int, n_clusters: int) -> tuple[np.ndarray, np.ndarray]:
    """Planted (user cluster, item block) assignment used by ``generate_synthetic``."""
    return np.arange(n_users) % n_clusters, np.arange(n_items) % n_clusters


def generate_synthetic(
    n_users: int,
    n_items: int,
    n_days: int,
    popularity_exponent: float = 1.0,
    n_clusters: int = 1,
    events_per_user_day: float = 1.0,
    seed: int = 0,
) -> InteractionLog:
    """Power-law popularity with planted user clusters.

    Item ``i`` has base weight ``(i + 1) ** -popularity_exponent``. Blocks
    interleave item indices so every block mixes head and tail items; users
    weight their own block by ``AFFINITY``. Daily event counts per user are
    Poisson with mean ``events_per_user_day``.
    """
    if min(n_users, n_items, n_days, n_clusters) < 1:
        raise ValueError("counts must be >= 1")
    if popularity_exponent < 0 or events_per_user_day < 0:
        raise ValueError("popularity_exponent and events_per_user_day must be >= 0")
    rng = np.random.default_rng(seed)
    base = np.arange(1, n_items + 1, dtype=np.float64) ** -popularity_exponent
    user_cluster, item_block = synthetic_clusters(n_users, n_items, n_clusters)
    per_day = rng.poisson(events_per_user_day, size=(n_users, n_days))

    users, items, days = [], [], []
    day_grid = np.arange(n_days)
    for c in range(n_clusters):
        members = np.nonzero(user_cluster == c)[0]
        if not len(members):
            continue
        w = base * np.where(item_block == c, AFFINITY, 1.0)
        counts = per_day[members]
        n = int(counts.sum())
        users.append(np.repeat(np.repeat(members, n_days), counts.ravel()))
        days.append(np.repeat(np.tile(day_grid, len(members)), counts.ravel()))
        items.append(rng.choice(n_items, size=n, p=w / w.sum()))
    u = np.concatenate(users)
    i = np.concatenate(items)
    d = np.concatenate(days)
    order = np.lexsort((i, u, d))
    return InteractionLog(
        u[order], i[order], d[order],
        tuple(str(k) for k in range(n_users)),
        tuple(str(k) for k in range(n_items)),
    )
