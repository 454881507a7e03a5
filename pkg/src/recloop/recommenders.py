"""Recommender scoring models, top-k lists and offline ranking evaluation.

Every model scores the full catalog for any user of the catalog it was
trained on. Four kinds are built in: ``itemknn``, ``bpr``, ``popularity``
and ``random``. A new kind subclasses :class:`ScoringModel`, implements
``fit``/``score_matrix``/``_state``/``_load_state`` and registers itself in
``MODELS``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit, log_expit

from .choice import choice_distribution, inverse_cdf
from .dataset import InteractionLog

MODEL_FORMAT = "recloop-model"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RankedList:
    items: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


def rank(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k column indices per row; ties go to the lower item index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


class ScoringModel:
    kind = "base"
    #: scores are >= 0 by construction, so they can be normalised directly
    nonnegative = True
    defaults: dict = {}

    def __init__(self, n_users: int, n_items: int, **hyperparams):
        unknown = set(hyperparams) - set(self.defaults)
        if unknown:
            raise ValueError(f"unknown {self.kind} hyperparameters: {sorted(unknown)}")
        self.n_users = n_users
        self.n_items = n_items
        self.hyperparams = {**self.defaults, **hyperparams}
        self.seed = 0
        self.trained_on: tuple = ()

    def fit(self, log: InteractionLog, seed: int = 0) -> "ScoringModel":
        raise NotImplementedError

    def score_matrix(self, users=None) -> np.ndarray:
        """Scores of every catalog item for ``users`` (default: all users)."""
        raise NotImplementedError

    def scores(self, u: int) -> np.ndarray:
        self._check_user(u)
        return self.score_matrix(np.array([u]))[0]

    def score(self, u: int, i: int) -> float:
        if not 0 <= i < self.n_items:
            raise IndexError(f"unknown item index {i}")
        return float(self.scores(u)[i])

    def top_k(self, u: int, k: int) -> RankedList:
        s = self.scores(u)
        idx = rank(s, k)
        return RankedList(idx, s[idx])

    def top_k_all(self, k: int, users=None, exclude=None) -> tuple[np.ndarray, np.ndarray]:
        """(items, scores) matrices of the top-k lists for ``users``.

        ``exclude`` is an optional boolean matrix (users x items); excluded
        items get score ``-inf`` and therefore rank last.
        """
        s = self.score_matrix(users)
        if exclude is not None:
            s = np.where(exclude, -np.inf, s)
        idx = rank(s, k)
        return idx, np.take_along_axis(s, idx, axis=1)

    def _check_user(self, u: int) -> None:
        if not 0 <= u < self.n_users:
            raise IndexError(f"unknown user index {u}")

    # serialization -------------------------------------------------------

    def _state(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _load_state(self, arrays) -> None:
        raise NotImplementedError

    def save(self, path) -> None:
        meta = {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "hyperparams": self.hyperparams,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "seed": self.seed,
            "trained_on": [list(r) for r in self.trained_on],
        }
        np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **self._state())


def load_model(path) -> ScoringModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != MODEL_FORMAT or meta.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"{path}: not a {MODEL_FORMAT} v{MODEL_FORMAT_VERSION} file")
        model = make_model(meta["kind"], meta["n_users"], meta["n_items"], meta["hyperparams"])
        model.seed = meta["seed"]
        model.trained_on = tuple(tuple(r) for r in meta["trained_on"])
        model._load_state({k: data[k] for k in data.files if k != "meta"})
    return model


# --------------------------------------------------------------------------
# models


def cosine_similarity(counts, shrink: float = 0.0, k_neighbors: int | None = None, block: int = 512):
    """Item-item cosine over user-count vectors, damped by ``shrink``.

    ``sim(a, b) = <v_a, v_b> / (|v_a| |v_b| + shrink)`` with the diagonal
    removed. With ``k_neighbors`` only the largest entries of each row are
    kept (ties to the lower column index). Returns a CSR matrix.
    """
    counts = sparse.csr_matrix(counts, dtype=np.float64)
    n_items = counts.shape[1]
    norms = np.sqrt(np.asarray(counts.multiply(counts).sum(axis=0)).ravel())
    gram = (counts.T @ counts).tocsr()
    rows, cols, vals = [], [], []
    for lo in range(0, n_items, block):
        hi = min(lo + block, n_items)
        dense = gram[lo:hi].toarray()
        denom = norms[lo:hi, None] * norms[None, :] + shrink
        sim = np.divide(dense, denom, out=np.zeros_like(dense), where=denom > 0)
        sim[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        if k_neighbors is not None and k_neighbors < n_items:
            keep = np.argsort(-sim, axis=1, kind="stable")[:, :k_neighbors]
            mask = np.zeros_like(sim, dtype=bool)
            np.put_along_axis(mask, keep, True, axis=1)
            sim[~mask] = 0.0
        r, c = np.nonzero(sim)
        rows.append(r + lo)
        cols.append(c)
        vals.append(sim[r, c])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_items, n_items)
    )


class ItemKnn(ScoringModel):
    """Item-based neighbourhood model.

    ``score(u, i) = sum_j sim(i, j) * count(u, j)`` over the items ``u``
    consumed in the training log.
    """

    kind = "itemknn"
    defaults = {"k_neighbors": 100, "shrink": 0.0}

    def __init__(self, n_users, n_items, **hp):
        super().__init__(n_users, n_items, **hp)
        self.similarity = sparse.csr_matrix((n_items, n_items))
        self.history = sparse.csr_matrix((n_users, n_items))

    def fit(self, log, seed=0):
        self.seed = seed
        self.history = log.count_matrix()
        self.similarity = cosine_similarity(
            self.history, self.hyperparams["shrink"], int(self.hyperparams["k_neighbors"])
        )
        return self

    def score_matrix(self, users=None):
        hist = self.history if users is None else self.history[np.asarray(users)]
        return np.asarray((hist @ self.similarity.T).toarray())

    def _state(self):
        s, h = self.similarity, self.history
        return {
            "sim_data": s.data, "sim_indices": s.indices, "sim_indptr": s.indptr,
            "hist_data": h.data, "hist_indices": h.indices, "hist_indptr": h.indptr,
        }

    def _load_state(self, a):
        self.similarity = sparse.csr_matrix(
            (a["sim_data"], a["sim_indices"], a["sim_indptr"]), shape=(self.n_items, self.n_items)
        )
        self.history = sparse.csr_matrix(
            (a["hist_data"], a["hist_indices"], a["hist_indptr"]), shape=(self.n_users, self.n_items)
        )


class BprMf(ScoringModel):
    """Matrix factorisation trained with the BPR pairwise objective.

    Mini-batch SGD ascends ``ln sigmoid(x_ui - x_uj) - l2 * |params|^2 / 2``
    on triplets where ``(u, i)`` is a training event and ``j`` is drawn
    uniformly from the items ``u`` never consumed. One pass draws as many
    triplets as there are events.
    """

    kind = "bpr"
    nonnegative = False
    defaults = {
        "dim": 32,
        "learning_rate": 0.001,
        "l2": 1e-4,
        "epochs": 50,
        "init_std": 0.01,
        "batch_size": 256,
    }

    def __init__(self, n_users, n_items, **hp):
        super().__init__(n_users, n_items, **hp)
        d = int(self.hyperparams["dim"])
        self.user_factors = np.zeros((n_users, d))
        self.item_factors = np.zeros((n_items, d))

    def fit(self, log, seed=0):
        self.seed = seed
        hp = self.hyperparams
        rng = np.random.default_rng(seed)
        d = int(hp["dim"])
        P = rng.normal(0.0, hp["init_std"], (self.n_users, d))
        Q = rng.normal(0.0, hp["init_std"], (self.n_items, d))
        seen = consumed_keys(log)
        lr, l2, bs = hp["learning_rate"], hp["l2"], int(hp["batch_size"])
        n = len(log)
        for _ in range(int(hp["epochs"])):
            perm = rng.permutation(n)
            for lo in range(0, n, bs):
                sel = perm[lo:lo + bs]
                u, i = log.users[sel], log.items[sel]
                u, i, j = _draw_negatives(u, i, seen, self.n_items, rng)
                pu, qi, qj = P[u], Q[i], Q[j]
                g = expit(-np.einsum("bd,bd->b", pu, qi - qj))[:, None]
                np.add.at(P, u, lr * (g * (qi - qj) - l2 * pu))
                np.add.at(Q, i, lr * (g * pu - l2 * qi))
                np.add.at(Q, j, lr * (-g * pu - l2 * qj))
        self.user_factors, self.item_factors = P, Q
        return self

    def score_matrix(self, users=None):
        P = self.user_factors if users is None else self.user_factors[np.asarray(users)]
        return P @ self.item_factors.T

    def _state(self):
        return {"user_factors": self.user_factors, "item_factors": self.item_factors}

    def _load_state(self, a):
        self.user_factors = a["user_factors"]
        self.item_factors = a["item_factors"]


def consumed_keys(log: InteractionLog) -> np.ndarray:
    """Sorted unique ``user * n_items + item`` keys of a log."""
    return np.unique(log.users * log.n_items + log.items)


def _draw_negatives(u, i, seen, n_items, rng, max_rounds=100):
    j = rng.integers(0, n_items, size=len(u))
    for _ in range(max_rounds):
        bad = _isin_sorted(u * n_items + j, seen)
        if not bad.any():
            return u, i, j
        j[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    ok = ~_isin_sorted(u * n_items + j, seen)
    return u[ok], i[ok], j[ok]


def _isin_sorted(keys, sorted_keys):
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == keys


def sample_triplets(log: InteractionLog, n: int, seed: int = 0):
    """``n`` uniform (user, positive, negative) triplets from a log."""
    rng = np.random.default_rng(seed)
    sel = rng.integers(0, len(log), size=n)
    return _draw_negatives(log.users[sel], log.items[sel], consumed_keys(log), log.n_items, rng)


def pairwise_objective(model: ScoringModel, triplets) -> float:
    """Mean ``ln sigmoid(x_ui - x_uj)`` over triplets."""
    u, i, j = triplets
    s = model.score_matrix(np.unique(u))
    row = np.searchsorted(np.unique(u), u)
    return float(np.mean(log_expit(s[row, i] - s[row, j])))


class Popularity(ScoringModel):
    """Non-personalised: every user gets the item's training event count."""

    kind = "popularity"

    def __init__(self, n_users, n_items, **hp):
        super().__init__(n_users, n_items, **hp)
        self.strength = np.zeros(n_items)

    def fit(self, log, seed=0):
        self.seed = seed
        self.strength = np.bincount(log.items, minlength=self.n_items).astype(np.float64)
        return self

    def score_matrix(self, users=None):
        n = self.n_users if users is None else len(users)
        return np.broadcast_to(self.strength, (n, self.n_items)).copy()

    def _state(self):
        return {"strength": self.strength}

    def _load_state(self, a):
        self.strength = a["strength"]


_MIX = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _MIX
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


class RandomModel(ScoringModel):
    """Seeded hash of (seed, user, item) mapped to [0, 1)."""

    kind = "random"

    def fit(self, log, seed=0):
        self.seed = seed
        return self

    def score_matrix(self, users=None):
        users = np.arange(self.n_users) if users is None else np.asarray(users)
        with np.errstate(over="ignore"):
            h = _splitmix(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF) + np.zeros(1, dtype=np.uint64))
            h = _splitmix(h ^ users.astype(np.uint64)[:, None])
            h = _splitmix(h ^ np.arange(self.n_items, dtype=np.uint64)[None, :])
        return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def _state(self):
        return {}

    def _load_state(self, a):
        pass


MODELS: dict[str, type[ScoringModel]] = {
    cls.kind: cls for cls in (ItemKnn, BprMf, Popularity, RandomModel)
}


def make_model(kind: str, n_users: int, n_items: int, hyperparams: dict | None = None) -> ScoringModel:
    try:
        cls = MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODELS)}") from None
    return cls(n_users, n_items, **(hyperparams or {}))


def train(kind: str, log: InteractionLog, hyperparams: dict | None = None, seed: int = 0, trained_on=None) -> ScoringModel:
    if not len(log):
        raise ValueError("cannot train on an empty log")
    model = make_model(kind, log.n_users, log.n_items, hyperparams).fit(log, seed)
    model.trained_on = tuple(trained_on) if trained_on is not None else ((0, log.horizon + 1),)
    return model


def training_window(current_day: int, sim_start_day: int, sliding_window_days: int = 360):
    """Day ranges used when retraining at ``current_day``.

    Always the initialization prefix ``[0, sim_start_day)`` plus simulated
    days; once more than ``sliding_window_days`` have been simulated only the
    most recent ones are kept.
    """
    lo = sim_start_day
    if current_day - sim_start_day > sliding_window_days:
        lo = current_day - sliding_window_days
    return ((0, sim_start_day), (lo, current_day))


def retrain(
    kind: str,
    hyperparams: dict | None,
    log: InteractionLog,
    current_day: int,
    sim_start_day: int,
    seed: int = 0,
    sliding_window_days: int = 360,
) -> ScoringModel:
    """Train from scratch on the initialization prefix plus the recent window."""
    (a, b), (lo, hi) = ranges = training_window(current_day, sim_start_day, sliding_window_days)
    init, recent = log.window(a, b), log.window(lo, hi)
    data = init.append(recent.users, recent.items, recent.days)
    return train(kind, data, hyperparams, seed, trained_on=ranges)


# --------------------------------------------------------------------------
# sampling from recommendation lists

RECLIST_MODES = ("auto", "softmax", "proportional")


def reclist_probabilities(scores, mode: str = "softmax") -> np.ndarray:
    """Selection probabilities over a ranked list's scores.

    ``softmax`` uses temperature 1. ``proportional`` divides by the sum and
    falls back to uniform when every score is zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if mode == "softmax":
        return choice_distribution(scores, 1.0)
    if mode == "proportional":
        if scores.min() < 0:
            raise ValueError("proportional sampling needs non-negative scores")
        total = scores.sum()
        if total <= 0:
            return np.full(len(scores), 1.0 / len(scores))
        return scores / total
    raise ValueError(f"unknown sampling mode {mode!r}")


def sample_from_reclist(ranked: RankedList, rng: np.random.Generator, mode: str = "softmax", size: int | None = None):
    """Inverse-CDF draw(s) from a ranked list; one uniform per draw."""
    if not len(ranked):
        raise ValueError("empty recommendation list")
    n = 1 if size is None else size
    probs = reclist_probabilities(ranked.scores, mode)
    idx = inverse_cdf(probs, rng.random(n))
    picks = ranked.items[idx]
    return int(picks[0]) if size is None else picks


# --------------------------------------------------------------------------
# offline evaluation


def evaluate(model: ScoringModel, split, log: InteractionLog, k: int = 10) -> dict[str, float]:
    """NDCG/precision/recall@k against each user's test-range items.

    Relevance is binary; averages run over users with at least one test
    item. ``item_coverage`` is the share of the catalog in their top-k lists.
    """
    test = log.window(*split.test_days)
    if not len(test):
        raise ValueError("no test users")
    keys = np.unique(test.users * log.n_items + test.items)
    t_users, t_items = keys // log.n_items, keys % log.n_items
    users = np.unique(t_users)
    top, _ = model.top_k_all(k, users)
    relevant = np.zeros((len(users), log.n_items), dtype=bool)
    relevant[np.searchsorted(users, t_users), t_items] = True
    hits = np.take_along_axis(relevant, top, axis=1)
    n_rel = relevant.sum(axis=1)
    discount = 1.0 / np.log2(np.arange(2, top.shape[1] + 2))
    dcg = hits @ discount
    ideal = np.cumsum(discount)[np.minimum(n_rel, top.shape[1]) - 1]
    return {
        "ndcg": float(np.mean(dcg / ideal)),
        "precision": float(np.mean(hits.sum(axis=1) / k)),
        "recall": float(np.mean(hits.sum(axis=1) / n_rel)),
        "item_coverage": len(np.unique(top)) / log.n_items,
        "n_users": int(len(users)),
    }
