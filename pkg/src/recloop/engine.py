"""Feedback-loop simulation.

The loop runs over epochs of simulated days. On each day the users that
were active in the real trace produce as many events as they did in
reality; every event is either drawn from the recommender's top-k list
(probability ``eta``) or chosen autonomously. Population statistics are
frozen within a day, candidate sets within an epoch, and the recommender is
retrained every ``retrain_interval`` epochs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .choice import (
    TAU_DEFAULT, TAU_MAX, TAU_MIN, CandidateSet, PopulationStats,
    build_candidate_set, estimate_taus, popularity_order, sample_autonomous,
)
from .dataset import ActivityTrace, DataError, InteractionLog, TemporalSplit
from .recommenders import (
    MODELS, RECLIST_MODES, RankedList, ScoringModel, load_model, retrain,
    sample_from_reclist, train,
)

log = logging.getLogger(__name__)

DEFAULT_ETA_GRID = (0.0, 0.2, 0.5, 0.8, 1.0)

# stream tags for derived seeds
_USER_DAY, _CANDIDATES, _MODEL, _METRICS = 1, 2, 3, 4


class SimulationError(RuntimeError):
    pass


class CheckpointError(SimulationError):
    """A checkpoint that does not belong to the current config, data or run."""


@dataclass
class SimulationConfig:
    eta: float = 0.0
    k_reclist: int = 20
    n_epochs: int = 24
    epoch_length_days: int = 30
    retrain_interval: int = 1
    sliding_window_days: int = 360
    lam: float = 1.0
    candidate_set_size: int = 50
    tau_min: float = TAU_MIN
    tau_max: float = TAU_MAX
    tau_default: float = TAU_DEFAULT
    model_kind: str = "itemknn"
    model_params: dict = field(default_factory=dict)
    n_runs: int = 5
    master_seed: int = 0
    distinct_basket: bool = False
    reclist_sampling: str = "auto"
    exclude_consumed: bool = False
    include_prefix: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        for name in ("k_reclist", "n_epochs", "epoch_length_days", "retrain_interval",
                     "sliding_window_days", "n_runs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.candidate_set_size < 5:
            raise ValueError("candidate_set_size must be >= 5")
        if not 0 < self.tau_min <= self.tau_default <= self.tau_max:
            raise ValueError("need 0 < tau_min <= tau_default <= tau_max")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.model_kind not in MODELS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.reclist_sampling not in RECLIST_MODES:
            raise ValueError(f"reclist_sampling must be one of {RECLIST_MODES}")

    @property
    def hyperparams(self) -> dict:
        """Hyperparameters of the active model kind."""
        return dict(self.model_params.get(self.model_kind, {}))

    def replace(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class EpochReport:
    epoch: int
    mean_individual_gini: float
    collective_gini: float
    mean_jaccard: float
    item_coverage: float
    events_this_epoch: int
    adoption_events: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


REPORT_METRICS = ("mean_individual_gini", "collective_gini", "mean_jaccard", "item_coverage")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def _rng(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(p) for p in parts])))


def resolve_sampling(mode: str, model: ScoringModel) -> str:
    if mode != "auto":
        return mode
    return "proportional" if model.nonnegative else "softmax"


def item_selection(
    u: int,
    basket: int,
    reclist: RankedList | None,
    candidates: CandidateSet,
    stats: PopulationStats,
    config: SimulationConfig,
    rng: np.random.Generator,
    sampling: str = "softmax",
) -> tuple[np.ndarray, int]:
    """Fill a basket of ``basket`` items; returns (items, algorithmic count).

    Each slot follows the recommendation list with probability ``eta``.
    Items may repeat within a basket unless ``config.distinct_basket`` is
    set, in which case a slot is redrawn up to 10 times before a duplicate
    is accepted.
    """
    tau = stats.tau[u]
    follow = rng.random(basket) < config.eta
    n_alg = int(follow.sum())
    if n_alg and reclist is None:
        raise SimulationError("algorithmic choice without a recommendation list")

    def draw(alg: bool, n: int):
        if alg:
            return sample_from_reclist(reclist, rng, sampling, size=n)
        return sample_autonomous(u, candidates, stats, config.lam, tau, rng, size=n)

    if not config.distinct_basket:
        out = np.empty(basket, dtype=np.int64)
        if n_alg:
            out[follow] = draw(True, n_alg)
        if basket - n_alg:
            out[~follow] = draw(False, basket - n_alg)
        return out, n_alg

    chosen: list[int] = []
    for alg in follow:
        for _ in range(10):
            item = int(draw(bool(alg), 1)[0])
            if item not in chosen:
                break
        chosen.append(item)
    return np.asarray(chosen, dtype=np.int64), n_alg


def digest_log(data: InteractionLog) -> str:
    h = hashlib.sha256()
    for arr in (data.users, data.items, data.days):
        h.update(arr.tobytes())
    h.update("\x00".join(data.user_ids).encode())
    h.update("\x01".join(data.item_ids).encode())
    return h.hexdigest()


class Simulation:
    """State of one (config, run) simulation, advanced an epoch at a time."""

    def __init__(
        self,
        config: SimulationConfig,
        data: InteractionLog,
        split: TemporalSplit,
        trace: ActivityTrace,
        run: int = 0,
        _model: ScoringModel | None = None,
    ):
        self.config = config
        self.data = data
        self.split = split
        self.trace = trace
        self.run = run
        self.sim_start = split.sim_start_day
        self.sim_end = self.sim_start + config.n_epochs * config.epoch_length_days
        if not trace.covers(self.sim_start, self.sim_end):
            raise DataError(
                f"activity trace {trace.window} does not cover the simulation days "
                f"[{self.sim_start}, {self.sim_end})"
            )
        self.d_post = data.window(None, self.sim_start)
        if not len(self.d_post):
            raise DataError("no initialization data before the simulation start")
        self.stats = PopulationStats.from_log(self.d_post)
        self.stats.tau = estimate_taus(
            data, split.train_days,
            tau_min=config.tau_min, tau_max=config.tau_max, tau_default=config.tau_default,
        )
        self.epoch = 0
        self.last_train_epoch = 0
        self.reports: list[EpochReport] = []
        self.user_order_seed: int | None = None
        if _model is None:
            _model = train(
                config.model_kind, self.d_post, config.hyperparams,
                seed=derive_seed(config.master_seed, run, _MODEL, 0),
                trained_on=((0, self.sim_start),),
            )
        self.model = _model
        self.train_history = [self.model.trained_on]

    @property
    def done(self) -> bool:
        return self.epoch >= self.config.n_epochs

    @property
    def current_day(self) -> int:
        return self.sim_start + self.epoch * self.config.epoch_length_days

    def _candidate_sets(self, users, start: int) -> dict[int, CandidateSet]:
        L = self.config.epoch_length_days
        prev = self.d_post.window(start - L, start)
        gpop = np.bincount(prev.items, minlength=self.data.n_items)
        order = popularity_order(gpop)
        seed, run = self.config.master_seed, self.run
        return {
            int(u): build_candidate_set(
                int(u), self.stats, self.config.candidate_set_size, gpop,
                _rng(seed, run, _CANDIDATES, u, self.epoch), gpop_order=order,
            )
            for u in users
        }

    def _reclists(self, users) -> dict[int, RankedList]:
        """Top-k lists for the epoch; optionally without already-consumed items.

        A user who has consumed every item keeps the unfiltered list.
        """
        k = self.config.k_reclist
        top, scores = self.model.top_k_all(k, users)
        out = {int(u): RankedList(top[r], scores[r]) for r, u in enumerate(users)}
        if self.config.exclude_consumed:
            ftop, fscores = self.model.top_k_all(k, users, exclude=self.stats.counts[users] > 0)
            for r, u in enumerate(users):
                keep = np.isfinite(fscores[r])
                if keep.any():
                    out[int(u)] = RankedList(ftop[r][keep], fscores[r][keep])
        return out

    def step_epoch(self) -> EpochReport:
        if self.done:
            raise SimulationError("simulation already finished")
        cfg = self.config
        t0 = time.perf_counter()
        start = self.current_day
        end = start + cfg.epoch_length_days
        in_epoch = (self.trace.days >= start) & (self.trace.days < end)
        active = np.unique(self.trace.users[in_epoch])
        candidates = self._candidate_sets(active, start)
        reclists: dict[int, RankedList] = {}
        if cfg.eta > 0 and len(active):
            reclists = self._reclists(active)
        sampling = resolve_sampling(cfg.reclist_sampling, self.model)

        n_events = n_alg = 0
        for day, users, sizes in self.trace.by_day():
            if day < start or day >= end:
                continue
            order = np.arange(len(users))
            if self.user_order_seed is not None:
                order = np.random.default_rng([self.user_order_seed, day]).permutation(order)
            picked_users, picked_items = [], []
            for k in order:
                u, b = int(users[k]), int(sizes[k])
                items, alg = item_selection(
                    u, b, reclists.get(u), candidates[u], self.stats, cfg,
                    _rng(cfg.master_seed, self.run, _USER_DAY, u, day), sampling,
                )
                picked_users.append(np.full(b, u, dtype=np.int64))
                picked_items.append(items)
                n_alg += alg
            if not picked_users:
                continue
            du = np.concatenate(picked_users)
            di = np.concatenate(picked_items)
            # canonical within-day order: by user, slot order kept
            srt = np.argsort(du, kind="stable")
            du, di = du[srt], di[srt]
            self.d_post = self.d_post.append(du, di, np.full(len(du), day, dtype=np.int64))
            self.stats.update(day, du, di)
            n_events += len(du)

        self.epoch += 1
        report = self._report(end, n_events, n_alg)
        self.reports.append(report)
        if not self.done and self.epoch - self.last_train_epoch >= cfg.retrain_interval:
            self.model = retrain(
                cfg.model_kind, cfg.hyperparams, self.d_post, end, self.sim_start,
                seed=derive_seed(cfg.master_seed, self.run, _MODEL, self.epoch),
                sliding_window_days=cfg.sliding_window_days,
            )
            self.last_train_epoch = self.epoch
            self.train_history.append(self.model.trained_on)
        log.info(json.dumps({
            "epoch": report.epoch, "events": n_events, "adoption_events": n_alg,
            "d_post": len(self.d_post), "wall_s": round(time.perf_counter() - t0, 3),
        }))
        return report

    def _report(self, end: int, n_events: int, n_alg: int) -> EpochReport:
        lo = 0 if self.config.include_prefix else self.sim_start
        part = self.d_post.window(lo, end)
        return EpochReport(
            epoch=self.epoch,
            mean_individual_gini=metrics.mean_individual_gini(part),
            collective_gini=metrics.collective_gini(part),
            mean_jaccard=metrics.auto_mean_jaccard(
                part, seed=derive_seed(self.config.master_seed, self.run, _METRICS, self.epoch)
            ),
            item_coverage=metrics.item_coverage(part, self.data.n_items),
            events_this_epoch=n_events,
            adoption_events=n_alg,
        )

    def run_all(self, on_epoch=None) -> "SimulationResult":
        while not self.done:
            self.step_epoch()
            if on_epoch is not None:
                on_epoch(self)
        return SimulationResult(self.d_post, list(self.reports), list(self.train_history))

    # checkpointing ---------------------------------------------------------

    def save_checkpoint(self, directory) -> None:
        """Write the epoch-boundary state to ``directory`` (overwrites)."""
        os.makedirs(directory, exist_ok=True)
        meta = {
            "config_digest": self.config.digest(),
            "data_digest": digest_log(self.data),
            "run": self.run,
            "epoch": self.epoch,
            "last_train_epoch": self.last_train_epoch,
            "reports": [r.to_dict() for r in self.reports],
            "train_history": [[list(r) for r in t] for t in self.train_history],
        }
        tmp = os.path.join(directory, "state.tmp.npz")
        np.savez(tmp, users=self.d_post.users, items=self.d_post.items, days=self.d_post.days)
        os.replace(tmp, os.path.join(directory, "state.npz"))
        self.model.save(os.path.join(directory, "model.tmp.npz"))
        os.replace(os.path.join(directory, "model.tmp.npz"), os.path.join(directory, "model.npz"))
        with open(os.path.join(directory, "meta.json"), "w") as fh:
            json.dump(meta, fh, sort_keys=True)

    @classmethod
    def from_checkpoint(cls, directory, config, data, split, trace, run: int = 0) -> "Simulation":
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
        if meta["config_digest"] != config.digest() or meta["data_digest"] != digest_log(data):
            raise CheckpointError("checkpoint does not match the config or input data (digest mismatch)")
        if meta["run"] != run:
            raise CheckpointError(f"checkpoint is for run {meta['run']}, not {run}")
        model = load_model(os.path.join(directory, "model.npz"))
        sim = cls(config, data, split, trace, run, _model=model)
        with np.load(os.path.join(directory, "state.npz")) as st:
            sim.d_post = data.replace_events(st["users"], st["items"], st["days"])
        sim.stats = PopulationStats.from_log(sim.d_post)
        sim.stats.tau = estimate_taus(
            data, split.train_days,
            tau_min=config.tau_min, tau_max=config.tau_max, tau_default=config.tau_default,
        )
        sim.epoch = meta["epoch"]
        sim.last_train_epoch = meta["last_train_epoch"]
        sim.reports = [EpochReport(**r) for r in meta["reports"]]
        sim.train_history = [tuple(tuple(r) for r in t) for t in meta["train_history"]]
        return sim


@dataclass
class SimulationResult:
    log: InteractionLog
    reports: list[EpochReport]
    train_history: list


def run_simulation(config, data, split, trace, run: int = 0, on_epoch=None) -> SimulationResult:
    return Simulation(config, data, split, trace, run).run_all(on_epoch)


# --------------------------------------------------------------------------
# batches


@dataclass
class CellResult:
    eta: float
    model_kind: str
    run: int
    reports: list[EpochReport] | None = None
    error: str | None = None
    wall_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_cell(args) -> CellResult:
    config, data, split, trace, run, cell_fn = args
    t0 = time.perf_counter()
    try:
        result = run_simulation(config, data, split, trace, run)
        if cell_fn is not None:
            cell_fn(config, run, result)
        return CellResult(config.eta, config.model_kind, run, result.reports, wall_s=time.perf_counter() - t0)
    except Exception as exc:  # a failing cell must not abort the batch
        log.exception("cell eta=%s model=%s run=%s failed", config.eta, config.model_kind, run)
        return CellResult(config.eta, config.model_kind, run, error=f"{type(exc).__name__}: {exc}",
                          wall_s=time.perf_counter() - t0)


def batch_cells(base: SimulationConfig, eta_grid, model_kinds, n_runs):
    if not eta_grid or not model_kinds or n_runs < 1:
        raise ValueError("eta grid, model list and run count must be non-empty")
    return [
        (base.replace(eta=float(eta), model_kind=kind), run)
        for kind in model_kinds for eta in eta_grid for run in range(n_runs)
    ]


def run_batch(
    base: SimulationConfig,
    data: InteractionLog,
    split: TemporalSplit,
    trace: ActivityTrace,
    eta_grid=DEFAULT_ETA_GRID,
    model_kinds=None,
    n_runs: int | None = None,
    jobs: int = 1,
    cell_fn=None,
) -> list[CellResult]:
    """Run every (eta, model, run) cell; cells share no mutable state.

    ``cell_fn(config, run, result)`` is called inside the worker after a
    cell finishes (e.g. to write its outputs); it must be picklable when
    ``jobs > 1``.
    """
    model_kinds = model_kinds or [base.model_kind]
    n_runs = base.n_runs if n_runs is None else n_runs
    cells = batch_cells(base, eta_grid, model_kinds, n_runs)
    args = [(cfg, data, split, trace, run, cell_fn) for cfg, run in cells]
    if jobs <= 1:
        return [_run_cell(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, args))


def aggregate(cells: list[CellResult]) -> list[dict]:
    """Mean and sample standard deviation across runs per (model, eta, epoch)."""
    groups: dict[tuple, list[EpochReport]] = {}
    for cell in cells:
        if not cell.ok:
            continue
        for rep in cell.reports:
            groups.setdefault((cell.model_kind, cell.eta, rep.epoch), []).append(rep)
    rows = []
    for (kind, eta, epoch), reps in sorted(groups.items()):
        row = {"model": kind, "eta": eta, "epoch": epoch, "n_runs": len(reps)}
        for name in REPORT_METRICS + ("events_this_epoch", "adoption_events"):
            vals = [float(getattr(r, name)) for r in reps]
            row[f"{name}_mean"] = math.fsum(vals) / len(vals)
            row[f"{name}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
        rows.append(row)
    return rows
