"""Run configuration: one YAML (or JSON) document with a section per module.

Every leaf key can be overridden from the command line by its dotted name,
e.g. ``--engine.eta 0.5``. Unknown keys are errors, and values are coerced
to the type of their default.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml

from .choice import TAU_DEFAULT, TAU_MAX, TAU_MIN
from .engine import DEFAULT_ETA_GRID, SimulationConfig
from .recommenders import MODELS


class ConfigError(ValueError):
    pass


# (default, help) per leaf key; a default of None means "string or null"
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "path": (None, "canonical log file (user,item,day); empty means synthetic data"),
        "schema": ("canonical", "schema preset of the input file"),
        "synthetic.n_users": (500, "synthetic users"),
        "synthetic.n_items": (2000, "synthetic catalog size"),
        "synthetic.n_days": (900, "synthetic days"),
        "synthetic.popularity_exponent": (1.0, "power-law exponent of item weights"),
        "synthetic.n_clusters": (5, "planted user/item clusters"),
        "synthetic.events_per_user_day": (2.0, "Poisson mean of daily events per user"),
        "synthetic.seed": (0, "generator seed"),
        "train_months": (4, "holdout training months"),
        "valid_months": (1, "holdout validation months"),
        "test_months": (1, "holdout test months"),
    },
    "choice": {
        "lam": (1.0, "novelty weight of the utility"),
        "candidate_set_size": (50, "candidate set size"),
        "tau_min": (TAU_MIN, "lower clamp of the temperature"),
        "tau_max": (TAU_MAX, "upper clamp of the temperature"),
        "tau_default": (TAU_DEFAULT, "temperature of users with < 2 active days"),
    },
    "model": {
        "kind": ("itemknn", f"recommender: {', '.join(sorted(MODELS))}"),
        **{
            f"{kind}.{name}": (value, f"{kind} hyperparameter")
            for kind, cls in sorted(MODELS.items())
            for name, value in cls.defaults.items()
        },
    },
    "engine": {
        "eta": (0.0, "adoption rate"),
        "k_reclist": (20, "recommendation list length"),
        "n_epochs": (24, "simulated epochs"),
        "epoch_length_days": (30, "days per epoch"),
        "retrain_interval": (1, "epochs between retrains"),
        "sliding_window_days": (360, "retraining window after the first year"),
        "n_runs": (5, "independent runs per cell"),
        "master_seed": (0, "seed from which all streams derive"),
        "run": (0, "run index of a single simulation"),
        "distinct_basket": (False, "avoid repeated items within a basket"),
        "reclist_sampling": ("auto", "softmax, proportional, or auto"),
        "exclude_consumed": (False, "drop items the user already consumed from recommendation lists"),
    },
    "metrics": {
        "include_prefix": (False, "include the initialization prefix in epoch metrics"),
    },
    "sweep": {
        "eta_grid": (list(DEFAULT_ETA_GRID), "adoption rates of the grid"),
        "models": (["itemknn"], "model kinds of the grid"),
        "jobs": (1, "concurrent cells"),
        "sweep_id": (None, "results sub-directory; derived from the config digest if empty"),
    },
}

ALIASES = {
    "eta": "engine.eta",
    "model": "model.kind",
    "epochs": "engine.n_epochs",
    "seed": "engine.master_seed",
    "runs": "engine.n_runs",
    "jobs": "sweep.jobs",
    "data": "data.path",
}


def _leaves():
    for section, keys in SCHEMA.items():
        for key, (default, help_) in keys.items():
            yield f"{section}.{key}", default, help_


LEAVES = {name: (default, help_) for name, default, help_ in _leaves()}


def _set(tree: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for part in head:
        tree = tree.setdefault(part, {})
    tree[last] = value


def defaults() -> dict:
    tree: dict = {}
    for name, (default, _) in LEAVES.items():
        _set(tree, name, copy.deepcopy(default))
    return tree


def _flatten(tree, prefix=""):
    if isinstance(tree, dict) and f"{prefix[:-1]}" not in LEAVES:
        for key, value in tree.items():
            yield from _flatten(value, f"{prefix}{key}.")
    else:
        yield prefix[:-1], tree


def coerce(name: str, value):
    """Convert ``value`` to the type of the default of ``name``."""
    if name not in LEAVES:
        raise ConfigError(f"unknown config key {name!r}")
    default = LEAVES[name][0]
    if isinstance(value, str) and not isinstance(default, str) and default is not None:
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    if default is None:
        return None if value in (None, "") else str(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        elif not isinstance(value, list):
            value = [value]
        kind = type(default[0]) if default else str
        try:
            return [float(v) if kind is float else str(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: bad list {value!r}") from exc
    return str(value)


def merge(tree: dict, updates: dict) -> dict:
    """Copy of ``tree`` with flat or nested ``updates`` applied and validated."""
    out = copy.deepcopy(tree)
    for name, value in _flatten(updates):
        _set(out, name, coerce(name, value))
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then dotted ``overrides``."""
    tree = defaults()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if doc is not None:
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            tree = merge(tree, doc)
    if overrides:
        flat = {}
        for name, value in overrides.items():
            flat[ALIASES.get(name, name)] = value
        tree = merge(tree, flat)
    simulation_config(tree)
    return tree


def simulation_config(tree: dict) -> SimulationConfig:
    """The engine configuration described by a validated tree."""
    c, e, m = tree["choice"], tree["engine"], tree["model"]
    params = {kind: dict(m.get(kind, {})) for kind in MODELS}
    try:
        return SimulationConfig(
            eta=e["eta"], k_reclist=e["k_reclist"], n_epochs=e["n_epochs"],
            epoch_length_days=e["epoch_length_days"], retrain_interval=e["retrain_interval"],
            sliding_window_days=e["sliding_window_days"], lam=c["lam"],
            candidate_set_size=c["candidate_set_size"], tau_min=c["tau_min"],
            tau_max=c["tau_max"], tau_default=c["tau_default"], model_kind=m["kind"],
            model_params=params, n_runs=e["n_runs"], master_seed=e["master_seed"],
            distinct_basket=e["distinct_basket"], reclist_sampling=e["reclist_sampling"],
            exclude_consumed=e["exclude_consumed"],
            include_prefix=tree["metrics"]["include_prefix"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump(tree: dict) -> str:
    return yaml.safe_dump(tree, sort_keys=True)


def digest(tree: dict) -> str:
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()


def describe() -> str:
    """One line per key for ``--help``."""
    lines = []
    for name, (default, help_) in LEAVES.items():
        lines.append(f"  --{name} (default {json.dumps(default)}): {help_}")
    return "\n".join(lines)
