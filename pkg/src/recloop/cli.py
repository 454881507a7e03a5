"""Command-line front end.

Commands: ``ingest``, ``synth``, ``simulate``, ``sweep``, ``metrics`` and
``export``. Exit codes: 0 success, 1 validation error, 2 runtime failure,
3 partial sweep failure. Log lines go to stderr as JSON; results go to files
or stdout.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, metrics
from . import config as cfgmod
from .config import ConfigError
from .dataset import (
    PRESETS, DataError, Schema, build_activity_trace, filter_active_users,
    generate_synthetic, load_interactions, read_log, temporal_holdout, write_log,
)
from .engine import (
    REPORT_METRICS, CheckpointError, EpochReport, Simulation, aggregate, digest_log,
    run_batch,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
RESULTS_ENV = "RECLOOP_RESULTS"

EPOCHS_FILE = "epochs.csv"
LOG_FILE = "log.csv"
CELL_FILE = "cell.json"
CONFIG_FILE = "config.yaml"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_DIR = "checkpoint"

REPORT_FIELDS = ("epoch",) + REPORT_METRICS + ("events_this_epoch", "adoption_events")

# short names accepted in export series and metrics output
METRIC_NAMES = {
    "gini": "collective_gini",
    "collective-gini": "collective_gini",
    "individual-gini": "mean_individual_gini",
    "jaccard": "mean_jaccard",
    "coverage": "item_coverage",
    "events": "events_this_epoch",
    "adoption": "adoption_events",
}

log = logging.getLogger("recloop")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
            if not isinstance(payload, dict):
                payload = {"msg": payload}
        except ValueError:
            payload = {"msg": msg}
        out = {"level": record.levelname.lower(), "logger": record.name, **payload}
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out)


def _setup_logging(verbosity: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("recloop")
    root.handlers[:] = [handler]
    root.propagate = False
    root.setLevel(logging.WARNING if verbosity < 0 else logging.DEBUG if verbosity > 0 else logging.INFO)


def _fmt(x) -> str:
    """Exact text form of a number (floats round-trip)."""
    if isinstance(x, float) or isinstance(x, np.floating):
        return repr(float(x))
    return str(x)


def _write_csv(path, header, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)


def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _summary(data) -> dict:
    return {"users": data.n_users, "items": data.n_items, "events": len(data), "span_days": data.span}


def _eta_dir(eta: float) -> str:
    return f"{eta:g}"


def results_root(arg=None) -> Path:
    return Path(arg or os.environ.get(RESULTS_ENV) or "results")


# --------------------------------------------------------------------------
# data and cell plumbing


def load_data(tree: dict):
    d = tree["data"]
    if d["path"]:
        schema = d["schema"]
        if schema not in PRESETS:
            raise ConfigError(f"unknown schema preset {schema!r}")
        data = read_log(d["path"]) if schema == "canonical" else load_interactions(d["path"], schema)
    else:
        s = d["synthetic"]
        data = generate_synthetic(
            s["n_users"], s["n_items"], s["n_days"], s["popularity_exponent"],
            s["n_clusters"], s["events_per_user_day"], seed=s["seed"],
        )
    split = temporal_holdout(data, train_months=d["train_months"], valid_months=d["valid_months"],
                             test_months=d["test_months"])
    e = tree["engine"]
    end = split.sim_start_day + e["n_epochs"] * e["epoch_length_days"]
    if data.horizon < end - 1:
        raise DataError(
            f"data ends on day {data.horizon}; {e['n_epochs']} epochs need activity through day {end - 1}"
        )
    trace = build_activity_trace(data, (split.sim_start_day, end))
    return data, split, trace


def write_reports(path, reports) -> None:
    _write_csv(path, REPORT_FIELDS, ([getattr(r, f) for f in REPORT_FIELDS] for r in reports))


def read_reports(path) -> list[EpochReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append(EpochReport(**{
            k: (int(v) if k in ("epoch", "events_this_epoch", "adoption_events") else float(v))
            for k, v in row.items()
        }))
    return out


def write_cell(directory, config, run, result, sim_start) -> None:
    """Fixed-name outputs of one finished cell (no timings, so reruns match bitwise)."""
    os.makedirs(directory, exist_ok=True)
    write_reports(os.path.join(directory, EPOCHS_FILE), result.reports)
    write_log(result.log, os.path.join(directory, LOG_FILE))
    _write_json(os.path.join(directory, CELL_FILE), {
        "model": config.model_kind,
        "eta": config.eta,
        "run": run,
        "sim_start_day": sim_start,
        "n_epochs": config.n_epochs,
        "config_digest": config.digest(),
        "train_history": [[list(r) for r in t] for t in result.train_history],
    })


def _sweep_cell_fn(root, sim_start, config, run, result) -> None:
    write_cell(os.path.join(root, config.model_kind, _eta_dir(config.eta), str(run)),
               config, run, result, sim_start)


def _overrides(extra: list[str]) -> dict:
    """Parse ``--dotted.key value`` / ``--dotted.key=value`` pairs."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        key = cfgmod.ALIASES.get(key, key).replace("-", "_")
        if key not in cfgmod.LEAVES:
            raise UsageError(f"unknown option or config key {tok!r}")
        out[key] = value
    return out


def _load_config(args, extra) -> dict:
    return cfgmod.load(args.config, _overrides(extra))


def _manifest(tree, data, cells, wall_s) -> dict:
    return {
        "code_version": __version__,
        "config_digest": cfgmod.digest(tree),
        "data_digest": digest_log(data),
        "config": tree,
        "cells": cells,
        "wall_s": wall_s,
    }


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    if args.user_col is not None or args.item_col is not None or args.time_col is not None:
        if None in (args.user_col, args.item_col, args.time_col):
            raise UsageError("--user-col, --item-col and --time-col go together")

        def col(v):
            return int(v) if v.isdigit() else v

        schema = Schema(col(args.user_col), col(args.item_col), col(args.time_col),
                        delimiter=args.delimiter or ",", header=not args.no_header)
    else:
        schema = args.schema
    data = load_interactions(args.input, schema)
    if args.min_active_months > 0:
        data = filter_active_users(data, args.min_active_months)
    write_log(data, args.output)
    print(json.dumps({"output": str(args.output), **_summary(data)}))
    return EXIT_OK


def cmd_synth(args, extra) -> int:
    tree = _load_config(args, extra)
    s = tree["data"]["synthetic"]
    data = generate_synthetic(
        s["n_users"], s["n_items"], s["n_days"], s["popularity_exponent"],
        s["n_clusters"], s["events_per_user_day"], seed=s["seed"],
    )
    write_log(data, args.output)
    print(json.dumps({"output": str(args.output), **_summary(data)}))
    return EXIT_OK


def cmd_simulate(args, extra) -> int:
    tree = _load_config(args, extra)
    sim_cfg = cfgmod.simulation_config(tree)
    run = tree["engine"]["run"]
    if not 0 <= run < sim_cfg.n_runs:
        raise ConfigError(f"engine.run must be in [0, {sim_cfg.n_runs})")
    data, split, trace = load_data(tree)
    if args.out:
        out = Path(args.out)
    else:
        sweep_id = tree["sweep"]["sweep_id"] or f"single-{cfgmod.digest(tree)[:12]}"
        out = results_root(args.results_root) / sweep_id / sim_cfg.model_kind / _eta_dir(sim_cfg.eta) / str(run)
    ckpt = out / CHECKPOINT_DIR
    t0 = time.perf_counter()
    if args.resume and (ckpt / "meta.json").exists():
        sim = Simulation.from_checkpoint(ckpt, sim_cfg, data, split, trace, run)
        log.info(json.dumps({"event": "resume", "epoch": sim.epoch, "dir": str(out)}))
    else:
        sim = Simulation(sim_cfg, data, split, trace, run)
    os.makedirs(out, exist_ok=True)
    with open(out / CONFIG_FILE, "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dump(tree))
    result = sim.run_all(on_epoch=lambda s: s.save_checkpoint(ckpt))
    write_cell(out, sim_cfg, run, result, split.sim_start_day)
    wall = time.perf_counter() - t0
    _write_json(out / MANIFEST_FILE, _manifest(tree, data, [{
        "model": sim_cfg.model_kind, "eta": sim_cfg.eta, "run": run, "path": str(out),
        "wall_s": round(wall, 3), "error": None,
    }], round(wall, 3)))
    print(json.dumps({"output": str(out), "epochs": len(result.reports)}))
    return EXIT_OK


def cmd_sweep(args, extra) -> int:
    tree = _load_config(args, extra)
    base = cfgmod.simulation_config(tree)
    sw = tree["sweep"]
    for kind in sw["models"]:
        cfgmod.simulation_config(cfgmod.merge(tree, {"model.kind": kind}))
    for eta in sw["eta_grid"]:
        cfgmod.simulation_config(cfgmod.merge(tree, {"engine.eta": eta}))
    if sw["jobs"] < 1:
        raise ConfigError("sweep.jobs must be >= 1")
    data, split, trace = load_data(tree)
    sweep_id = sw["sweep_id"] or f"sweep-{cfgmod.digest(tree)[:12]}"
    root = results_root(args.results_root) / sweep_id
    os.makedirs(root, exist_ok=True)
    with open(root / CONFIG_FILE, "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dump(tree))
    t0 = time.perf_counter()
    cells = run_batch(
        base, data, split, trace, eta_grid=sw["eta_grid"], model_kinds=sw["models"],
        n_runs=base.n_runs, jobs=sw["jobs"],
        cell_fn=functools.partial(_sweep_cell_fn, str(root), split.sim_start_day),
    )
    wall = time.perf_counter() - t0
    per_run = [
        [c.model_kind, c.eta, c.run] + [getattr(r, f) for f in REPORT_FIELDS]
        for c in cells if c.ok for r in c.reports
    ]
    _write_csv(root / "runs.csv", ["model", "eta", "run"] + list(REPORT_FIELDS), per_run)
    rows = aggregate(cells)
    if rows:
        header = list(rows[0])
        _write_csv(root / "summary.csv", header, ([row[k] for k in header] for row in rows))
    manifest_cells = [{
        "model": c.model_kind, "eta": c.eta, "run": c.run,
        "path": str(root / c.model_kind / _eta_dir(c.eta) / str(c.run)),
        "wall_s": round(c.wall_s, 3), "error": c.error,
    } for c in cells]
    _write_json(root / MANIFEST_FILE, _manifest(tree, data, manifest_cells, round(wall, 3)))
    failed = [c for c in cells if not c.ok]
    print(json.dumps({"output": str(root), "cells": len(cells), "failed": len(failed),
                      "wall_s": round(wall, 3)}))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_metrics(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    data = read_log(args.log)
    start = 0 if args.start is None else args.start
    end = data.horizon + 1 if args.end is None else args.end
    if start < 0 or end <= start or end > data.horizon + 1:
        raise DataError(f"window [{start}, {end}) is outside the log's days [0, {data.horizon + 1})")
    part = data.window(start, end)
    if not len(part):
        raise DataError(f"no events in window [{start}, {end})")
    chosen = [m for m in ("individual_gini", "collective_gini", "jaccard", "coverage") if getattr(args, m)]
    chosen = chosen or ["individual_gini", "collective_gini", "jaccard", "coverage"]
    out = {"window": [start, end], "events": len(part)}
    for m in chosen:
        if m == "individual_gini":
            out["mean_individual_gini"] = metrics.mean_individual_gini(part)
        elif m == "collective_gini":
            out["collective_gini"] = metrics.collective_gini(part)
        elif m == "jaccard":
            out["mean_jaccard"] = metrics.mean_jaccard(part, sample_pairs=args.sample_pairs, seed=args.seed)
        else:
            out["item_coverage"] = metrics.item_coverage(part, data.n_items)
    print(json.dumps(out))
    return EXIT_OK


# export ---------------------------------------------------------------------


def discover_cells(root) -> list[dict]:
    """Finished cells under a results directory, sorted by (model, eta, run)."""
    cells = []
    for path in sorted(Path(root).rglob(CELL_FILE)):
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
        meta["dir"] = path.parent
        cells.append(meta)
    return sorted(cells, key=lambda c: (c["model"], c["eta"], c["run"]))


def _mean_std(vals):
    vals = [float(v) for v in vals]
    mean = math.fsum(vals) / len(vals)
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
    return mean, std


def _series_metric(name: str) -> str:
    key = METRIC_NAMES.get(name, name.replace("-", "_"))
    if key not in REPORT_FIELDS[1:]:
        raise UsageError(f"unknown metric {name!r}")
    return key


def _filter(cells, args):
    out = [
        c for c in cells
        if (args.model is None or c["model"] == args.model)
        and (args.eta is None or c["eta"] == args.eta)
        and (args.run is None or c["run"] == args.run)
    ]
    if not out:
        raise DataError("no finished cells match the selection")
    return out


def export_rows(root, series: str, args) -> tuple[list[str], list[list]]:
    cells = _filter(discover_cells(root), args)
    tidy = ["x", "y", "group", "y_std", "n_runs"]
    if series.endswith("-vs-eta") or series.endswith("-vs-epoch"):
        by_eta = series.endswith("-vs-eta")
        metric = _series_metric(series.rsplit("-vs-", 1)[0])
        groups: dict[tuple, list[float]] = {}
        for c in cells:
            reports = read_reports(c["dir"] / EPOCHS_FILE)
            if by_eta:
                groups.setdefault((c["model"], c["eta"]), []).append(getattr(reports[-1], metric))
            else:
                for r in reports:
                    groups.setdefault((c["model"], c["eta"], r.epoch), []).append(getattr(r, metric))
        rows = []
        for key in sorted(groups):
            mean, std = _mean_std(groups[key])
            if by_eta:
                rows.append([key[1], mean, key[0], std, len(groups[key])])
            else:
                rows.append([key[2], mean, f"{key[0]}/eta={key[1]:g}", std, len(groups[key])])
        return tidy, rows
    if series in ("item-rank-frequency", "user-rank-frequency"):
        fn = metrics.item_strength if series.startswith("item") else metrics.item_user_popularity
        groups = {}
        for c in cells:
            data = read_log(c["dir"] / LOG_FILE)
            start = c["sim_start_day"]
            if ("training", "") not in groups and c is cells[0]:
                groups[("training", "")] = [np.sort(fn(data, (0, start)))[::-1]]
            groups.setdefault((c["model"], f"{c['eta']:g}"), []).append(np.sort(fn(data, (start, None)))[::-1])
        rows = []
        for (model, eta), vecs in groups.items():
            mat = np.vstack(vecs).astype(np.float64)
            label = model if not eta else f"{model}/eta={eta}"
            for rank in range(mat.shape[1]):
                mean, std = _mean_std(mat[:, rank])
                rows.append([rank + 1, mean, label, std, len(vecs)])
        return tidy, rows
    if series == "edges":
        if len(cells) != 1:
            raise UsageError("edges needs exactly one cell; select it with --model, --eta and --run")
        c = cells[0]
        data = read_log(c["dir"] / LOG_FILE)
        edges = metrics.coconsumption_edges(data, (c["sim_start_day"], None))
        if args.max_edges is not None:
            edges = edges[: args.max_edges]
        return ["item_a", "item_b", "weight"], [[data.item_ids[a], data.item_ids[b], w] for a, b, w in edges]
    raise UsageError(
        f"unknown series {series!r}; use <metric>-vs-eta, <metric>-vs-epoch, "
        "item-rank-frequency, user-rank-frequency or edges"
    )


def cmd_export(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    if not Path(args.results).is_dir():
        raise DataError(f"{args.results} is not a results directory")
    header, rows = export_rows(args.results, args.series, args)
    if args.output:
        _write_csv(args.output, header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="recloop", description="Recommender feedback-loop simulator.")
    p.add_argument("--version", action="version", version=f"recloop {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    keys = "configuration keys (override any with --<key> VALUE):\n" + cfgmod.describe()
    aliases = "aliases: " + ", ".join(f"--{a} = --{k}" for a, k in cfgmod.ALIASES.items())
    epilog = f"{keys}\n\n{aliases}"
    fmt = argparse.RawDescriptionHelpFormatter

    s = sub.add_parser("ingest", help="convert raw interactions into a canonical log")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--schema", default="canonical", choices=sorted(PRESETS))
    s.add_argument("--user-col")
    s.add_argument("--item-col")
    s.add_argument("--time-col")
    s.add_argument("--delimiter")
    s.add_argument("--no-header", action="store_true")
    s.add_argument("--min-active-months", type=int, default=3,
                   help="keep users active in at least this many months of every year (0 disables)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate a synthetic canonical log",
                       epilog=epilog, formatter_class=fmt)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("simulate", help="run one (eta, model, run) cell",
                       epilog=epilog, formatter_class=fmt)
    s.add_argument("--config")
    s.add_argument("--out", help="output directory (default: results tree)")
    s.add_argument("--results-root", help=f"results root (default ${RESULTS_ENV} or ./results)")
    s.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="run the eta x model x run grid",
                       epilog=epilog, formatter_class=fmt)
    s.add_argument("--config")
    s.add_argument("--results-root", help=f"results root (default ${RESULTS_ENV} or ./results)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("metrics", help="recompute metrics over a saved log window")
    s.add_argument("log")
    s.add_argument("--start", type=int)
    s.add_argument("--end", type=int)
    s.add_argument("--individual-gini", action="store_true")
    s.add_argument("--collective-gini", action="store_true")
    s.add_argument("--jaccard", action="store_true")
    s.add_argument("--coverage", action="store_true")
    s.add_argument("--sample-pairs", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("export", help="write plot-ready tables from a results directory")
    s.add_argument("results")
    s.add_argument("--series", required=True,
                   help="<metric>-vs-eta, <metric>-vs-epoch, item-rank-frequency, "
                        "user-rank-frequency or edges; metrics: " + ", ".join(METRIC_NAMES))
    s.add_argument("--model")
    s.add_argument("--eta", type=float)
    s.add_argument("--run", type=int)
    s.add_argument("--max-edges", type=int)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _setup_logging(-1 if args.quiet else args.verbose)
    try:
        return args.func(args, extra)
    except (ConfigError, DataError, CheckpointError) as exc:
        log.error(json.dumps({"error": type(exc).__name__, "detail": str(exc)}))
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.error(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
