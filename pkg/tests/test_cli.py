import csv
import json
import math

import pytest

from recloop import cli
from recloop import config as cfgmod
from recloop.dataset import read_log

SMALL = [
    "--data.synthetic.n_users", "20", "--data.synthetic.n_items", "60",
    "--data.synthetic.n_days", "240", "--data.synthetic.events_per_user_day", "0.5",
    "--choice.candidate_set_size", "20", "--engine.k_reclist", "10",
]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_json(capsys, argv):
    code = cli.main(argv)
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out and out[-1].startswith("{") else out)


@pytest.fixture
def sweep_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("results")
    code = cli.main(["-q", "sweep", "--results-root", str(root), "--sweep.models", "popularity,random",
                     "--sweep.eta_grid", "0,1", "--runs", "2", "--epochs", "2",
                     "--sweep.sweep_id", "s", *SMALL])
    assert code == 0
    return root / "s"


class TestIngest:
    def test_lastfm(self, tmp_path, capsys):
        raw = tmp_path / "lastfm.tsv"
        lines = []
        for user, months in (("user_1", range(1, 5)), ("user_2", range(1, 5)), ("casual", (1, 2))):
            for month in months:
                lines.append(f"{user}\t2009-0{month}-03T10:00:00Z\tmbid\tArtist {month}\ttmbid\tTrack")
            lines.append(f"{user}\t2010-01-20T10:00:00Z\tmbid\tArtist 1\ttmbid\tTrack")
        raw.write_text("\n".join(lines) + "\n")
        out = tmp_path / "log.csv"
        code, summary = run_json(capsys, ["-q", "ingest", str(raw), "-o", str(out), "--schema", "lastfm"])
        assert code == 0
        assert (summary["users"], summary["events"]) == (2, 10)
        log = read_log(out)
        assert len(log) == 10 and set(log.user_ids) == {"user_1", "user_2"}
        assert set(log.item_ids) == {f"Artist {m}" for m in range(1, 5)}

    def test_filter_disabled(self, tmp_path, capsys):
        raw = tmp_path / "c.csv"
        raw.write_text("u;i;t\na;x;2020-01-01\nb;y;2020-01-02\n")
        out = tmp_path / "o.csv"
        code, summary = run_json(capsys, ["-q", "ingest", str(raw), "-o", str(out), "--user-col", "u",
                                          "--item-col", "i", "--time-col", "t", "--delimiter", ";",
                                          "--min-active-months", "0"])
        assert code == 0 and summary["events"] == 2 and summary["span_days"] == 2
        # one day of data cannot be filtered by yearly activity
        assert cli.main(["-q", "ingest", str(raw), "-o", str(out), "--user-col", "u", "--item-col", "i",
                         "--time-col", "t", "--delimiter", ";"]) == 1

    def test_malformed_row(self, tmp_path):
        raw = tmp_path / "bad.csv"
        raw.write_text("user,item,day\na,x,0\nb,y\n")
        assert cli.main(["-q", "ingest", str(raw), "-o", str(tmp_path / "o.csv")]) == 1

    def test_missing_file(self, tmp_path):
        assert cli.main(["-q", "ingest", str(tmp_path / "nope.csv"), "-o", str(tmp_path / "o.csv")]) == 1

    def test_partial_columns(self, tmp_path):
        raw = tmp_path / "x.csv"
        raw.write_text("u,i,t\n")
        assert cli.main(["-q", "ingest", str(raw), "-o", str(tmp_path / "o.csv"), "--user-col", "u"]) == 1


class TestSimulate:
    def test_smoke(self, tmp_path, capsys):
        out = tmp_path / "cell"
        code, res = run_json(capsys, ["-q", "simulate", "--eta", "1", "--model", "popularity",
                                      "--epochs", "2", "--out", str(out), *SMALL])
        assert code == 0 and res["epochs"] == 2
        rows = read_csv(out / "epochs.csv")
        assert [int(r["epoch"]) for r in rows] == [1, 2]
        assert all(int(r["adoption_events"]) == int(r["events_this_epoch"]) for r in rows)
        for name in ("log.csv", "cell.json", "config.yaml", "manifest.json", "checkpoint/meta.json"):
            assert (out / name).exists()

    def test_seeded_reruns_identical(self, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert cli.main(["-q", "simulate", "--seed", "7", "--eta", "0.5", "--model", "popularity",
                             "--epochs", "2", "--out", str(out), *SMALL]) == 0
        for name in ("epochs.csv", "log.csv", "cell.json", "config.yaml"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        manifests = [json.loads((o / "manifest.json").read_text()) for o in outs]
        for m in manifests:
            m.pop("wall_s")
            for c in m["cells"]:
                c.pop("wall_s")
                c.pop("path")
        assert manifests[0] == manifests[1]

    def test_defaults_recorded(self, tmp_path):
        out = tmp_path / "c"
        assert cli.main(["-q", "simulate", "--model", "popularity", "--out", str(out), *SMALL,
                         "--data.synthetic.n_days", "900"]) == 0
        tree = cfgmod.load(out / "config.yaml")
        e = tree["engine"]
        assert (e["k_reclist"], e["n_epochs"], e["retrain_interval"], e["sliding_window_days"]) == (10, 24, 1, 360)
        assert cfgmod.defaults()["engine"]["k_reclist"] == 20
        assert len(read_csv(out / "epochs.csv")) == 24

    def test_config_round_trip(self, tmp_path):
        out = tmp_path / "c"
        assert cli.main(["-q", "simulate", "--model", "popularity", "--epochs", "1", "--eta", "0.2",
                         "--out", str(out), *SMALL]) == 0
        again = tmp_path / "d"
        assert cli.main(["-q", "simulate", "--config", str(out / "config.yaml"), "--out", str(again)]) == 0
        assert (out / "epochs.csv").read_bytes() == (again / "epochs.csv").read_bytes()

    @pytest.mark.parametrize("argv", [
        ["--engine.no_such_key", "1"],
        ["--eta", "2"],
        ["--epochs", "many"],
        ["--model", "svd"],
        ["--engine.run", "9"],
        ["--epochs", "40"],
    ])
    def test_invalid(self, tmp_path, argv):
        assert cli.main(["-q", "simulate", "--out", str(tmp_path / "x"), *SMALL, *argv]) == 1

    def test_resume(self, tmp_path):
        ref, out = tmp_path / "ref", tmp_path / "out"
        base = ["-q", "simulate", "--model", "itemknn", "--eta", "0.5", "--epochs", "3", *SMALL,
                "--data.synthetic.n_days", "270"]
        assert cli.main(base + ["--out", str(ref)]) == 0
        # a finished checkpoint resumes to the same outputs
        assert cli.main(base + ["--out", str(out)]) == 0
        (out / "epochs.csv").unlink()
        assert cli.main(base + ["--out", str(out), "--resume"]) == 0
        assert (ref / "epochs.csv").read_bytes() == (out / "epochs.csv").read_bytes()
        assert (ref / "log.csv").read_bytes() == (out / "log.csv").read_bytes()

    def test_resume_mismatch(self, tmp_path):
        out = tmp_path / "out"
        base = ["-q", "simulate", "--model", "popularity", "--epochs", "1", "--out", str(out), *SMALL]
        assert cli.main(base) == 0
        assert cli.main(base + ["--eta", "0.3", "--resume"]) == 1

    def test_results_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RECLOOP_RESULTS", str(tmp_path / "env"))
        assert cli.main(["-q", "simulate", "--model", "popularity", "--epochs", "1",
                         "--sweep.sweep_id", "one", *SMALL]) == 0
        assert (tmp_path / "env" / "one" / "popularity" / "0" / "0" / "epochs.csv").exists()


class TestSweep:
    def test_layout(self, sweep_dir):
        summary = read_csv(sweep_dir / "summary.csv")
        assert len(summary) == 2 * 2 * 2  # models x etas x epochs
        assert {r["n_runs"] for r in summary} == {"2"}
        assert len(read_csv(sweep_dir / "runs.csv")) == 2 * 2 * 2 * 2
        assert len(cli.discover_cells(sweep_dir)) == 8
        manifest = json.loads((sweep_dir / "manifest.json").read_text())
        assert all(c["error"] is None for c in manifest["cells"])

    def test_partial_failure(self, tmp_path, monkeypatch):
        real = cli._sweep_cell_fn

        def flaky(root, sim_start, config, run, result):
            if run == 1:
                raise OSError("disk full")
            real(root, sim_start, config, run, result)

        monkeypatch.setattr(cli, "_sweep_cell_fn", flaky)
        code = cli.main(["-q", "sweep", "--results-root", str(tmp_path), "--sweep.models", "popularity",
                         "--sweep.eta_grid", "0", "--runs", "2", "--epochs", "1",
                         "--sweep.sweep_id", "p", *SMALL])
        assert code == 3
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        assert [c["error"] is None for c in manifest["cells"]] == [True, False]

    def test_bad_grid(self, tmp_path):
        assert cli.main(["-q", "sweep", "--results-root", str(tmp_path), "--sweep.eta_grid", "0,1.5",
                         *SMALL]) == 1


class TestExport:
    def test_gini_vs_eta(self, sweep_dir, tmp_path):
        out = tmp_path / "g.csv"
        assert cli.main(["-q", "export", str(sweep_dir), "--series", "gini-vs-eta", "-o", str(out)]) == 0
        rows = read_csv(out)
        assert list(rows[0]) == ["x", "y", "group", "y_std", "n_runs"]
        assert sorted((r["group"], float(r["x"])) for r in rows) == [
            ("popularity", 0.0), ("popularity", 1.0), ("random", 0.0), ("random", 1.0)]

    def test_jaccard_vs_epoch_matches(self, sweep_dir, tmp_path):
        out = tmp_path / "j.csv"
        assert cli.main(["-q", "export", str(sweep_dir), "--series", "jaccard-vs-epoch", "--model",
                         "random", "--eta", "1", "--run", "0", "-o", str(out)]) == 0
        rows = read_csv(out)
        epochs = read_csv(sweep_dir / "random" / "1" / "0" / "epochs.csv")
        assert [r["y"] for r in rows] == [e["mean_jaccard"] for e in epochs]
        assert all(math.isnan(float(r["y_std"])) for r in rows)

    def test_rank_frequency(self, sweep_dir, tmp_path):
        out = tmp_path / "r.csv"
        assert cli.main(["-q", "export", str(sweep_dir), "--series", "item-rank-frequency",
                         "--model", "popularity", "-o", str(out)]) == 0
        groups = {r["group"] for r in read_csv(out)}
        assert groups == {"training", "popularity/eta=0", "popularity/eta=1"}

    def test_edges(self, sweep_dir, tmp_path):
        out = tmp_path / "e.csv"
        assert cli.main(["-q", "export", str(sweep_dir), "--series", "edges", "--model", "random",
                         "--eta", "0", "--run", "1", "--max-edges", "5", "-o", str(out)]) == 0
        rows = read_csv(out)
        assert list(rows[0]) == ["item_a", "item_b", "weight"] and len(rows) == 5

    @pytest.mark.parametrize("argv", [
        ["--series", "nonsense"], ["--series", "bogus-vs-eta"], ["--series", "edges"],
        ["--series", "gini-vs-eta", "--model", "bpr"],
    ])
    def test_errors(self, sweep_dir, argv):
        assert cli.main(["-q", "export", str(sweep_dir), *argv]) == 1


class TestMetrics:
    def test_uniform_log(self, tmp_path, capsys):
        path = tmp_path / "u.csv"
        path.write_text("user,item,day\n" + "".join(f"u{k},i{k},{k % 3}\n" for k in range(12)))
        code, res = run_json(capsys, ["-q", "metrics", str(path), "--collective-gini"])
        assert code == 0 and res["collective_gini"] == pytest.approx(0.0, abs=1e-12)
        assert set(res) == {"window", "events", "collective_gini"}

    def test_window_outside(self, tmp_path):
        path = tmp_path / "u.csv"
        path.write_text("user,item,day\na,x,0\nb,y,1\n")
        assert cli.main(["-q", "metrics", str(path), "--start", "5", "--end", "9"]) == 1


def test_overrides_parsing():
    assert cli._overrides(["--eta=0.5", "--engine.k-reclist", "5", "--model", "bpr"]) == {
        "engine.eta": "0.5", "engine.k_reclist": "5", "model.kind": "bpr"}
    with pytest.raises(cli.UsageError):
        cli._overrides(["--eta"])


def test_help_exit_code():
    assert cli.main(["--no-such-flag"]) == 1
