import csv
import json

import pytest

from activechannel import active, cli
from activechannel.errors import NumericError

TINY = {
    "backend": "mle", "seed": 3, "init_count": 6, "warmup_steps": 2, "explore_steps": 2,
    "hidden": [4], "train_steps": 30, "lr": 0.01,
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "toy"
    assert cli.main(["generate", "--kind", "toy", "--n", "40", "--d", "16", "--seed", "7",
                     "--out", str(out)]) == 0
    return str(out)


@pytest.fixture(scope="module")
def run_dir(toy, tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg = write_json(base / "cfg.json", TINY)
    assert cli.main(["run", "--config", cfg, "--data", toy, "--out", str(base / "out")]) == 0
    return base


def tree_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestGenerate:
    def test_same_seed_same_bytes(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert cli.main(["generate", "--n", "30", "--d", "8", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        out = capsys.readouterr().out
        assert "n=30" in out and "d=8" in out and "channels=2" in out and "seed=7" in out

    def test_toy_manifest(self, toy):
        man = json.loads(open(f"{toy}/manifest.json").read())
        assert man["kind"] == "toy" and man["n"] == 40 and man["correct_channel"] == 0

    def test_synth_image(self, tmp_path):
        assert cli.main(["generate", "--kind", "synth-image", "--height", "8", "--width", "8",
                         "--channels", "4", "--v", "12", "--out", str(tmp_path / "img")]) == 0
        man = json.loads((tmp_path / "img" / "manifest.json").read_text())
        assert man["kind"] == "image" and len(man["channels"]) == 4
        assert man["informative"] == {"frequency": 2, "polarization": 1}

    def test_bad_flag(self, tmp_path):
        assert cli.main(["generate", "--bogus", "--out", str(tmp_path)]) == 2

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.main(["generate", "--n", "10", "--d", "8", "--out", str(blocker / "sub")]) == 3


class TestConfig:
    def test_presets_ship(self):
        assert set(cli.preset_names()) >= {"fig4", "fig5-mle", "fig5-ensemble", "fig5-hmc", "fig7", "fig8"}
        for name in cli.preset_names():
            cfg, exp = cli.load_config(name)
            assert cfg.backend in active.LOOP_BACKENDS

    def test_image_preset_settings(self):
        cfg, exp = cli.load_config("fig7")
        assert cfg.init_fraction == 0.01 and cfg.warmup_steps == 5
        assert exp["scalarizer"] == "polarization_loop_area"
        assert cli.load_config("fig8")[1]["scalarizer"] == "frequency_loop_area"

    def test_unknown_key_exits_2(self, tmp_path, toy):
        cfg = write_json(tmp_path / "c.json", {**TINY, "learning_rate": 0.1})
        assert cli.main(["run", "--config", cfg, "--data", toy, "--out", str(tmp_path / "o")]) == 2
        assert not (tmp_path / "o" / "trace.json").exists()

    def test_duplicate_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"seed": 1, "seed": 2}')
        with pytest.raises(ValueError):
            cli.load_config(str(p))

    def test_nan_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"lr": NaN}')
        with pytest.raises(ValueError):
            cli.load_config(str(p))

    def test_unknown_backend_exits_2(self, tmp_path, toy):
        cfg = write_json(tmp_path / "c.json", {**TINY, "backend": "vi"})
        assert cli.main(["run", "--config", cfg, "--data", toy, "--out", str(tmp_path / "o")]) == 2
        assert cli.main(["run", "--config", cfg, "--backend", "vi", "--data", toy, "--out", str(tmp_path)]) == 2

    def test_missing_data_exits_3(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", TINY)
        assert cli.main(["run", "--config", cfg, "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 3


class TestRun:
    def test_outputs(self, run_dir, capsys):
        d = json.loads((run_dir / "out" / "trace.json").read_text())
        assert d["status"] == "complete"
        assert [r["phase"] for r in d["records"]] == ["warmup"] * 2 + ["explore"] * 2
        assert (run_dir / "out" / "trace.csv").exists()

    def test_same_seed_same_bytes(self, run_dir, toy):
        cfg = str(run_dir / "cfg.json")
        assert cli.main(["run", "--config", cfg, "--data", toy, "--out", str(run_dir / "again")]) == 0
        assert tree_bytes(run_dir / "out") == tree_bytes(run_dir / "again")

    def test_workers_do_not_change_bytes(self, run_dir, toy):
        cfg = str(run_dir / "cfg.json")
        assert cli.main(["run", "--config", cfg, "--data", toy, "--workers", "2",
                         "--out", str(run_dir / "pooled")]) == 0
        a = json.loads((run_dir / "out" / "trace.json").read_text())
        b = json.loads((run_dir / "pooled" / "trace.json").read_text())
        a["config"].pop("workers")
        b["config"].pop("workers")
        assert a == b
        assert (run_dir / "out" / "trace.csv").read_bytes() == (run_dir / "pooled" / "trace.csv").read_bytes()

    def test_rewards_table_printed(self, toy, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {**TINY, "explore_steps": 0})
        assert cli.main(["run", "--config", cfg, "--data", toy, "--out", str(tmp_path / "o")]) == 0
        out = capsys.readouterr().out
        assert "R_a" in out and "status=complete" in out

    def test_numeric_failure_exits_4_and_flushes(self, toy, tmp_path, monkeypatch, capsys):
        calls = {"n": 0}
        real = active.DklPredictor.__call__

        def flaky(self, channel, X, y, X_star, seed):
            calls["n"] += 1
            if calls["n"] > 2:
                raise NumericError("cholesky failed", step=None, channel=channel)
            return real(self, channel, X, y, X_star, seed)

        monkeypatch.setattr(active.DklPredictor, "__call__", flaky)
        cfg = write_json(tmp_path / "c.json", TINY)
        assert cli.main(["run", "--config", cfg, "--data", toy, "--out", str(tmp_path / "o")]) == 4
        d = json.loads((tmp_path / "o" / "trace.json").read_text())
        assert d["status"] == "failed"
        assert len(d["records"]) == 1
        assert "step" in capsys.readouterr().err


class TestBench:
    def test_rows(self, toy, tmp_path):
        cfg = write_json(tmp_path / "c.json", TINY)
        out = tmp_path / "b.csv"
        assert cli.main(["bench", "--config", cfg, "--data", toy, "--fractions", "0.2,0.3", "--trials", "1",
                         "--backends", "mle", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["backend", "fraction", "accuracy", "trials", "wall_time"]
        assert len(rows) == 3
        assert all(float(r[2]) in (0.0, 1.0) and r[3] == "1" for r in rows[1:])

    def test_unknown_backend(self, toy, tmp_path):
        cfg = write_json(tmp_path / "c.json", TINY)
        assert cli.main(["bench", "--config", cfg, "--data", toy, "--fractions", "0.2", "--trials", "1",
                         "--backends", "mle,gibbs", "--out", str(tmp_path / "b.csv")]) == 2


class TestEmbed:
    def test_toy_columns(self, toy, tmp_path):
        cfg = write_json(tmp_path / "c.json", TINY)
        out = tmp_path / "z.csv"
        assert cli.main(["embed", "--config", cfg, "--data", toy, "--out", str(out),
                         "--save-model", str(tmp_path / "m")]) == 0
        rows = read_csv(out)
        assert rows[0] == ["index", "z1", "z2", "mu", "sigma", "A", "y"]
        assert len(rows) == 41
        # a saved model reproduces the same coordinates without retraining
        again = tmp_path / "z2.csv"
        assert cli.main(["embed", "--model", str(tmp_path / "m"), "--data", toy, "--out", str(again)]) == 0
        assert out.read_bytes() == again.read_bytes()

    def test_latent_three(self, toy, tmp_path):
        cfg = write_json(tmp_path / "c.json", {**TINY, "latent": 3})
        out = tmp_path / "z.csv"
        assert cli.main(["embed", "--config", cfg, "--data", toy, "--out", str(out)]) == 0
        assert len(read_csv(out)[0]) == 8

    def test_image_has_latent_columns_only(self, tmp_path):
        img = tmp_path / "img"
        assert cli.main(["generate", "--kind", "synth-image", "--height", "7", "--width", "7",
                         "--channels", "2", "--v", "12", "--out", str(img)]) == 0
        cfg = write_json(tmp_path / "c.json", {**TINY, "scalarizer": "polarization_loop_area"})
        out = tmp_path / "z.csv"
        assert cli.main(["embed", "--config", cfg, "--data", str(img), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["index", "z1", "z2"]
        assert len(rows) == 1 + 5 * 5

    def test_needs_model_or_config(self, toy, tmp_path):
        assert cli.main(["embed", "--data", toy, "--out", str(tmp_path / "z.csv")]) == 2


class TestReport:
    def test_series(self, run_dir):
        out = run_dir / "report"
        assert cli.main(["report", "--trace", str(run_dir / "out" / "trace.json"), "--out", str(out)]) == 0
        unc = read_csv(out / "uncertainty.csv")
        assert unc[0] == ["step", "phase", "channel", "V_m"]
        assert {r[1] for r in unc[1:]} == {"warmup", "explore"}
        rew = read_csv(out / "rewards.csv")
        assert rew[0] == ["channel", "n_sampled", "cumulative", "R_a"]
        d = json.loads((run_dir / "out" / "trace.json").read_text())
        for i, row in enumerate(rew[1:]):
            assert float(row[3]) == d["final_rewards"]["average"][i]
        assert len(read_csv(out / "explore.csv")) == 3
        assert len(read_csv(out / "warmup.csv")) == 3

    def test_empty_explore_is_header_only(self, toy, tmp_path):
        cfg = write_json(tmp_path / "c.json", {**TINY, "explore_steps": 0})
        assert cli.main(["run", "--config", cfg, "--data", toy, "--out", str(tmp_path / "o")]) == 0
        assert cli.main(["report", "--trace", str(tmp_path / "o" / "trace.json"), "--out", str(tmp_path / "r")]) == 0
        assert read_csv(tmp_path / "r" / "explore.csv") == [["step", "channel", "V_m", "reward", "epsilon"]]

    @pytest.mark.parametrize("mutate,field", [
        (lambda d: d.pop("channel_names"), "channel_names"),
        (lambda d: d["final_rewards"].pop("average"), "final_rewards.average"),
        (lambda d: d["records"][0].update(phase="cooldown"), "records[0].phase"),
        (lambda d: d["records"][1].update(vm=[0.1]), "records[1].vm"),
        (lambda d: d["records"][0].update(chosen_channel=9), "records[0].chosen_channel"),
    ])
    def test_malformed_trace_exits_5(self, run_dir, tmp_path, capsys, mutate, field):
        d = json.loads((run_dir / "out" / "trace.json").read_text())
        mutate(d)
        bad = write_json(tmp_path / "t.json", d)
        assert cli.main(["report", "--trace", bad, "--out", str(tmp_path / "r")]) == 5
        assert repr(field) in capsys.readouterr().err

    def test_not_json(self, tmp_path):
        p = tmp_path / "t.json"
        p.write_text("{")
        assert cli.main(["report", "--trace", str(p), "--out", str(tmp_path)]) == 5


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "activechannel", "generate", "--n", "12", "--d", "8",
                          "--out", str(tmp_path / "t")], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads((tmp_path / "t" / "manifest.json").read_text())["n"] == 12
