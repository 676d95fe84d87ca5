import json

import numpy as np
import pytest

from semicausal import cli
from semicausal.simulation import DGPSpec


@pytest.fixture
def dataset_csv(tmp_path):
    path = tmp_path / "d.csv"
    DGPSpec().sample(300, np.random.default_rng(0)).to_csv(path)
    return path


@pytest.fixture
def config_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"estimator": "aipw", "propensity": {"method": "logistic"},
                                "outcome": {"method": "ols"}}))
    return path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestEstimate:

    def test_happy_path(self, tmp_path, dataset_csv, config_json):
        out = tmp_path / "r.json"
        assert run(["estimate", "--data", dataset_csv, "--config", config_json, "--out", out]) == 0
        report = json.loads(out.read_text())
        assert set(report) == {"estimator", "psi_hat", "se", "ci", "level", "n", "diagnostics"}
        assert report["n"] == 300 and report["ci"][0] <= report["psi_hat"] <= report["ci"][1]

    @pytest.mark.parametrize("estimator", cli.ESTIMATE_METHODS)
    def test_every_estimator(self, tmp_path, dataset_csv, estimator):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'estimator = "{estimator}"\nfolds = 3\nlevel = 0.9\n\n'
                       '[propensity]\nmethod = "logistic"\nfeatures = ["l1"]\n\n[outcome]\nmethod = "ols"\n')
        out = tmp_path / "r.json"
        assert run(["estimate", "--data", dataset_csv, "--config", cfg, "--out", out]) == 0
        report = json.loads(out.read_text())
        assert report["level"] == 0.9
        assert report["estimator"] == {"aipw": "aipw", "crossfit_aipw": "crossfit_aipw",
                                       "ipw": "ipw", "ipw_estimated": "ipw_estimated"}[estimator]

    def test_missing_data_is_usage_error(self, config_json, capsys):
        assert run(["estimate", "--config", config_json]) == 1
        err = capsys.readouterr().err
        assert "usage:" in err and "--data" in err

    def test_unknown_flag(self, capsys):
        assert run(["simulate", "--bogus"]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_missing_input_file(self, config_json, capsys):
        assert run(["estimate", "--data", "/nonexistent.csv", "--config", config_json]) == 1

    def test_malformed_csv(self, tmp_path, config_json, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("l1,a,y\n0,1,2\n0,x,1\n")
        assert run(["estimate", "--data", bad, "--config", config_json]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_malformed_config(self, tmp_path, dataset_csv, capsys):
        bad = tmp_path / "c.json"
        bad.write_text('{"estimator": "aipw",\n "level": }')
        assert run(["estimate", "--data", dataset_csv, "--config", bad]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_directory_output(self, tmp_path, dataset_csv, config_json):
        assert run(["estimate", "--data", dataset_csv, "--config", config_json, "--out", tmp_path]) == 2

    def test_stdout(self, dataset_csv, config_json, capsys):
        assert run(["estimate", "--data", dataset_csv, "--config", config_json]) == 0
        assert json.loads(capsys.readouterr().out)["estimator"] == "aipw"


class TestSeeds:

    def test_env_seed_and_override(self, tmp_path, monkeypatch):
        outs = {}
        for tag, env, flag in [("env", "7", []), ("flag", "7", ["--seed", "8"]), ("direct", None, ["--seed", "7"])]:
            if env is None:
                monkeypatch.delenv(cli.SEED_ENV, raising=False)
            else:
                monkeypatch.setenv(cli.SEED_ENV, env)
            out = tmp_path / f"{tag}.json"
            assert run(["simulate", "--n", 50, "--reps", 5, "--out", out, *flag]) == 0
            outs[tag] = out.read_bytes()
        assert outs["env"] == outs["direct"] != outs["flag"]

    def test_default_seed(self, tmp_path, monkeypatch):
        monkeypatch.delenv(cli.SEED_ENV, raising=False)
        out = tmp_path / "s.json"
        assert run(["simulate", "--n", 50, "--reps", 3, "--out", out]) == 0
        assert json.loads(out.read_text())["seed"] == cli.DEFAULT_SEED

    def test_bad_env_seed(self, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        assert run(["simulate", "--n", 50, "--reps", 3]) == 1


class TestSubcommands:

    def test_eif_check_bundled(self, tmp_path):
        out = tmp_path / "e.json"
        assert run(["eif-check", "--out", out]) == 0
        report = json.loads(out.read_text())
        assert report["passed"]
        assert all(r["gap"] <= 1e-6 for r in report["eif"]["records"])
        assert len(report["eif"]["records"]) == 10
        assert report["variance_gap"] > 0

    def test_eif_check_g_list(self, tmp_path):
        dist = cli.example_path("example_distribution.json")
        k = len(json.load(open(dist))["atoms"])
        g = np.zeros(k)
        g[0], g[1] = 1.0, -1.0
        base_mass = [a["p"] for a in json.load(open(dist))["atoms"]]
        g = g - np.dot(base_mass, g)
        glist = tmp_path / "g.json"
        glist.write_text(json.dumps([g.tolist()]))
        out = tmp_path / "e.json"
        assert run(["eif-check", "--dist", dist, "--g-list", glist, "--out", out]) == 0
        assert len(json.loads(out.read_text())["eif"]["records"]) == 1

    def test_eif_check_rejects_bad_g(self, tmp_path):
        glist = tmp_path / "g.json"
        glist.write_text(json.dumps([[1.0] * 12]))
        assert run(["eif-check", "--g-list", glist]) == 2

    def test_simulate_per_rep(self, tmp_path):
        spec = tmp_path / "spec.toml"
        spec.write_text("levels = [-1.0, 0.0, 1.0]\nnoise_sd = 0.5\n")
        out, per = tmp_path / "s.json", tmp_path / "p.csv"
        assert run(["simulate", spec, "--n", 80, "--reps", 6, "--estimators", "aipw,ipw_known",
                    "--out", out, "--per-rep", per]) == 0
        lines = per.read_text().splitlines()
        assert lines[0] == "rep,estimator,psi_hat,se,covered"
        assert len(lines) == 1 + 12
        summary = json.loads(out.read_text())
        assert set(summary["estimators"]) == {"aipw", "ipw_known"}

    def test_simulate_bad_spec(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"noise": 1}))
        assert run(["simulate", spec, "--n", 20, "--reps", 2]) == 2

    def test_rates(self, tmp_path):
        out = tmp_path / "q.json"
        assert run(["rates", "--r-pi", 0.3, "--r-mu", 0.3, "--n-grid", "200,2000", "--reps", 10, "--out", out]) == 0
        report = json.loads(out.read_text())
        assert [r["n"] for r in report["rows"]] == [200, 2000]
        assert report["rate_pi"] == 0.3


class TestHelp:

    @pytest.mark.parametrize("command", ["estimate", "simulate", "eif-check", "rates"])
    def test_documents_every_flag(self, command, capsys):
        assert run([command, "--help"]) == 0
        text = capsys.readouterr().out
        parser = cli.build_parser()
        sub = next(a for a in parser._actions if a.dest == "command").choices[command]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text
            assert action.help, f"{command}: {action.dest} undocumented"

    def test_top_level(self, capsys):
        assert run(["--help"]) == 0
        assert "eif-check" in capsys.readouterr().out


class TestEmitReport:

    def test_round_trip(self, tmp_path):
        report = {"b": [1.0, 2.5, float(np.float64(1) / 3)], "a": {"x": 1, "y": None, "z": True}, "s": "t"}
        path = tmp_path / "r.json"
        cli.emit_report(report, path)
        assert json.loads(path.read_text()) == report

    def test_deterministic_bytes(self, tmp_path):
        report = {"z": 0.1, "a": [np.float64(2) / 3, np.int64(4)]}
        p1, p2 = tmp_path / "1.json", tmp_path / "2.json"
        cli.emit_report(report, p1)
        cli.emit_report(dict(reversed(list(report.items()))), p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_text().index('"a"') < p1.read_text().index('"z"')

    def test_seventeen_digits(self):
        assert cli.dumps(0.1).strip() == "0.10000000000000001"
        assert cli.dumps(1.0).strip() == "1.0"
        assert float(cli.dumps(2 / 3)) == 2 / 3

    def test_directory(self, tmp_path):
        with pytest.raises(OSError):
            cli.emit_report({"a": 1}, tmp_path)

    def test_no_temp_left_behind(self, tmp_path):
        cli.emit_report({"a": 1}, tmp_path / "r.json")
        assert [p.name for p in tmp_path.iterdir()] == ["r.json"]
