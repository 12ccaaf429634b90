import json
import pytest

from quadmed.cli import format_config, main, parse_config_text, resolve_config, UsageError
from quadmed.data import read_csv
from quadmed.dgp import DgpSpec, generate


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestConfig:
    def test_file_and_flags(self):
        values = parse_config_text("# comment\nseed = 4\ndgp.n = 20\n")
        cfg = resolve_config("simulate", values, {"dgp.n": "30"})
        assert cfg["seed"] == 4 and cfg["dgp.n"] == 30

    def test_unknown_key(self):
        with pytest.raises(UsageError):
            resolve_config("simulate", {"dgp.bogus": "1"}, {})

    def test_bad_line(self):
        with pytest.raises(UsageError):
            parse_config_text("just words\n")

    def test_printed_config_is_sorted(self):
        text = format_config(resolve_config("oracle", {}, {}))
        keys = [ln.split(" = ")[0] for ln in text.splitlines()]
        assert keys == sorted(keys) and "seed" in keys


class TestSimulate:
    def test_schema(self, tmp_path, capsys):
        code, out, _ = run(capsys, "simulate", "--setting", "S3", "--n", 100, "--out", tmp_path,
                           "--name", "s3")
        assert code == 0
        assert out.startswith("# resolved config")
        assert "seed = 0" in out
        lines = (tmp_path / "s3.csv").read_text().splitlines()
        assert lines[0] == ",".join(["y", "a"] + [f"x{j}" for j in range(1, 51)] + ["m1"])
        assert len(lines) == 101

    def test_deterministic(self, tmp_path, capsys):
        for stem in ("a", "b"):
            run(capsys, "simulate", "--setting", "S2", "--n", 50, "--d1", 6, "--d2", 3,
                "--seed", 3, "--y-cross", "--out", tmp_path, "--name", stem)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.y_cross.csv").read_bytes() == (tmp_path / "b.y_cross.csv").read_bytes()

    def test_round_trip(self, tmp_path, capsys):
        run(capsys, "simulate", "--setting", "EX1", "--n", 80, "--seed", 5, "--out", tmp_path,
            "--name", "ex")
        assert read_csv(tmp_path / "ex.csv") == generate(DgpSpec("EX1", 80, seed=5)).dataset

    def test_invalid_setting(self, tmp_path, capsys):
        code, _, err = run(capsys, "simulate", "--setting", "S9", "--out", tmp_path)
        assert code == 2 and "usage error" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        code, _, _ = run(capsys, "simulate", "--set", "dgp.color=red", "--out", tmp_path)
        assert code == 2

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, _ = run(capsys, "simulate", "--config", tmp_path / "nope.cfg")
        assert code == 2


@pytest.fixture(scope="module")
def ex1_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    assert main(["simulate", "--setting", "EX1", "--n", "5000", "--seed", "11",
                 "--out", str(path), "--name", "ex1"]) == 0
    return path / "ex1.csv"


class TestEstimate:
    def test_generic_estimator_on_uniform_design(self, ex1_csv, tmp_path, capsys):
        code, out, _ = run(capsys, "estimate", ex1_csv, "--method", "qr", "--variant", "QR2",
                           "--set", "estimator.n_trees=100", "--set", "aipw.n_trees=50",
                           "--out", tmp_path, "--name", "fit")
        assert code == 0
        assert "| NDE |" in out and "Mediation proportion" in out
        payload = json.loads((tmp_path / "fit.effects.json").read_text())
        r10 = payload["theta_10"]
        assert abs(r10["theta_hat"] - 1) <= 3 * r10["se"]
        assert (tmp_path / "fit.effects.md").exists()

    def test_repeats_deterministic(self, tmp_path, capsys):
        run(capsys, "simulate", "--setting", "EX1", "--n", 200, "--seed", 2, "--out", tmp_path,
            "--name", "small")
        args = ["estimate", tmp_path / "small.csv", "--method", "qr", "--repeats", 30,
                "--set", "estimator.n_trees=5", "--set", "aipw.n_trees=5", "--out", tmp_path]
        run(capsys, *args, "--name", "one")
        run(capsys, *args, "--name", "two")
        one = (tmp_path / "one.effects.json").read_text()
        assert one == (tmp_path / "two.effects.json").read_text()
        assert json.loads(one)["theta_10"]["repeats"] == 30

    def test_schema_violation(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("y,a,x1,m1\n1.0,1,1,0.5\n2.0,2,1,0.5\n")
        code, _, err = run(capsys, "estimate", bad, "--out", tmp_path)
        assert code == 1 and "line 3, column 2 (a)" in err

    def test_unparseable_cell(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("y,a,x1,m1\n1.0,1,1,abc\n")
        code, _, err = run(capsys, "estimate", bad, "--out", tmp_path)
        assert code == 1 and "line 2, column 4 (m1)" in err

    def test_missing_data(self, tmp_path, capsys):
        code, _, _ = run(capsys, "estimate", "--out", tmp_path)
        assert code == 2


class TestReproduce:
    def test_unknown_table(self, tmp_path, capsys):
        code, _, err = run(capsys, "reproduce", "t9", "--out", tmp_path)
        assert code == 2 and "unknown table" in err

    def test_unknown_scale(self, tmp_path, capsys):
        code, _, _ = run(capsys, "reproduce", "t3", "galaxy", "--out", tmp_path)
        assert code == 2

    def test_bad_jobs(self, tmp_path, capsys):
        code, _, _ = run(capsys, "reproduce", "t3", "--jobs", 0, "--out", tmp_path)
        assert code == 2


class TestOracle:
    def test_uniform_design(self, capsys):
        code, out, _ = run(capsys, "oracle", "--setting", "EX1", "--n-mc", 200_000,
                           "--compare-fixture")
        assert code == 0 and "PASS" in out
        line = next(ln for ln in out.splitlines() if ln.startswith("theta ="))
        theta, se = float(line.split()[2]), float(line.split()[5])
        assert abs(theta - 1) <= 3 * se

    def test_floor(self, capsys):
        code, _, _ = run(capsys, "oracle", "--setting", "EX1", "--n-mc", 100)
        assert code == 2

    def test_fixture_pass(self, capsys):
        code, out, _ = run(capsys, "oracle", "--setting", "S3", "--d1", 4, "--n-mc", 200_000,
                           "--compare-fixture")
        assert code == 0 and "PASS" in out

    def test_fixture_mismatch_exits_1(self, capsys, monkeypatch):
        import quadmed.cli as cli
        monkeypatch.setattr(cli, "load_fixtures",
                            lambda: {"S3": {"theta": 9.0, "mc_se": 0.001}})
        code, out, err = run(capsys, "oracle", "--setting", "S3", "--d1", 4, "--n-mc", 20_000,
                             "--compare-fixture")
        assert code == 1 and "FAIL" in out and "disagrees" in err


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
