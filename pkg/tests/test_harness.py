import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadmed.dgp import DgpSpec
from quadmed.harness import (ExperimentConfig, MethodConfig, MetricsRow, MetricsTable,
                             emit_table, parse_jsonl, reproduce_config, robust_metrics,
                             run_experiment, write_outputs)

EX1 = DgpSpec("EX1", 1)


def config(methods, n_values=(200,), reps=5, **kw):
    return ExperimentConfig("unit", EX1, n_values, tuple(methods), reps, **kw)


class TestRobustMetrics:
    def test_outlier(self):
        m = robust_metrics([1.0, 1.0, 100.0], [(0, 2)] * 3, 1.0)
        assert m["bias"] == 0 and m["rmse"] == 0

    def test_coverage_and_length(self):
        m = robust_metrics([0.5, 1.5], [(0, 2), (0, 2)], 1.0)
        assert m["ac"] == 1 and m["al"] == 2

    def test_single(self):
        assert robust_metrics([1.3], [(1, 2)], 1.0)["bias"] == pytest.approx(0.3)

    def test_coverage_is_a_mean(self):
        m = robust_metrics([1.0] * 4, [(0, 2), (0, 2), (0, 2), (3, 4)], 1.0)
        assert m["ac"] == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            robust_metrics([], [], 1.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), size=st.integers(1, 30))
    def test_permutation_invariance(self, seed, size):
        rng = np.random.default_rng(seed)
        est = rng.normal(size=size)
        ci = np.column_stack([est - rng.uniform(0, 2, size), est + rng.uniform(0, 2, size)])
        perm = rng.permutation(size)
        a = robust_metrics(est, ci, 0.1)
        b = robust_metrics(est[perm], ci[perm], 0.1)
        assert a == b
        assert 0 <= a["ac"] <= 1 and a["al"] >= 0


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            config([], reps=1)
        with pytest.raises(ValueError):
            config([MethodConfig("Z", "zero")], reps=0)
        with pytest.raises(ValueError):
            config([MethodConfig("Z", "zero"), MethodConfig("Z", "oracle")])
        with pytest.raises(ValueError):
            MethodConfig("X", "svm")

    def test_fixture_refused_with_overrides(self):
        cfg = ExperimentConfig("o", DgpSpec("EX1", 1, overrides={"noise_sd": 2.0}), (10,),
                               (MethodConfig("Z", "zero"),), 1)
        with pytest.raises(ValueError):
            cfg.resolve_theta()

    def test_numeric_truth(self):
        assert config([MethodConfig("Z", "zero")], theta_truth=2.5).resolve_theta() == 2.5


class TestRunExperiment:
    def test_degenerate_method(self):
        table = run_experiment(config([MethodConfig("Zero", "zero")]))
        row = table.row("Zero", 200)
        assert row.ac == 0 and row.bias == -1 and row.al == 0
        assert row.valid and row.n_failures == 0

    def test_oracle_coverage(self):
        table = run_experiment(config([MethodConfig("Oracle", "oracle")], (2000,), 200, seed=1))
        assert 0.90 <= table.row("Oracle", 2000).ac <= 0.99

    def test_failures_counted(self):
        # K larger than N makes every replication fail validation.
        table = run_experiment(config([MethodConfig("Bad", "qr", k_folds=50),
                                       MethodConfig("Zero", "zero")], (20,), 3))
        bad = table.row("Bad", 20)
        assert bad.n_failures == 3 and not bad.valid and math.isnan(bad.bias)
        assert table.row("Zero", 20).valid
        assert "invalid" in emit_table(table)

    def test_rows_complete(self):
        methods = [MethodConfig("Oracle", "oracle"), MethodConfig("Zero", "zero")]
        table = run_experiment(config(methods, (50, 80), 2))
        assert {(r.method, r.n) for r in table.rows} == {(m.label, n) for m in methods
                                                        for n in (50, 80)}

    def test_jobs_do_not_change_output(self):
        cfg = config([MethodConfig("Oracle", "oracle"),
                      MethodConfig("QR2", "qr", n_trees=10)], (300,), 4, seed=9)
        one = emit_table(run_experiment(cfg, jobs=1), "jsonl")
        two = emit_table(run_experiment(cfg, jobs=2), "jsonl")
        assert one == two
        assert one == emit_table(run_experiment(cfg, jobs=1), "jsonl")


def sample_table():
    rows = [MetricsRow("QR2", 1000, 0.0514, 0.11634, 0.4541, 0.98, 50, 0, True),
            MetricsRow("MQR2", 1000, 0.30912, 0.3, 0.5, 0.4, 50, 11, False)]
    return MetricsTable(rows, {"name": "t", "d1": 50, "d2": 1, "theta": 3.39})


class TestEmit:
    def test_markdown_columns(self):
        text = emit_table(sample_table())
        assert "| Method | Bias | RMSE | AL | AC |" in text
        assert "N=1000, (d1,d2)=(50,1)" in text
        assert "| QR2 | 0.051 | 0.116 | 0.454 | 0.980 |" in text
        assert "MQR2 (invalid: 11 failures)" in text

    def test_single_row(self):
        table = MetricsTable(sample_table().rows[:1], {})
        lines = [ln for ln in emit_table(table).splitlines() if ln.startswith("| ")]
        assert len(lines) == 2  # header plus one data line

    def test_csv(self):
        text = emit_table(sample_table(), "csv").splitlines()
        assert text[0] == "method,n,bias,rmse,al,ac,n_failures,valid"
        assert text[1] == "QR2,1000,0.051,0.116,0.454,0.980,0,true"

    def test_jsonl_round_trip(self):
        table = sample_table()
        back = parse_jsonl(emit_table(table, "jsonl"))
        assert back.rows == table.rows
        assert back.meta == table.meta

    def test_jsonl_round_trip_of_run(self):
        table = run_experiment(config([MethodConfig("Oracle", "oracle")], reps=3))
        back = parse_jsonl(emit_table(table, "json-lines"))
        assert back.rows == table.rows and back.replicates == table.replicates
        assert back.meta["metrics"]["rmse"] == "sqrt(median((theta_hat - theta)^2))"

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_table(sample_table(), "xml")

    def test_write_outputs(self, tmp_path):
        paths = write_outputs(sample_table(), tmp_path, "demo")
        assert paths["jsonl"].name == "demo.metrics.jsonl"
        assert paths["markdown"].read_text().startswith("N=1000")


class TestPresets:
    def test_t3_desk_methods(self):
        cfg = reproduce_config("t3", "desk")
        assert [m.label for m in cfg.methods] == ["Oracle", "TR", "O-TR'", "QR2", "MQR2"]
        assert (cfg.dgp.setting, cfg.dgp.d1, cfg.dgp.d2) == ("S3", 50, 1)
        assert cfg.n_values == (1000,) and cfg.repetitions == 50

    def test_preset_learner_settings(self):
        cfg = reproduce_config("t3", "desk")
        by_label = {m.label: m for m in cfg.methods}
        assert by_label["QR2"].regression_mtry == "third" and by_label["TR"].n_trees == 100
        assert by_label["MQR2"].free_intercept and by_label["O-TR'"].free_intercept
        assert not by_label["QR2"].free_intercept

    def test_settings_in_metadata(self):
        table = run_experiment(config([MethodConfig("Zero", "zero")], reps=1))
        assert table.meta["method_settings"]["Zero"]["kind"] == "zero"

    def test_bad_mtry_rule(self):
        with pytest.raises(ValueError):
            MethodConfig("Q", "qr", regression_mtry="most")

    def test_t2_desk_dims(self):
        cfg = reproduce_config("t2", "desk")
        assert (cfg.dgp.d1, cfg.dgp.d2) == (41, 10)

    def test_paper_scale(self):
        cfg = reproduce_config("t1", "paper")
        assert (cfg.dgp.d1, cfg.dgp.d2) == (101, 50) and cfg.repetitions == 100
        assert len(cfg.methods) == 7

    @pytest.mark.parametrize("args", [("t9", "desk"), ("t1", "huge")])
    def test_unknown(self, args):
        with pytest.raises(ValueError):
            reproduce_config(*args)
