import json
import os

import pytest

from anneal import cli


def write_config(tmp_path, **overrides):
    doc = {
        "dataset": {"synthetic": {"classes": 4, "per_class": 20, "dim": 8,
                                  "stddev": 0.3}},
        "model": {"encoder_hidden": [16, 8], "embedding_dim": 8,
                  "g_dims": [8, 8, 8], "bc_hidden": [8, 8]},
        "al": {"k": 6, "budget_bits": 100, "iterations_max": 2,
               "epochs_per_iteration": 2, "batch_size": 16,
               "seed_fraction": 0.1, "per_seed_similar": 2,
               "per_seed_dissimilar": 2},
        "seed": 3,
        "output_dir": str(tmp_path / "runs"),
    }
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestConfigValidation:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = write_config(tmp_path, extra_knob=1)
        assert cli.main(["run", "--config", str(path)]) == 1

    def test_unknown_nested_key_names_field(self, tmp_path, capsys):
        path = write_config(tmp_path)
        doc = json.loads(path.read_text())
        doc["al"]["learning_speed"] = 2
        path.write_text(json.dumps(doc))
        assert cli.main(["run", "--config", str(path)]) == 1
        assert "al.learning_speed" in capsys.readouterr().err

    def test_wrong_type_names_field(self, tmp_path, capsys):
        path = write_config(tmp_path)
        doc = json.loads(path.read_text())
        doc["al"]["k"] = "forty"
        path.write_text(json.dumps(doc))
        assert cli.main(["run", "--config", str(path)]) == 1
        assert "al.k" in capsys.readouterr().err

    def test_dataset_must_be_exactly_one_source(self, tmp_path, capsys):
        path = write_config(tmp_path, dataset={"path": "x.csv",
                                               "synthetic": {}})
        assert cli.main(["run", "--config", str(path)]) == 1
        assert "dataset" in capsys.readouterr().err

    def test_invalid_al_values_rejected_at_parse(self, tmp_path, capsys):
        path = write_config(tmp_path)
        doc = json.loads(path.read_text())
        doc["al"]["uncertain_pool_multiplier"] = 1
        path.write_text(json.dumps(doc))
        assert cli.main(["run", "--config", str(path)]) == 1
        assert "al" in capsys.readouterr().err


class TestSynth:
    def test_writes_expected_row_count(self, tmp_path, capsys):
        out = tmp_path / "d.csv"
        rc = cli.main(["synth", "--classes", "10", "--per-class", "100",
                       "--dim", "64", "--seed", "2", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 1001

    def test_same_flags_byte_identical(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        for out in (a, b):
            cli.main(["synth", "--classes", "3", "--per-class", "12",
                      "--dim", "4", "--seed", "9", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()

    def test_missing_out_is_usage_error(self):
        assert cli.main(["synth", "--classes", "3", "--per-class", "12",
                         "--dim", "4"]) == 1


class TestRun:
    def test_two_runs_byte_identical_results(self, tmp_path):
        path = write_config(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert cli.main(["run", "--config", str(path), "--strategy", "anneal",
                         "--out", str(out1)]) == 0
        assert cli.main(["run", "--config", str(path), "--strategy", "anneal",
                         "--out", str(out2)]) == 0
        assert (out1 / "results.csv").read_bytes() == \
               (out2 / "results.csv").read_bytes()

    def test_parallel_scoring_identical_results(self, tmp_path):
        path = write_config(tmp_path)
        doc = json.loads(path.read_text())
        doc["al"]["jobs"] = 2
        doc["al"]["scoring_block_size"] = 64
        path2 = tmp_path / "parallel.json"
        path2.write_text(json.dumps(doc))
        out1, out2 = tmp_path / "serial", tmp_path / "parallel"
        assert cli.main(["run", "--config", str(write_config(tmp_path)),
                         "--out", str(out1)]) == 0
        assert cli.main(["run", "--config", str(path2),
                         "--out", str(out2)]) == 0
        assert (out1 / "results.csv").read_bytes() == \
               (out2 / "results.csv").read_bytes()

    def test_human_oracle_requires_serve(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert cli.main(["run", "--config", str(path), "--oracle",
                         "human"]) == 1
        assert "serve" in capsys.readouterr().err

    def test_budget_zero_stops_after_iteration_zero(self, tmp_path):
        path = write_config(tmp_path)
        doc = json.loads(path.read_text())
        doc["al"]["budget_bits"] = 0
        path.write_text(json.dumps(doc))
        out = tmp_path / "r0"
        assert cli.main(["run", "--config", str(path), "--out",
                         str(out)]) == 0
        lines = (out / "results.csv").read_text().strip().split("\n")
        assert len(lines) == 2  # header + iteration 0

    def test_manifest_contents(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "m"
        cli.main(["run", "--config", str(path), "--strategy", "random",
                  "--out", str(out)])
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["strategy"] == "random"
        assert doc["seed"] == 3
        assert len(doc["dataset_sha256"]) == 64
        assert doc["config"]["al"]["k"] == 6
        assert os.path.exists(out / "checkpoint.npz")


class TestCompare:
    def test_grid_and_mean_column(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "cmp"
        rc = cli.main(["compare", "--config", str(path), "--strategies",
                       "anneal,random", "--seeds", "3,4", "--out", str(out)])
        assert rc == 0
        lines = (out / "combined.csv").read_text().strip().split("\n")
        assert lines[0] == "strategy,iteration,bits_mean,map_mean," \
                           "map_seed_3,map_seed_4"
        rows = [l.split(",") for l in lines[1:]]
        assert {r[0] for r in rows} == {"anneal", "random"}
        # 2 strategies x 3 iterations (0..2)
        assert len(rows) == 6
        for r in rows:
            mean = (float(r[4]) + float(r[5])) / 2.0
            assert abs(float(r[3]) - mean) <= 1e-8
        for strategy in ("anneal", "random"):
            for seed in (3, 4):
                cell = out / "cells" / f"{strategy}-seed{seed}"
                assert (cell / "results.csv").exists()

    def test_unknown_strategy_rejected(self, tmp_path):
        path = write_config(tmp_path)
        assert cli.main(["compare", "--config", str(path),
                         "--strategies", "anneal,destiny"]) == 1


class TestEval:
    def test_eval_prints_map(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "train"
        cli.main(["run", "--config", str(config), "--out", str(out)])
        data_csv = tmp_path / "eval.csv"
        cli.main(["synth", "--classes", "4", "--per-class", "20", "--dim",
                  "8", "--seed", "3", "--out", str(data_csv)])
        capsys.readouterr()
        rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.npz"),
                       "--dataset", str(data_csv)])
        assert rc == 0
        assert "mAP@5 = " in capsys.readouterr().out

    def test_dimension_mismatch_is_runtime_error(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "train"
        cli.main(["run", "--config", str(config), "--out", str(out)])
        data_csv = tmp_path / "bad.csv"
        cli.main(["synth", "--classes", "3", "--per-class", "12", "--dim",
                  "4", "--seed", "1", "--out", str(data_csv)])
        rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.npz"),
                       "--dataset", str(data_csv)])
        assert rc == 2


class TestExitCodes:
    def test_missing_config_file_is_usage_error(self):
        assert cli.main(["run", "--config", "/nonexistent.json"]) == 1

    def test_bad_flag_is_usage_error(self):
        assert cli.main(["run", "--config"]) == 1

    def test_runtime_failure_is_2(self, tmp_path):
        path = write_config(tmp_path,
                            dataset={"path": str(tmp_path / "missing.csv")})
        assert cli.main(["run", "--config", str(path)]) == 2
