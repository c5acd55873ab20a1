import json
from pathlib import Path

import numpy as np
import pytest

from hetmoe.cli import main
from hetmoe.configs import parse_run_config
from hetmoe.traceio import read_trace


def write_config(tmp_path, **overrides):
    corpus = tmp_path / "corpus.txt"
    if not corpus.exists():
        corpus.write_text(("abcd efgh ijkl mnop qrst uvwx yz01 2345\n" * 40))
    cfg = {
        "model": {"dim": 16, "n_layers": 2, "n_heads": 2, "head_dim": 8,
                  "intermediate_dim": 24, "seq_len": 12},
        "layer": {"n_ffn": 3, "n_zero": 1, "n_copy": 1, "n_const": 1, "k": 2,
                  "tau": 0.75, "gamma": 1.1},
        "train": {"steps": 6, "lr": 0.003, "beta": 0.01, "seed": 0,
                  "corpus": str(corpus), "batch_size": 2, "warmup_steps": 2},
        "sim": {"devices": 2, "tau_sweep": [0.1, 0.5, 1.0]},
        "io": {"out_dir": str(tmp_path / "out")},
    }
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def trained(tmp_path):
    config = write_config(tmp_path)
    assert main(["train", "--config", str(config)]) == 0
    return config, tmp_path / "out"


class TestConfigCheck:
    def test_valid_config_prints_normalized_form(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["config-check", "--config", str(config)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert set(printed) == {"model", "layer", "train", "sim", "io"}

    def test_round_trip_is_idempotent(self, tmp_path, capsys):
        config = write_config(tmp_path)
        main(["config-check", "--config", str(config)])
        first = capsys.readouterr().out
        reparsed = parse_run_config(json.loads(first))
        assert json.dumps(reparsed.to_dict(), indent=2, sort_keys=True) + "\n" == first

    def test_unknown_key_names_the_key(self, tmp_path, capsys):
        config = write_config(tmp_path, train={"momentum": 0.9})
        assert main(["config-check", "--config", str(config)]) == 2
        assert "train.momentum" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path, capsys):
        config = write_config(tmp_path)
        data = json.loads(config.read_text())
        data["cluster"] = {}
        config.write_text(json.dumps(data))
        assert main(["config-check", "--config", str(config)]) == 2
        assert "cluster" in capsys.readouterr().err


class TestTrain:
    def test_missing_corpus_exits_2_with_path(self, tmp_path, capsys):
        config = write_config(tmp_path, train={"corpus": str(tmp_path / "gone.txt")})
        assert main(["train", "--config", str(config)]) == 2
        assert "gone.txt" in capsys.readouterr().err

    def test_artifacts_written(self, trained):
        _, out = trained
        assert (out / "checkpoint.bin").exists()
        assert (out / "metrics.jsonl").exists()
        assert (out / "trace.jsonl").exists()
        lines = (out / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 6
        record = json.loads(lines[0])
        assert {"step", "lce", "lb", "drop_rate", "f"} <= set(record)

    def test_rerun_same_seed_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(config), "--out", str(out_a)]) == 0
        assert main(["train", "--config", str(config), "--out", str(out_b)]) == 0
        assert (out_a / "metrics.jsonl").read_bytes() == (out_b / "metrics.jsonl").read_bytes()
        assert (out_a / "trace.jsonl").read_bytes() == (out_b / "trace.jsonl").read_bytes()

    def test_divergence_exits_3(self, tmp_path, capsys):
        config = write_config(tmp_path, train={"lr": 1e8, "steps": 10})
        with np.errstate(all="ignore"):
            assert main(["train", "--config", str(config)]) == 3
        assert "numerical failure" in capsys.readouterr().err

    def test_seed_flag_changes_run(self, tmp_path):
        config = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(config), "--out", str(out_a)]) == 0
        assert main(["train", "--config", str(config), "--out", str(out_b),
                     "--seed", "5"]) == 0
        assert (out_a / "metrics.jsonl").read_bytes() != (out_b / "metrics.jsonl").read_bytes()


class TestEval:
    def test_eval_after_train(self, trained, capsys):
        config, out = trained
        assert main(["eval", "--config", str(config)]) == 0
        assert "perplexity" in capsys.readouterr().out
        assert (out / "eval.json").exists()

    def test_eval_without_checkpoint(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["eval", "--config", str(config)]) == 2
        assert "checkpoint" in capsys.readouterr().err


class TestSimulate:
    def test_simulate_trained_trace(self, trained, capsys):
        config, out = trained
        assert main(["simulate", "--config", str(config),
                     "--trace", str(out / "trace.jsonl")]) == 0
        report = (out / "cost_report.txt").read_text()
        # 0.75 * 3 / (0.75 * 3 + 3) = 0.428571...
        assert "formula ffn ratio=0.428571" in report
        sweep = (out / "tau_sweep.csv").read_text().strip().splitlines()
        assert len(sweep) == 1 + 3  # header + one row per requested tau

    def test_vanilla_config_reports_ratio_one(self, tmp_path):
        config = write_config(
            tmp_path,
            layer={"n_ffn": 4, "n_zero": 0, "n_copy": 0, "n_const": 0, "tau": 1.0,
                   "residuals_enabled": False},
        )
        assert main(["train", "--config", str(config)]) == 0
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(config),
                     "--trace", str(out / "trace.jsonl")]) == 0
        assert "formula ffn ratio=1.000000" in (out / "cost_report.txt").read_text()

    def test_published_shape_ratio(self, tmp_path):
        rows = None
        config = write_config(tmp_path, layer={"n_ffn": 8, "n_const": 2})
        assert main(["sweep-tau", "--config", str(config)]) == 0
        sweep_path = tmp_path / "out" / "tau_sweep.csv"
        rows = sweep_path.read_text().strip().splitlines()[1:]
        ratios = {float(r.split(",")[0]): float(r.split(",")[1]) for r in rows}
        assert ratios[1.0] == 8 / 12

    def test_trace_config_mismatch_exits_2(self, trained, capsys):
        config, out = trained
        bad = write_config(Path(str(out)), layer={"n_ffn": 7})
        assert main(["simulate", "--config", str(bad),
                     "--trace", str(out / "trace.jsonl")]) == 2
        assert "does not match" in capsys.readouterr().err


class TestAnalyze:
    def test_expert_load_csv_columns(self, trained):
        config, out = trained
        assert main(["analyze", "--trace", str(out / "trace.jsonl"),
                     "--analysis", "expert-load"]) == 0
        header = (out / "expert-load.csv").read_text().splitlines()[0]
        assert header.split(",")[1:] == [f"expert_{i}" for i in range(6)]

    def test_ffn_per_token_keyed_by_token_id(self, trained):
        config, out = trained
        assert main(["analyze", "--trace", str(out / "trace.jsonl"),
                     "--analysis", "ffn-per-token"]) == 0
        lines = (out / "ffn-per-token.csv").read_text().strip().splitlines()
        assert lines[0] == "token_id,mean_ffn_experts"
        assert len(lines) > 1

    def test_rerun_is_byte_identical(self, trained):
        config, out = trained
        args = ["analyze", "--trace", str(out / "trace.jsonl"),
                "--analysis", "expert-load"]
        assert main(args) == 0
        first = (out / "expert-load.csv").read_bytes()
        assert main(args) == 0
        assert (out / "expert-load.csv").read_bytes() == first

    def test_unknown_analysis_lists_valid_names(self, trained, capsys):
        config, out = trained
        assert main(["analyze", "--trace", str(out / "trace.jsonl"),
                     "--analysis", "entropy"]) == 2
        err = capsys.readouterr().err
        assert "expert-load" in err and "ffn-per-token" in err

    def test_missing_trace_exits_2(self, tmp_path, capsys):
        assert main(["analyze", "--trace", str(tmp_path / "none.jsonl"),
                     "--analysis", "expert-load"]) == 2


def test_trace_meta_matches_config(trained):
    config, out = trained
    meta, records = read_trace(out / "trace.jsonl")
    assert meta.n_experts == 6 and meta.n_ffn == 3 and meta.k == 2
    assert records
    assert all(len(r.selected) == 2 for r in records)
