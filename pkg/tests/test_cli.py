import csv
import json
import os

import pytest

from xrtd.cli import ConfigError, DEFAULT_CONFIG, load_config, main

TINY_OVERRIDES = {
    "seed": 1,
    "model": {"hidden_size": 16, "num_heads": 2, "gen_layers": 1,
              "disc_layers": 2, "ffn_size": 32, "max_rel_distance": 4},
    "optim": {"total_steps": 6, "warmup_steps": 2},
    "data": {"languages": [{"lang": "en", "kind": "base", "seed": 0},
                           {"lang": "pv", "kind": "permuted", "seed": 1}],
             "n_sentences": 40, "token_budget": 64, "checkpoint_every": 3},
    "eval": {"n_pairs": 5, "ot_iters": 50},
}


def write_config(tmp_path, overrides=None, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(overrides if overrides is not None
                               else TINY_OVERRIDES))
    return str(path)


class TestConfig:
    def test_defaults_when_no_file(self):
        assert load_config(None) == DEFAULT_CONFIG

    def test_merge_preserves_unset_defaults(self, tmp_path):
        path = write_config(tmp_path, {"optim": {"total_steps": 7}})
        config = load_config(path)
        assert config["optim"]["total_steps"] == 7
        assert config["optim"]["lr_peak"] == DEFAULT_CONFIG["optim"]["lr_peak"]

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = write_config(tmp_path, {"optimizer": {}})
        with pytest.raises(ConfigError, match="optimizer"):
            load_config(path)

    def test_unknown_nested_key_rejected_with_path(self, tmp_path):
        path = write_config(tmp_path, {"optim": {"lr": 1.0}})
        with pytest.raises(ConfigError, match="optim.lr"):
            load_config(path)


class TestSynth:
    def test_writes_expected_files_and_counts(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "corpus"
        assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["mono_en.txt", "mono_pv.txt", "parallel_en_pv.txt",
                         "run_config.json", "vocab.txt"]
        for mono in ("mono_en.txt", "mono_pv.txt"):
            lines = (out / mono).read_text().strip().split("\n")
            assert len(lines) == 40
        printed = capsys.readouterr().out.strip().split("\n")
        assert len(printed) == 4   # vocab + 2 mono + 1 parallel

    def test_three_languages_three_mono_two_parallel(self, tmp_path):
        overrides = json.loads(json.dumps(TINY_OVERRIDES))
        overrides["data"]["languages"].append(
            {"lang": "rv", "kind": "reversed", "seed": 2})
        cfg = write_config(tmp_path, overrides)
        out = tmp_path / "corpus3"
        assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"mono_en.txt", "mono_pv.txt", "mono_rv.txt"} <= names
        assert {"parallel_en_pv.txt", "parallel_en_rv.txt"} <= names

    def test_fixed_seed_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["synth", "--config", cfg, "--out", str(out1)])
        main(["synth", "--config", cfg, "--out", str(out2)])
        for name in ("vocab.txt", "mono_en.txt", "mono_pv.txt",
                     "parallel_en_pv.txt"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


class TestErrors:
    def test_bad_config_exits_two_with_parseable_line(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"nonsense": 1})
        code = main(["synth", "--config", cfg, "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err.strip()
        assert err.count("\n") == 0
        assert err.startswith("error code=ConfigError msg=")

    def test_missing_checkpoint_exits_two(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "error code=" in capsys.readouterr().err


class TestGradcheck:
    def test_passes_at_default_tolerance(self, capsys):
        code = main(["gradcheck", "--seed", "0", "--configs", "2"])
        out = capsys.readouterr().out
        assert code == 0
        assert "overall max_rel_err=" in out

    def test_unreachable_tolerance_fails(self, capsys):
        code = main(["gradcheck", "--seed", "0", "--configs", "1",
                     "--tolerance", "0"])
        assert code == 1


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli_run")
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["pretrain", "--config", cfg, "--out", str(out)]) == 0
    return tmp_path, cfg, out


class TestPretrainEval:
    def test_metrics_rows_match_total_steps(self, run_dir):
        _, _, out = run_dir
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) - 1 == TINY_OVERRIDES["optim"]["total_steps"]

    def test_config_copy_written(self, run_dir):
        _, _, out = run_dir
        config = json.loads((out / "run_config.json").read_text())
        assert config["optim"]["total_steps"] == 6

    def test_resume_reproduces_metrics_tail(self, run_dir, tmp_path):
        base, cfg, out = run_dir
        resumed = tmp_path / "resumed"
        code = main(["pretrain", "--config", cfg, "--out", str(resumed),
                     "--resume", str(out / "ckpt_3")])
        assert code == 0
        with open(out / "metrics.csv") as fh:
            full = list(csv.reader(fh))[1:]
        with open(resumed / "metrics.csv") as fh:
            tail = list(csv.reader(fh))[1:]
        assert tail == full[3:]

    def test_no_trtd_zeroes_pair_losses(self, run_dir, tmp_path):
        base, cfg, _ = run_dir
        out = tmp_path / "ablated"
        assert main(["pretrain", "--config", cfg, "--out", str(out),
                     "--no-trtd"]) == 0
        with open(out / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(float(r["loss_tlm"]) == 0.0 and float(r["loss_trtd"]) == 0.0
                   for r in rows)
        assert all(float(r["loss_mlm"]) > 0.0 for r in rows)

    def test_eval_writes_reports(self, run_dir, tmp_path, capsys):
        base, cfg, out = run_dir
        eval_out = tmp_path / "eval"
        code = main(["eval", "--config", cfg,
                     "--checkpoint", str(out / "ckpt_final"),
                     "--out", str(eval_out)])
        assert code == 0
        with open(eval_out / "retrieval.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["direction"] for r in rows} == {"en->xx", "xx->en"}
        with open(eval_out / "layer_sweep_retrieval.csv") as fh:
            sweep = list(csv.DictReader(fh))
        # disc_layers=2 -> layers 0..2 for the single non-base language
        assert [int(r["layer"]) for r in sweep] == [0, 1, 2]
        with open(eval_out / "layer_sweep_aer.csv") as fh:
            aer_rows = list(csv.DictReader(fh))
        assert all(0.0 <= float(r["aer"]) <= 1.0 for r in aer_rows)
