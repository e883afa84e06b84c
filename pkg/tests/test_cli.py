"""CLI subcommands, config merging, exit codes, token-stream format."""

import json

import numpy as np
import pytest

from longssm.cli import DEFAULTS, build_parser, main
from longssm.channels import THETA_GRID
from longssm.tokens import TokenStreamError, read_tokens, write_tokens


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "synth"
    rc = main([
        "synth", "--out", str(out), "--seed", "7",
        "--vocab-size", "48", "--d-model", "12", "--d-inner", "16",
        "--d-state", "2", "--n-layers", "1", "--train-length", "96",
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def streams(tmp_path_factory, model_dir):
    d = tmp_path_factory.mktemp("streams")
    paths = []
    for i in range(3):
        ids = np.random.default_rng(200 + i).integers(0, 48, 96)
        paths.append(str(write_tokens(d / f"s{i}.tokens", ids)))
    return paths


class TestTokenStreams:
    def test_round_trip(self, tmp_path):
        ids = np.array([0, 1, 2**31, 7], dtype=np.uint32)
        path = write_tokens(tmp_path / "t.tokens", ids)
        np.testing.assert_array_equal(read_tokens(path), ids)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.tokens"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(TokenStreamError, match="magic"):
            read_tokens(p)

    def test_truncated_rejected(self, tmp_path):
        p = write_tokens(tmp_path / "t.tokens", np.arange(8))
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(TokenStreamError, match="bytes"):
            read_tokens(p)


class TestParserAndConfig:
    def test_help_lists_every_documented_flag(self, capsys):
        for cmd, flags in {
            "analyze": ["--model", "--tokens", "--layer", "--channels", "--epsilon", "--out"],
            "classify": ["--model", "--theta", "--sweep"],
            "calibrate": ["--clamp-percent", "--interval", "--s-max"],
            "eval-ppl": ["--mode", "--table", "--lengths", "--format"],
            "generate": ["--n-new", "--seed"],
        }.items():
            with pytest.raises(SystemExit):
                build_parser().parse_args([cmd, "--help"])
            text = capsys.readouterr().out
            for flag in flags:
                assert flag in text, (cmd, flag)

    def test_flags_override_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"theta": 0.1, "seed": 3}))
        args = build_parser().parse_args(["classify", "--config", str(cfg), "--theta", "0.5"])
        from longssm.cli import resolve_config

        merged = resolve_config(args)
        assert merged["theta"] == 0.5   # flag wins
        assert merged["seed"] == 3      # file fills the gap
        assert merged["clamp_percent"] == DEFAULTS["clamp_percent"]

    def test_unknown_config_key_is_config_error(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_flag": 1}))
        assert main(["classify", "--config", str(cfg)]) == 2


class TestSynthCommand:
    def test_same_seed_identical_directories(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["synth", "--out", str(out), "--seed", "11",
                         "--d-inner", "8", "--d-model", "8", "--vocab-size", "32",
                         "--train-length", "64"]) == 0
            outs.append(out)
        for fname in ("manifest.json", "weights.bin", "planted.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_planted_json_lists_global_channels(self, model_dir):
        planted = json.loads((model_dir / "planted.json").read_text())
        assert len(planted["planted_global"]) == 1
        assert len(planted["planted_global"][0]) == 4  # 25% of 16


class TestAnalyzeCommand:
    def test_outputs_one_map_per_channel(self, tmp_path, model_dir, streams):
        out = tmp_path / "analysis"
        rc = main(["analyze", "--model", str(model_dir), "--tokens", streams[0],
                   "--channels", "0,3,5", "--out", str(out)])
        assert rc == 0
        maps = sorted(p.name for p in out.glob("attention_layer0_ch*.csv"))
        assert maps == [
            "attention_layer0_ch0.csv", "attention_layer0_ch3.csv", "attention_layer0_ch5.csv",
        ]
        assert (out / "decay_layer0.csv").exists()
        assert (out / "receptive_field_layer0.csv").exists()

    def test_default_epsilon_is_1e_minus_3(self):
        assert DEFAULTS["epsilon"] == 1e-3

    def test_empty_channel_selector_means_all(self, tmp_path, model_dir, streams):
        out = tmp_path / "all"
        assert main(["analyze", "--model", str(model_dir), "--tokens", streams[0],
                     "--out", str(out)]) == 0
        assert len(list(out.glob("attention_layer0_ch*.csv"))) == 16

    def test_out_of_range_channel_is_config_error(self, tmp_path, model_dir, streams):
        assert main(["analyze", "--model", str(model_dir), "--tokens", streams[0],
                     "--channels", "99", "--out", str(tmp_path)]) == 2


class TestClassifyCommand:
    def test_reports_and_determinism(self, tmp_path, model_dir, streams):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            rc = main(["classify", "--model", str(model_dir), "--tokens", *streams,
                       "--out", str(out), "--sweep"])
            assert rc == 0
            outs.append(out)
        assert (outs[0] / "classification.json").read_bytes() == (outs[1] / "classification.json").read_bytes()
        doc = json.loads((outs[0] / "classification.json").read_text())
        assert [s["theta"] for s in doc["sweep"]] == list(THETA_GRID)
        csv_lines = (outs[0] / "classification.csv").read_text().splitlines()
        assert csv_lines[1] == "layer,n_global,n_local"
        layer, n_global, n_local = csv_lines[2].split(",")
        assert int(n_global) + int(n_local) == 16
        assert doc["layers"][0]["n_global"] == int(n_global)

    def test_nonpositive_theta_rejected(self, model_dir, streams, tmp_path):
        assert main(["classify", "--model", str(model_dir), "--tokens", *streams,
                     "--theta", "0", "--out", str(tmp_path)]) == 2


class TestCalibrateCommand:
    def test_writes_table_with_provenance(self, tmp_path, model_dir, streams):
        out = tmp_path / "cal"
        rc = main(["calibrate", "--model", str(model_dir), "--tokens", *streams,
                   "--s-max", "3000", "--out", str(out)])
        assert rc == 0
        doc = json.loads((out / "threshold_table.json").read_text())
        assert doc["interval"] == 1000
        assert doc["clamp_percent"] == 5.0
        assert doc["provenance"]["theta"] == 5e-2
        assert len(doc["provenance"]["stream_hashes"]) == 3
        for layer in doc["layers"]:
            for ch in layer["channels"]:
                assert [s for s, _ in ch["entries"]] == [1000, 2000, 3000]

    def test_short_stream_is_data_error(self, tmp_path, model_dir):
        short = write_tokens(tmp_path / "short.tokens", np.zeros(10, dtype=np.uint32))
        assert main(["calibrate", "--model", str(model_dir), "--tokens", str(short),
                     "--out", str(tmp_path)]) == 3

    def test_defaults_match_documented_constants(self):
        assert DEFAULTS["clamp_percent"] == 5.0
        assert DEFAULTS["interval"] == 1000
        assert DEFAULTS["theta"] == 5e-2


class TestEvalCommands:
    def test_longmamba_without_table_is_config_error(self, tmp_path, model_dir, streams):
        assert main(["eval-ppl", "--model", str(model_dir), "--tokens", streams[0],
                     "--mode", "longmamba", "--lengths", "16",
                     "--out", str(tmp_path)]) == 2

    def test_vanilla_ppl_report(self, tmp_path, model_dir, streams):
        out = tmp_path / "ppl"
        rc = main(["eval-ppl", "--model", str(model_dir), "--tokens", streams[0],
                   "--lengths", "16,32", "--out", str(out)])
        assert rc == 0
        text = (out / "perplexity.csv").read_text()
        assert "perplexity" in text and text.startswith("#")

    def test_longmamba_ppl_runs_with_table(self, tmp_path, model_dir, streams):
        cal = tmp_path / "cal"
        assert main(["calibrate", "--model", str(model_dir), "--tokens", *streams,
                     "--s-max", "2000", "--out", str(cal)]) == 0
        out = tmp_path / "ppl"
        rc = main(["eval-ppl", "--model", str(model_dir), "--tokens", streams[0],
                   "--mode", "longmamba", "--table", str(cal / "threshold_table.json"),
                   "--lengths", "16", "--out", str(out), "--format", "json"])
        assert rc == 0
        doc = json.loads((out / "perplexity.json").read_text())
        assert doc["mode"] == "longmamba"

    def test_passkey_eval_runs(self, tmp_path, model_dir):
        out = tmp_path / "pk"
        rc = main(["eval-passkey", "--model", str(model_dir), "--lengths", "48",
                   "--n-instances", "3", "--key-length", "2", "--out", str(out)])
        assert rc == 0
        assert (out / "passkey_48.csv").exists()


class TestGenerateCommand:
    def test_zero_new_tokens_echoes_prompt(self, tmp_path, model_dir, capsys):
        prompt = write_tokens(tmp_path / "p.tokens", np.array([1, 2, 3], dtype=np.uint32))
        rc = main(["generate", "--model", str(model_dir), "--tokens", str(prompt),
                   "--n-new", "0"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "1 2 3"

    def test_writes_token_stream(self, tmp_path, model_dir):
        prompt = write_tokens(tmp_path / "p.tokens", np.array([4, 5], dtype=np.uint32))
        out = tmp_path / "gen.tokens"
        rc = main(["generate", "--model", str(model_dir), "--tokens", str(prompt),
                   "--n-new", "4", "--out", str(out)])
        assert rc == 0
        ids = read_tokens(out)
        assert len(ids) == 6
        np.testing.assert_array_equal(ids[:2], [4, 5])


class TestExitCodes:
    def test_missing_model_is_data_error(self, tmp_path, streams):
        assert main(["classify", "--model", str(tmp_path / "nope"),
                     "--tokens", streams[0], "--out", str(tmp_path)]) == 3

    def test_missing_required_flag_is_config_error(self, tmp_path):
        assert main(["classify", "--out", str(tmp_path)]) == 2
