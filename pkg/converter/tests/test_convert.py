"""Converter unit tests: fixture round-trips, transforms, rejection, verify."""

import numpy as np
import pytest
import torch

from longssm import load_model
from longssm_converter import CheckpointError, convert, verify


def make_fixture_state_dict(vocab=32, d_m=8, d_e=16, d_s=4, dt_rank=2, k=4,
                            n_layers=1, seed=0, dtype=torch.float32, tied=True):
    """Raw Mamba-1 state dict in the original naming (singular 'embedding')."""
    gen = torch.Generator().manual_seed(seed)

    def t(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float32).to(dtype)

    sd = {
        "backbone.embedding.weight": t(vocab, d_m),
        "backbone.norm_f.weight": torch.ones(d_m, dtype=dtype),
    }
    for i in range(n_layers):
        p = f"backbone.layers.{i}."
        sd[p + "norm.weight"] = torch.ones(d_m, dtype=dtype)
        sd[p + "mixer.in_proj.weight"] = t(2 * d_e, d_m)
        sd[p + "mixer.conv1d.weight"] = t(d_e, 1, k)
        sd[p + "mixer.conv1d.bias"] = t(d_e)
        sd[p + "mixer.x_proj.weight"] = t(dt_rank + 2 * d_s, d_e)
        sd[p + "mixer.dt_proj.weight"] = t(d_e, dt_rank)
        sd[p + "mixer.dt_proj.bias"] = t(d_e)
        sd[p + "mixer.A_log"] = torch.log(torch.rand(d_e, d_s, generator=gen) * 4 + 0.5).to(dtype)
        sd[p + "mixer.D"] = t(d_e)
        sd[p + "mixer.out_proj.weight"] = t(d_m, d_e)
    if not tied:
        sd["lm_head.weight"] = t(vocab, d_m)
    return sd


@pytest.fixture()
def fixture_ckpt(tmp_path):
    path = tmp_path / "fixture.pt"
    torch.save(make_fixture_state_dict(), path)
    return path


class TestConvert:
    def test_manifest_passes_primary_validation(self, fixture_ckpt, tmp_path):
        report = convert(fixture_ckpt, tmp_path / "m", train_length=64)
        bundle = load_model(report.out_dir)
        assert bundle.config.d_inner == 16
        assert bundle.config.d_state == 4
        assert bundle.config.dt_rank == 2
        assert bundle.config.train_length == 64
        assert bundle.config.tied_embeddings

    def test_decay_matrix_strictly_negative(self, fixture_ckpt, tmp_path):
        convert(fixture_ckpt, tmp_path / "m")
        bundle = load_model(tmp_path / "m")
        assert np.all(bundle.layers[0].a < 0)

    def test_values_round_trip_exactly_after_transforms(self, fixture_ckpt, tmp_path):
        convert(fixture_ckpt, tmp_path / "m")
        bundle = load_model(tmp_path / "m")
        sd = {k: v.numpy() for k, v in torch.load(fixture_ckpt, weights_only=True).items()}
        lw = bundle.layers[0]
        p = "backbone.layers.0.mixer."

        np.testing.assert_array_equal(bundle.embedding, sd["backbone.embedding.weight"])
        np.testing.assert_array_equal(lw.in_proj, sd[p + "in_proj.weight"][:16])
        np.testing.assert_array_equal(lw.gate_proj, sd[p + "in_proj.weight"][16:])
        np.testing.assert_array_equal(lw.delta_down, sd[p + "x_proj.weight"][:2])
        np.testing.assert_array_equal(lw.bc_proj, sd[p + "x_proj.weight"][2:])
        np.testing.assert_array_equal(lw.conv_weight, sd[p + "conv1d.weight"][:, 0, :])
        np.testing.assert_array_equal(lw.a, (-np.exp(sd[p + "A_log"])).T)
        np.testing.assert_array_equal(lw.d, sd[p + "D"])

    def test_idempotent_byte_output(self, fixture_ckpt, tmp_path):
        convert(fixture_ckpt, tmp_path / "m")
        first = {f.name: f.read_bytes() for f in (tmp_path / "m").iterdir()}
        convert(fixture_ckpt, tmp_path / "m")
        second = {f.name: f.read_bytes() for f in (tmp_path / "m").iterdir()}
        assert first == second

    def test_half_precision_upcast(self, tmp_path):
        path = tmp_path / "half.pt"
        torch.save(make_fixture_state_dict(dtype=torch.float16), path)
        report = convert(path, tmp_path / "m")
        bundle = load_model(report.out_dir)
        assert bundle.embedding.dtype == np.float32
        assert (tmp_path / "m" / "weights.bin").stat().st_size == sum(
            4 * int(np.prod(s)) for s in report.shapes.values()
        )

    def test_untied_head_kept(self, tmp_path):
        path = tmp_path / "untied.pt"
        torch.save(make_fixture_state_dict(tied=False), path)
        bundle = load_model(convert(path, tmp_path / "m").out_dir)
        assert not bundle.config.tied_embeddings
        assert bundle.lm_head is not bundle.embedding

    def test_unrecognized_layout_rejected(self, tmp_path):
        sd = make_fixture_state_dict()
        sd["backbone.layers.0.mixer.dt_bias"] = torch.zeros(4)  # not a Mamba-1 key
        path = tmp_path / "odd.pt"
        torch.save(sd, path)
        with pytest.raises(CheckpointError, match="unrecognized"):
            convert(path, tmp_path / "m")

    def test_missing_tensor_rejected(self, tmp_path):
        sd = make_fixture_state_dict()
        del sd["backbone.layers.0.mixer.D"]
        path = tmp_path / "missing.pt"
        torch.save(sd, path)
        with pytest.raises(CheckpointError, match="missing"):
            convert(path, tmp_path / "m")

    def test_nonfinite_tensor_rejected(self, tmp_path):
        sd = make_fixture_state_dict()
        sd["backbone.layers.0.mixer.D"][0] = float("nan")
        path = tmp_path / "nan.pt"
        torch.save(sd, path)
        with pytest.raises(CheckpointError, match="non-finite"):
            convert(path, tmp_path / "m")


class TestVerify:
    def test_self_check_deviation_zero(self, fixture_ckpt, tmp_path):
        convert(fixture_ckpt, tmp_path / "m", train_length=64)
        report = verify(tmp_path / "m", tmp_path / "m", n_tokens=16)
        assert report["status"] == "compared"
        assert report["max_abs_deviation"] == 0.0

    def test_perturbed_weights_flagged(self, fixture_ckpt, tmp_path):
        convert(fixture_ckpt, tmp_path / "m", train_length=64)
        convert(fixture_ckpt, tmp_path / "m2", train_length=64)
        blob = bytearray((tmp_path / "m2" / "weights.bin").read_bytes())
        blob[: 4 * 8] = np.full(8, 0.25, dtype="<f4").tobytes()
        (tmp_path / "m2" / "weights.bin").write_bytes(bytes(blob))
        report = verify(tmp_path / "m", tmp_path / "m2", n_tokens=16)
        assert report["status"] == "compared"
        assert report["max_abs_deviation"] > 0.0

    def test_unavailable_reference_skips(self, fixture_ckpt, tmp_path):
        convert(fixture_ckpt, tmp_path / "m")
        report = verify(tmp_path / "m", fixture_ckpt, n_tokens=8)
        assert report["status"] == "skipped"
        assert "notice" in report


@pytest.fixture(scope="module")
def hf_dir(tmp_path_factory):
    transformers = pytest.importorskip("transformers")
    path = tmp_path_factory.mktemp("hf") / "tiny-mamba"
    config = transformers.MambaConfig(
        vocab_size=48, hidden_size=16, state_size=4, num_hidden_layers=2,
        intermediate_size=32, time_step_rank=2, conv_kernel=4, use_cache=False,
    )
    model = transformers.MambaForCausalLM(config)
    model.eval()
    model.save_pretrained(str(path))
    return path


class TestHuggingFaceBridge:
    def test_convert_hf_directory(self, hf_dir, tmp_path):
        report = convert(hf_dir, tmp_path / "m", train_length=128)
        bundle = load_model(report.out_dir)
        assert bundle.config.n_layers == 2
        assert bundle.config.vocab_size == 48
        assert np.all(bundle.layers[0].a < 0)

    def test_logits_parity_with_reference_forward(self, hf_dir, tmp_path):
        convert(hf_dir, tmp_path / "m", train_length=128)
        report = verify(tmp_path / "m", hf_dir, n_tokens=24)
        assert report["status"] == "compared"
        assert report["max_abs_deviation"] < 1e-3


class TestCli:
    def test_convert_and_verify_commands(self, fixture_ckpt, tmp_path, capsys):
        from longssm_converter.cli import main

        out = tmp_path / "m"
        assert main(["convert", "--in", str(fixture_ckpt), "--out", str(out),
                     "--train-length", "64"]) == 0
        assert "manifest" in capsys.readouterr().out
        assert main(["verify", "--manifest", str(out), "--in", str(out),
                     "--tokens", "8"]) == 0
        assert '"compared"' in capsys.readouterr().out

    def test_skipped_reference_exits_zero(self, fixture_ckpt, tmp_path, capsys):
        from longssm_converter.cli import main

        out = tmp_path / "m"
        assert main(["convert", "--in", str(fixture_ckpt), "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["verify", "--manifest", str(out), "--in", str(fixture_ckpt)]) == 0
        assert '"skipped"' in capsys.readouterr().out

    def test_bad_checkpoint_exits_nonzero(self, tmp_path):
        from longssm_converter.cli import main

        assert main(["convert", "--in", str(tmp_path / "none.pt"),
                     "--out", str(tmp_path / "m")]) == 3
