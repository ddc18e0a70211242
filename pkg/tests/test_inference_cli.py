import math

import numpy as np
import pytest

from latent_sr import cli, training
from latent_sr.checkpoint import save_checkpoint
from latent_sr.data import load_image, save_image
from latent_sr.errors import ShapeError
from latent_sr.inference import InferenceRequest, SuperResolver, infer, psnr
from latent_sr.training import LatentSR, make_manifest

from conftest import DATA_DIR, tiny_config

pytestmark = pytest.mark.filterwarnings("ignore:.*smaller than the 70px patch")


@pytest.fixture(scope="module")
def stage2_ckpt(tmp_path_factory):
    cfg = tiny_config(2)
    model = LatentSR(cfg)
    path = tmp_path_factory.mktemp("ckpt") / "stage2.ckpt"
    save_checkpoint(path, make_manifest(model, cfg, 2))
    return path


@pytest.fixture(scope="module")
def resolver(stage2_ckpt):
    return SuperResolver.from_file(stage2_ckpt)


def test_psnr_examples():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)
    # 20 * log10(255 / 16) evaluates to 24.04840
    expected = 20 * math.log10(255 / 16)
    assert expected == pytest.approx(24.0484, abs=1e-4)
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 16 / 255)) == pytest.approx(expected, abs=1e-9)
    b = np.random.default_rng(1).random((8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ShapeError):
        psnr(a, a[:4])


@pytest.mark.parametrize("size, scale, out", [(128, 4.0, 512), (48, 2.6, 120), (16, 1.0, 16)])
def test_output_size_rule(size, scale, out):
    assert InferenceRequest(np.zeros((size, size, 3)), scale).output_size == (out, out)


def test_infer_shape_range_and_determinism(resolver):
    lr = np.random.default_rng(0).random((48, 48, 3)).astype(np.float32)
    a = infer(InferenceRequest(lr, 2.6, seed=3), resolver)
    b = infer(InferenceRequest(lr, 2.6, seed=3), resolver)
    assert a.shape == (120, 120, 3)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_infer_counts_calls(resolver):
    lr = np.random.default_rng(0).random((16, 24, 3)).astype(np.float32)
    resolver.model.denoiser.calls = 0
    resolver.model.decoder.calls = 0
    out = resolver(lr, 3.0)
    assert out.shape == (48, 72, 3)
    assert resolver.model.denoiser.calls == 4
    assert resolver.model.decoder.calls == 1


def test_infer_extrapolation_warns(resolver):
    with pytest.warns(UserWarning, match="outside"):
        out = resolver(np.full((8, 8, 3), 0.5, np.float32), 10.0)
    assert out.shape == (80, 80, 3)


def test_infer_rejects_bad_input(resolver):
    with pytest.raises(ValueError):
        resolver(np.full((8, 8, 3), 2.0, np.float32), 2.0)


def test_cli_eval_identical_folders(tmp_path, capsys):
    assert cli.main(["eval", "--pred", str(DATA_DIR), "--gt", str(DATA_DIR)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    for line in lines:
        name, value = line.split("\t")
        assert float(value) == 100.0


def test_cli_degrade_infer_eval(tmp_path, stage2_ckpt, capsys):
    src = tmp_path / "src"
    save_image(load_image(DATA_DIR / "coffee.png")[:40, :44], src / "coffee.png")
    assert cli.main(["degrade", "--in", str(src), "--out", str(tmp_path / "pairs"), "--scale", "2.5"]) == 0
    lr = load_image(tmp_path / "pairs" / "lr" / "coffee.png")
    hr = load_image(tmp_path / "pairs" / "hr" / "coffee.png")
    assert lr.shape == (16, 17, 3) and hr.shape == (40, 40, 3)
    code = cli.main(["infer", "--ckpt", str(stage2_ckpt), "--in", str(tmp_path / "pairs" / "lr"),
                     "--scale", "2.5", "--seed", "1", "--out", str(tmp_path / "sr")])
    assert code == 0
    assert load_image(tmp_path / "sr" / "coffee.png").shape == hr.shape
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(tmp_path / "sr"), "--gt", str(tmp_path / "pairs" / "hr")]) == 0
    name, value = capsys.readouterr().out.splitlines()[0].split("\t")
    assert name == "coffee.png" and math.isfinite(float(value))


def test_cli_train_round_trip(tmp_path, capsys):
    log = tmp_path / "s1.log"
    common = (f"data_dir = {DATA_DIR}\nsplit_file = {DATA_DIR / 'train.txt'}\nepochs = 1\niters_per_epoch = 2\n"
              "batch_size = 1\nlr_patch = 8\nfixed_scale = 2\n"
              "model.enc_channels = 8\nmodel.prior_channels = 8\nmodel.sr_channels = 8\nmodel.imdb_per_fru = 1\n"
              "model.csum_channels = 4\nmodel.csum_hidden = 16\nmodel.modulation_hidden = 8\n"
              "model.cond_channels = 8\nmodel.unet_channels = 8\nmodel.embed_dim = 16\nmodel.disc_channels = 8\n")
    (tmp_path / "s1.cfg").write_text(f"stage = 1\n{common}out = {tmp_path / 's1.ckpt'}\nlog_file = {log}\n")
    (tmp_path / "s2.cfg").write_text(f"stage = 2\n{common}lr_patch = 32\nout = {tmp_path / 's2.ckpt'}\n")
    assert cli.main(["train-stage1", "--config", str(tmp_path / "s1.cfg")]) == 0
    assert len(log.read_text().splitlines()) == 2
    assert cli.main(["train-stage1", "--config", str(tmp_path / "s1.cfg"),
                     "--resume", str(tmp_path / "s1.ckpt")]) == 0
    assert len(log.read_text().splitlines()) == 2
    assert cli.main(["train-stage2", "--config", str(tmp_path / "s2.cfg"),
                     "--stage1", str(tmp_path / "s1.ckpt")]) == 0
    assert (tmp_path / "s2.ckpt").exists()
    # a stage-1 checkpoint cannot serve inference
    code = cli.main(["infer", "--ckpt", str(tmp_path / "s1.ckpt"), "--in", str(DATA_DIR / "coffee.png"),
                     "--scale", "2", "--seed", "0", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "denoiser" in capsys.readouterr().err


def test_cli_exit_codes(tmp_path, stage2_ckpt):
    with pytest.raises(SystemExit) as info:
        cli.main(["infer", "--ckpt", str(stage2_ckpt)])
    assert info.value.code == 2
    assert cli.main(["eval", "--pred", str(tmp_path / "none"), "--gt", str(tmp_path / "none")]) == 2
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    code = cli.main(["infer", "--ckpt", str(tmp_path / "bad.ckpt"), "--in", str(DATA_DIR / "coffee.png"),
                     "--scale", "2", "--seed", "0", "--out", str(tmp_path / "o")])
    assert code == 3


def test_cli_numerical_failure_exit_code(tmp_path, monkeypatch):
    cfg_text = (f"stage = 1\ndata_dir = {DATA_DIR}\nepochs = 1\niters_per_epoch = 1\nbatch_size = 1\nlr_patch = 8\n"
                "fixed_scale = 2\nmodel.enc_channels = 8\nmodel.prior_channels = 8\nmodel.sr_channels = 8\n"
                "model.imdb_per_fru = 1\nmodel.csum_hidden = 16\nmodel.disc_channels = 8\n"
                f"out = {tmp_path / 's1.ckpt'}\n")
    (tmp_path / "nan.cfg").write_text(cfg_text)
    original = training.stage1_loss

    def poisoned(*args, **kwargs):
        report = original(*args, **kwargs)
        report.total = report.total * float("nan")
        return report

    monkeypatch.setattr(training, "stage1_loss", poisoned)
    assert cli.main(["train-stage1", "--config", str(tmp_path / "nan.cfg")]) == 4
    assert (tmp_path / "nan_batch_step0.npz").exists()
