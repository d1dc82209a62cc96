import csv
import json
import re

import pytest
import yaml

from vibra_sr.cli import run
from vibra_sr.datasets import speaker_spec, synth_speech
from vibra_sr.dsp import decimate, write_wav
from vibra_sr.model import HybridUNet, ModelConfig
from vibra_sr.training import save_checkpoint

ERROR_LINE = re.compile(r'^error code=(\d) kind=\w+ message=".*"$')


@pytest.fixture
def clip(tmp_path):
    return write_wav(tmp_path / "clip.wav", synth_speech(speaker_spec(0, 0, 2.0, 0)))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_evaluate_identical(clip, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run(["evaluate", str(clip), str(clip), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "snr_db=+inf" in text and "lsd=0.000000" in text
    rows = json.loads((out / "metrics.json").read_text())
    assert rows[0]["lsd"] == 0 and rows[0]["snr_db"] == "+inf"
    assert (out / "resolved_config.yaml").exists()


def test_ablate_ordering(tmp_path, capsys):
    out = tmp_path / "ab"
    code = run(["ablate", "--variants", "full,remove_safilm,replace_mamba_with_attention", "--out", str(out)])
    assert code == 0
    counts = {r["variant"]: int(r["parameters"]) for r in read_csv(out / "ablation.csv")}
    assert counts["remove_safilm"] < counts["full"] < counts["replace_mamba_with_attention"]
    assert "full" in capsys.readouterr().out


def test_budget_rate_4000(tmp_path, capsys):
    out = tmp_path / "b"
    assert run(["budget", "--rate", "4000", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "64 kbps" in text and "101.9%" in text
    rep = json.loads((out / "budget.json").read_text())
    assert rep["operating_data_rate_kbps"] == 64


def test_plots_on_empty_dir_exits_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run(["plots", str(tmp_path / "empty")]) == 2
    err = capsys.readouterr().err.strip()
    assert ERROR_LINE.match(err) and err.count("\n") == 0


def test_unknown_override_exits_2(tmp_path, capsys):
    assert run(["ablate", "--set", "model.bogus=1", "--out", str(tmp_path)]) == 2
    assert ERROR_LINE.match(capsys.readouterr().err.strip())
    assert run(["ablate", "--set", "nonsense", "--out", str(tmp_path)]) == 2


def test_bad_config_file_exits_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("optimizer: {lr: 1}\n")
    assert run(["budget", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav")
    assert run(["evaluate", str(bad), str(bad), "--out", str(tmp_path / "o")]) == 1
    assert ERROR_LINE.match(capsys.readouterr().err.strip())


def test_sweep_four_rows(clip, tmp_path):
    out = tmp_path / "sw"
    assert run(["sweep", str(clip), "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [int(r["sample_rate_hz"]) for r in rows] == [500, 1000, 2000, 4000]
    kbps = [float(r["data_rate_kbps"]) for r in rows]
    assert kbps == sorted(kbps)
    assert run(["plots", str(out)]) == 0


def test_prepare_pretrain_plots_finetune_enhance(tmp_path):
    data, run_dir = tmp_path / "data", tmp_path / "run"
    assert run(["prepare", "--speakers", "2", "--clips", "1", "--duration", "1.0",
                "--unpaired", "--out", str(data)]) == 0
    tiny = ["--set", "model.down_filters=[4,8,16]", "--set", "model.up_filters=[32,16,4]",
            "--set", "model.down_kernels=[5,3,3]", "--set", "model.up_kernels=[3,3,5]",
            "--set", "safilm_blocks=2", "--set", "safilm_layers=1", "--set", "ssm_state_dim=2",
            "--set", "ssm_expand=1", "--set", "ssm_conv_kernel=2", "--set", "ssm_layers=1"]
    assert run(["pretrain", "--manifest", str(data / "manifest.csv"), "--set", "train.epochs=2",
                "--set", "batch_size=2", "--seed", "1", "--out", str(run_dir), *tiny]) == 0
    snap = yaml.safe_load((run_dir / "resolved_config.yaml").read_text())
    assert snap["train"]["seed"] == 1 and snap["model"]["safilm_blocks"] == 2
    assert run(["plots", str(run_dir)]) == 0
    assert len(read_csv(run_dir / "loss_curve.csv")) == 2

    paired = tmp_path / "paired"
    assert run(["prepare", "--speakers", "2", "--clips", "1", "--duration", "1.0", "--out", str(paired)]) == 0
    ft = tmp_path / "ft"
    assert run(["finetune", "--checkpoint", str(run_dir / "best.pt"), "--manifest",
                str(paired / "manifest.csv"), "--set", "epochs=1", "--out", str(ft)]) == 0
    # mismatched architecture is a configuration error
    assert run(["finetune", "--checkpoint", str(run_dir / "best.pt"), "--manifest",
                str(paired / "manifest.csv"), "--set", "safilm_blocks=4", "--out", str(ft)]) == 2

    low = tmp_path / "low.wav"
    write_wav(low, decimate(synth_speech(speaker_spec(0, 0, 1.0, 0)), 4))
    enh = tmp_path / "enh"
    assert run(["enhance", "--checkpoint", str(ft / "last.pt"), str(low), "--out", str(enh)]) == 0
    assert (enh / "low_enhanced.wav").exists()


def test_enhance_is_reproducible(tmp_path):
    ckpt = save_checkpoint(tmp_path / "m.pt", HybridUNet(ModelConfig.tiny()))
    low = write_wav(tmp_path / "low.wav", decimate(synth_speech(speaker_spec(1, 0, 1.0, 0)), 4))
    outs = []
    for k in range(2):
        assert run(["enhance", "--checkpoint", str(ckpt), str(low), "--out", str(tmp_path / f"e{k}")]) == 0
        outs.append((tmp_path / f"e{k}" / "low_enhanced.wav").read_bytes())
    assert outs[0] == outs[1]
