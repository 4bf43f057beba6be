import json

import pytest

from repre.pipeline.cli import main, smoothed
from repre.pipeline.train import read_metrics


@pytest.fixture
def config_file(tiny, tmp_path):
    path = tmp_path / "tiny.cfg"
    tiny(out_dir=str(tmp_path / "run"), steps=2, dataset_size=32).save(path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_pretrain_probe_dump(config_file, tmp_path, capsys):
    code, out = run(capsys, "pretrain", "--config", config_file, "--steps", 3)
    assert code == 0 and json.loads(out)["steps"] == 3
    assert len(read_metrics(tmp_path / "run" / "metrics.jsonl")) == 3
    ckpt = tmp_path / "run" / "checkpoint.bin"

    code, out = run(capsys, "probe", "--checkpoint", ckpt, "--data", "synthetic", "--steps", 5, "--baseline")
    res = json.loads(out)
    assert code == 0 and res["num_classes"] == 4
    assert {"test_accuracy", "random_init_test_accuracy", "encoder_sha256"} <= set(res)

    code, out = run(capsys, "dump", "--checkpoint", ckpt, "--out", tmp_path / "dump", "--examples", 2)
    assert code == 0 and json.loads(out) == {"attention": 4, "reconstruction": 2, "embeddings": 1}


def test_ablate_taps(config_file, tmp_path, capsys):
    code, out = run(capsys, "ablate", "--axis", "taps", "--config", config_file, "--steps", 2,
                    "--out", tmp_path / "abl")
    assert code == 0
    summary = json.loads((tmp_path / "abl" / "summary.json").read_text())
    assert json.loads(out) == summary
    runs = summary["runs"]
    assert set(runs) == {"single", "multi"}
    for label in runs:
        assert len(read_metrics(tmp_path / "abl" / label / "metrics.jsonl")) == 2
        assert set(runs[label]) >= {"final_combined", "final_psnr", "param_ratio", "decoder_params"}


def test_gradcheck_subcommand(capsys):
    code, out = run(capsys, "gradcheck", "--instances", 2)
    assert code == 0
    assert out.strip().splitlines()[-1].endswith("cases passed")
    assert "FAIL" not in out


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    assert main(["probe", "--checkpoint", str(tmp_path / "nope.bin"), "--data", "synthetic"]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_axis_is_rejected():
    with pytest.raises(SystemExit):
        main(["ablate", "--axis", "depth"])


def test_smoothed_is_trailing_mean():
    assert smoothed([1.0, 3.0, 5.0, 7.0], 2) == [1.0, 2.0, 4.0, 6.0]
