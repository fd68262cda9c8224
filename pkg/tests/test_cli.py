import json

import numpy as np
import pytest

from drtanet.cli import main, parse_overrides
from drtanet.data import load_mask

TINY = ["--model.width_mult=0.125", "--model.input_size=[32,32]", "--model.attention_mode=fixed(3)"]
DATA = ["--data.n_pairs=4", "--data.resize_to=[32,32]"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), *DATA]) == 0
    argv = ["train", "--out", str(root / "run"), *TINY, *DATA, "--train.epochs=2", "--train.batch_size=2"]
    assert main(argv) == 0
    return root


def test_gen_data_layout_and_manifest(trained):
    data = trained / "data"
    assert len(list((data / "t0").glob("*.png"))) == 4
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 0
    assert "mask/00000.png" in manifest["outputs"]


def test_train_outputs(trained):
    run = trained / "run"
    for name in ("config.json", "best.ckpt", "final.ckpt", "metrics.csv", "losses.json", "manifest.json"):
        assert (run / name).is_file(), name
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["model"]["attention_mode"] == "fixed(3)"
    assert len(json.loads((run / "losses.json").read_text())) == 2


def test_eval_checkpoint(trained, capsys):
    out = trained / "eval"
    argv = ["eval", "--checkpoint", str(trained / "run" / "best.ckpt"), f"--data.root={trained / 'data'}",
            "--data.resize_to=[32,32]", "--out", str(out)]
    assert main(argv) == 0
    text = capsys.readouterr().out
    assert "[aggregate]" in text and "[per_image_mean]" in text
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"aggregate", "per_image_mean"}


def test_eval_ground_truth_as_prediction(trained, capsys):
    argv = ["eval", "--pred", str(trained / "data" / "mask"), f"--data.root={trained / 'data'}", "--data.resize_to=[32,32]"]
    assert main(argv) == 0
    assert "f1=1.000" in capsys.readouterr().out


def test_infer_writes_binary_masks(trained):
    out = trained / "infer"
    assert main(["infer", "--checkpoint", str(trained / "run" / "best.ckpt"), "--root", str(trained / "data"), "--out", str(out)]) == 0
    masks = sorted(out.glob("*.png"))
    assert len(masks) == 4
    assert set(np.unique(load_mask(masks[0]))) <= {0, 1}


def test_export_attention(trained):
    out = trained / "attn"
    data = trained / "data"
    argv = ["export-attn", "--checkpoint", str(trained / "run" / "best.ckpt"), "--t0", str(data / "t0" / "00000.png"),
            "--t1", str(data / "t1" / "00000.png"), "--out", str(out)]
    assert main(argv) == 0
    assert len(list(out.glob("level*_head*.png"))) == 16


def test_stats_json(capsys):
    assert main(["stats", "--json", "--model.attention_mode=fixed(1)", "--model.chva=false"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["param_count"] == stats["non_embedding_param_count"] + stats["embedding_param_count"]


def test_gradcheck_operations_only(capsys):
    assert main(["gradcheck", "--skip-model"]) == 0
    assert "max rel. error" in capsys.readouterr().out


def test_config_file_with_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"attention_mode": "fixed(5)", "chva": False}}))
    assert main(["stats", "--config", str(cfg), "--model.heads=2"]) == 0
    text = capsys.readouterr().out
    assert '"attention_mode": "fixed(5)"' in text and '"heads": 2' in text


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["stats", "--model.bogus=1"],
        ["stats", "--train.lr=0.1"],
        ["stats", "--model.attention_mode=fixed(4)"],
        ["eval", "--data.n_pairs=1"],
        ["train"],
    ],
)
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1


def test_missing_checkpoint_is_a_usage_error(tmp_path, capsys):
    argv = ["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data.n_pairs=1", "--data.resize_to=[32,32]"]
    assert main(argv) == 1
    assert "not found" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    argv = ["eval", "--checkpoint", str(bad), "--data.n_pairs=1", "--data.resize_to=[32,32]"]
    assert main(argv) == 2
    assert "ValueError" in capsys.readouterr().err


def test_help_lists_config_keys(capsys):
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for key in ("model.width_mult", "train.lr", "data.source", "val.n_pairs"):
        assert key in text


def test_override_parsing():
    got = parse_overrides(["--model.chva=false", "--model.attention_mode=fixed(3)", "--data.resize_to=[64,64]"], ("model", "data"))
    assert got == {"model": {"chva": False, "attention_mode": "fixed(3)"}, "data": {"resize_to": [64, 64]}}
