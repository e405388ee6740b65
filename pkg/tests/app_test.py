import re

import pytest
import torch

from app import EXIT_OK, EXIT_USER, main
from networks.segmenter import ToySegmenter, freeze, save_segmenter
from scene_data import SceneFolder

TINY = ["--set", "resolution=16", "--set", "num_classes=4", "--set", "width_divisor=32",
        "--set", "z_dim=4", "--set", "batch_size=2", "--set", "grid_every=0"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate-data", "--out", str(out), "--count", "20", "--resolution", "16",
                 "--num-classes", "4"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(data_dir), "--out", str(out), "--steps", "2", *TINY])
    assert code == EXIT_OK
    return out


def test_usage_errors_exit_one(tmp_path):
    assert main(["no-such-command"]) == EXIT_USER
    assert main(["ablate", "--variant", "dp-xx"]) == EXIT_USER
    assert main(["train", "--set", "steps"]) == EXIT_USER
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_USER


def test_generate_data(data_dir):
    ds = SceneFolder(str(data_dir))
    assert len(ds) == 20
    assert ds.meta.num_classes == 4 and ds.meta.height == 16
    label, image = ds[0]
    assert label.shape == (16, 16) and image.shape == (3, 16, 16)


def test_train_writes_outputs(run_dir):
    assert (run_dir / "checkpoint.dpgk").exists()
    cfg = (run_dir / "run.cfg").read_text()
    assert "resolution=16\n" in cfg and "steps=2\n" in cfg
    assert len((run_dir / "losses.csv").read_text().strip().splitlines()) == 3


def test_generate_data_size_and_classes_flags(tmp_path):
    out = tmp_path / "scenes"
    args = ["generate-data", "--seed", "0", "--count", "4", "--size", "16", "--classes", "4", "--out", str(out)]
    assert main(args) == EXIT_OK
    ds = SceneFolder(str(out))
    assert len(ds) == 4 and ds.meta.height == 16 and ds.meta.num_classes == 4


def test_resumed_loss_table_starts_at_resume_step(run_dir, data_dir, tmp_path):
    out = tmp_path / "resumed"
    args = ["train", "--data", str(data_dir), "--out", str(out), "--steps", "4", *TINY,
            "--resume", str(run_dir / "checkpoint.dpgk")]
    assert main(args) == EXIT_OK
    rows = (out / "losses.csv").read_text().strip().splitlines()
    assert rows[0].startswith("step,")
    assert [r.split(",")[0] for r in rows[1:]] == ["2", "3"]


def test_train_rejects_mismatched_dataset(data_dir, tmp_path):
    code = main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--steps", "1",
                 "--set", "resolution=32", "--set", "num_classes=4"])
    assert code == EXIT_USER


def test_synthesize_is_seeded(run_dir, data_dir, tmp_path):
    label = str(data_dir / "labels" / "000000.png")
    outs = []
    for name in ("a.png", "b.png"):
        path = tmp_path / name
        args = ["synthesize", "--checkpoint", str(run_dir / "checkpoint.dpgk"), "--label", label,
                "--out", str(path), "--seed", "1"]
        assert main(args) == EXIT_OK
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_synthesize_rejects_wrong_label_size(run_dir, tmp_path):
    from PIL import Image
    import numpy as np
    bad = tmp_path / "bad.png"
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(bad)
    args = ["synthesize", "--checkpoint", str(run_dir / "checkpoint.dpgk"), "--label", str(bad),
            "--out", str(tmp_path / "o.png")]
    assert main(args) == EXIT_USER


def test_eval_writes_metrics(run_dir, data_dir, tmp_path, capsys):
    torch.manual_seed(0)
    seg = str(tmp_path / "seg.dpgk")
    save_segmenter(freeze(ToySegmenter(4)), seg)
    out = tmp_path / "eval"
    args = ["eval", "--checkpoint", str(run_dir / "checkpoint.dpgk"), "--data", str(data_dir),
            "--segmenter", seg, "--out", str(out), "--count", "16", "--seeds", "2"]
    assert main(args) == EXIT_OK
    assert "toy_fid=" in capsys.readouterr().out
    assert (out / "metrics.txt").exists() and (out / "metrics.csv").exists()
    cfg = (out / "run.cfg").read_text()
    assert "resolution=16\n" in cfg and "eval_count=16\n" in cfg and f"segmenter={seg}\n" in cfg


def test_missing_checkpoint_is_runtime_error(tmp_path):
    args = ["synthesize", "--checkpoint", str(tmp_path / "none.dpgk"), "--label", "x.png",
            "--out", str(tmp_path / "o.png")]
    assert main(args) == 2


def test_report_params(capsys):
    assert main(["report-params"]) == EXIT_OK
    counts = dict(re.findall(r"^(\w\[\w+\])=(\d+)$", capsys.readouterr().out, re.M))
    assert set(counts) == {"G[dp]", "D[dp]", "G[oa]", "D[oa]"}
    assert all(int(v) > 0 for v in counts.values())
    assert int(counts["D[dp]"]) > int(counts["D[oa]"])


def test_fit_segmenter(data_dir, tmp_path, capsys):
    out = tmp_path / "seg.dpgk"
    assert main(["fit-segmenter", "--data", str(data_dir), "--out", str(out), "--epochs", "1"]) == EXIT_OK
    assert out.exists()
    assert "held-out mIoU" in capsys.readouterr().out
