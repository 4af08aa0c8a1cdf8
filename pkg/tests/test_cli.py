import json

import numpy as np
import pytest

from splatlab.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from splatlab.fileio import read_pfm, read_png
from splatlab.geometry import Camera
from splatlab.scenes import SyntheticScene, render_ground_truth
from splatlab.trainer import TrainConfig

CONFIG = dict(iters=3, warmup_iters=1, lr_init=0.01, image_size=16, n_outside=1, extrapolator_width=4,
              student={"kind": "conv", "width": 4, "stages": 1}, checkpoint_every=0)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-scene", "--seed", "4", "--out", str(root / "scene"), "--size", "16"]) == EXIT_OK
    TrainConfig(**CONFIG).save(root / "cfg.json")
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run"), "--deterministic"]) == EXIT_OK
    return root


def loss_records(run):
    return [json.loads(line) for line in (run / "loss.jsonl").read_text().splitlines()]


def test_gen_scene_outputs(workspace, tmp_path):
    scene_dir = workspace / "scene"
    roles = json.loads((scene_dir / "views.json").read_text())
    assert len(roles["context"]) == 2 and len(roles["inside"]) == 1 and len(roles["outside"]) == 2
    scene = SyntheticScene.load(scene_dir / "scene.json")
    assert len(scene.cameras) == 5
    for i, cam in enumerate(scene.cameras):
        img, depth = render_ground_truth(scene, cam)
        assert np.allclose(read_pfm(scene_dir / f"depth_{i:02d}.pfm"), depth.astype(np.float32))
        assert np.abs(read_png(scene_dir / f"view_{i:02d}.png") - img).max() <= 0.5 / 255 + 1e-12
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen-scene" and manifest["seed"] == 4
    assert main(["gen-scene", "--seed", "4", "--out", str(tmp_path), "--size", "16"]) == EXIT_OK
    assert (tmp_path / "scene.json").read_bytes() == (scene_dir / "scene.json").read_bytes()
    assert (tmp_path / "view_03.png").read_bytes() == (scene_dir / "view_03.png").read_bytes()


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "final.bin").exists() and (run / "manifest.json").exists()
    assert len(loss_records(run)) == 3


def test_train_no_teacher_zeroes_teacher_terms(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path), "--no-teacher"]) == EXIT_OK
    recs = loss_records(tmp_path)
    assert all(r["geo"] == 0.0 and r["grad"] == 0.0 for r in recs)
    assert all(r["l2"] > 0 for r in recs)


@pytest.mark.parametrize("flags", [["--no-grad-match"], ["--no-composition"], ["--no-composition", "--no-extrapolator"]])
def test_train_flag_matrix(workspace, tmp_path, flags):
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path), "--iters", "2"] + flags) == EXIT_OK
    recs = loss_records(tmp_path)
    assert len(recs) == 2
    if "--no-grad-match" in flags:
        assert all(r["grad"] == 0.0 and r["geo"] > 0 for r in recs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path), "--no-extrapolator"]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text(json.dumps({"iters": 5, "warmup_iters": 9}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["refine", "--ckpt", str(workspace / "run" / "final.bin"), "--scene", str(workspace / "scene"),
                 "--shift", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
    nan_cfg = dict(CONFIG, lr_init=1e308)
    (tmp_path / "nan.json").write_text(json.dumps(nan_cfg))
    assert main(["train", "--config", str(tmp_path / "nan.json"), "--out", str(tmp_path / "nan")]) == EXIT_NUMERIC
    assert (tmp_path / "nan" / "diverged.json").exists()


def test_render_outputs(workspace, tmp_path):
    args = ["render", "--ckpt", str(workspace / "run" / "final.bin"), "--scene", str(workspace / "scene"),
            "--camera-index", "3", "--show-weight", "--show-depth"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    a = tmp_path / "a"
    for name in ("composed.png", "raw.png", "weight.pfm", "weight_mask.png", "depth.pfm", "manifest.json"):
        assert (a / name).exists()
    mask = read_png(a / "weight_mask.png")
    assert set(np.unique(mask)) <= {0.0, 1.0}
    w = read_pfm(a / "weight.pfm")
    assert np.array_equal(mask == 1.0, w >= 0.5)
    full = w == 1.0
    assert np.array_equal(read_png(a / "composed.png")[full], read_png(a / "raw.png")[full])
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("composed.png", "raw.png", "weight.pfm", "depth.pfm"):
        assert (a / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(args[:-2] + ["--camera-index", "9", "--out", str(tmp_path / "c")]) == EXIT_CONFIG


def test_eval_depth_on_ground_truth(workspace, tmp_path):
    assert main(["eval", "--scenes", str(workspace / "scene"), "--protocol", "depth", "--out", str(tmp_path)]) == EXIT_OK
    rec = json.loads((tmp_path / "depth.jsonl").read_text())
    assert rec["abs_rel"] == 0.0 and rec["delta1"] == 1.0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mean"]["abs_rel"] == 0.0


def test_eval_extrapolation_protocol(workspace, tmp_path):
    assert main(["eval", "--ckpt", str(workspace / "run" / "final.bin"), "--scenes", str(workspace / "scene"),
                 "--protocol", "extrapolation", "--out", str(tmp_path)]) == EXIT_OK
    recs = [json.loads(x) for x in (tmp_path / "extrapolation.jsonl").read_text().splitlines()]
    assert len(recs) == 3
    assert [r["split"] for r in recs] == ["inside", "outside", "outside"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mean"]["psnr"] == pytest.approx(np.mean([r["psnr"] for r in recs]))


def test_eval_ordinal_and_empty_dir(workspace, tmp_path):
    assert main(["eval", "--ckpt", str(workspace / "run" / "final.bin"), "--scenes", str(workspace / "scene"),
                 "--protocol", "ordinal", "--out", str(tmp_path / "o")]) == EXIT_OK
    rec = json.loads((tmp_path / "o" / "ordinal.jsonl").read_text())
    assert 0.0 <= rec["ordinal"] <= 1.0 and rec["pairs"] == 64
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--scenes", str(tmp_path / "empty"), "--protocol", "depth", "--out", str(tmp_path / "e")]) == EXIT_CONFIG


def test_refine_outputs(workspace, tmp_path):
    assert main(["refine", "--ckpt", str(workspace / "run" / "final.bin"), "--scene", str(workspace / "scene"),
                 "--out", str(tmp_path)]) == EXIT_OK
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["shift"] == 0.5
    assert m["delta"]["abs_rel"] == pytest.approx(m["after"]["abs_rel"] - m["before"]["abs_rel"])
    assert read_pfm(tmp_path / "student_depth.pfm").shape == (16, 16)
    assert read_pfm(tmp_path / "refined_depth.pfm").shape == (16, 16)
