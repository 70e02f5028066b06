import json
import subprocess
import sys

import numpy as np
import pytest

from sarmae import cli
from sarmae import data as D

from tiny import cli_overrides

TINY = ["--preset", "desk", *cli_overrides()]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    # input paths echoed into outputs differ only by the tree root
    return {str(p.relative_to(root)): p.read_bytes().replace(str(root).encode(), b"ROOT")
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain -> export -> finetune -> eval, run twice into separate trees."""
    roots = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(name)
        assert run("gen-data", *TINY, "--out", root / "data", "--unlabeled", 4) == 0
        assert run("pretrain", *TINY, "--data", root / "data", "--split", "unlabeled", "--out", root / "pre") == 0
        assert run("export-encoder", *TINY, "--checkpoint", root / "pre" / "mae", "--out", root / "enc") == 0
        assert run("finetune", *TINY, "--data", root / "data", "--encoder", root / "enc.mfst",
                   "--out", root / "ft") == 0
        assert run("eval", *TINY, "--data", root / "data", "--checkpoint", root / "ft" / "detector",
                   "--out", root / "ev") == 0
        images = sorted((root / "data" / "val" / "images").glob("*.pgm"))
        assert run("reconstruct", *TINY, "--checkpoint", root / "pre" / "mae.mfst", "--out", root / "rec",
                   *images) == 0
        assert run("detect", *TINY, "--checkpoint", root / "ft" / "detector", "--out", root / "det",
                   "--score-thresh", "0.0", *images) == 0
        roots.append(root)
    return roots


def test_every_command_bit_reproducible(pipeline):
    a, b = (tree_bytes(r) for r in pipeline)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
    for expected in ("pre/pretrain.log", "pre/mae.bin", "pre/last.mfst", "enc.bin", "ft/finetune.log",
                     "ft/detector.bin", "ev/metrics.txt", "ev/metrics.json", "ev/detections.txt",
                     "ev/detections.json", "det/detections.txt", "det/images.txt", "data/config.json"):
        assert expected in a


def test_pipeline_outputs(pipeline):
    root = pipeline[0]
    assert len((root / "pre" / "pretrain.log").read_text().splitlines()) == 4  # 4 unlabeled, batch 2, 2 epochs
    assert len(list((root / "rec").glob("*.pgm"))) == 3 * 2
    metrics = json.loads((root / "ev" / "metrics.json").read_text())
    assert set(metrics) == {"mAP", "AP50", "AP75", "mAP_s", "mAP_m", "mAP_l"}
    enc_manifest = (root / "enc.mfst").read_text()
    assert "decoder." not in enc_manifest and "mask_token" not in enc_manifest


def test_replaying_ground_truth_scores_one(pipeline, tmp_path, capsys):
    root = pipeline[0]
    ds = D.read_dataset(root / "data", "val")
    lines = [f"{s.image_id} {int(l)} 1.0 " + " ".join(map(repr, map(float, b)))
             for s in ds.samples for b, l in zip(s.boxes, s.labels)]
    (tmp_path / "gt.txt").write_text("\n".join(lines) + "\n")
    assert run("eval", *TINY, "--data", root / "data", "--detections", tmp_path / "gt.txt",
               "--out", tmp_path / "ev") == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["mAP"] == 1.0
    assert all(v in (1.0, -1.0) for v in metrics.values())
    assert "mAP 1.000000" in capsys.readouterr().out


def test_threshold_above_one_scores_zero(pipeline, tmp_path):
    root = pipeline[0]
    assert run("eval", *TINY, "--data", root / "data", "--checkpoint", root / "ft" / "detector",
               "--score-thresh", "1.1", "--out", tmp_path) == 0
    assert (tmp_path / "detections.txt").read_text() == ""
    assert json.loads((tmp_path / "metrics.json").read_text())["mAP"] == 0.0


def test_detect_overlay_corners(pipeline):
    root = pipeline[0]
    rows = (root / "det" / "detections.txt").read_text().splitlines()
    paths = dict(line.split(" ", 1) for line in (root / "det" / "images.txt").read_text().splitlines())
    if not rows:
        pytest.skip("untrained detector produced no boxes")
    image_id, label, _, *box = rows[0].split()
    src = paths[image_id]
    stem = src.rsplit("/", 1)[-1][:-4]
    overlay = D.read_pgm(root / "det" / f"{stem}_det.pgm")
    c0, r0, c1, r1 = D.box_pixels([float(v) for v in box], overlay.shape[1], overlay.shape[0])
    gray = D.class_gray(int(label), 6)
    # later boxes may overwrite, so check against all drawn gray levels
    drawn = {D.class_gray(int(r.split()[1]), 6) for r in rows if r.split()[0] == image_id}
    assert gray in drawn
    for r, c in ((r0, c0), (r0, c1), (r1, c0), (r1, c1)):
        assert overlay[r, c] in drawn


def test_reconstruct_names(pipeline):
    names = sorted(p.name for p in (pipeline[0] / "rec").glob("*.pgm"))
    assert names[:3] == ["000000_masked.pgm", "000000_original.pgm", "000000_recon.pgm"]


def test_gen_data_seed_changes_images(tmp_path):
    assert run("gen-data", *TINY, "--out", tmp_path / "x", "--seed", 1) == 0
    assert run("gen-data", *TINY, "--out", tmp_path / "y", "--seed", 2) == 0
    a = (tmp_path / "x" / "train" / "images" / "000000.pgm").read_bytes()
    b = (tmp_path / "y" / "train" / "images" / "000000.pgm").read_bytes()
    assert a != b


def test_print_config(capsys):
    assert run("pretrain", *TINY, "--data", "x", "--out", "y", "--print-config", "--pretrain.epochs", "7") == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["pretrain"]["epochs"] == 7 and cfg["model"]["encoder"]["dim"] == 16


def test_default_preset_is_base(capsys):
    assert run("gen-data", "--out", "x", "--print-config") == 0
    assert json.loads(capsys.readouterr().out)["model"]["encoder"]["dim"] == 768


def test_unknown_key_exit_2(capsys):
    assert run("pretrain", "--data", "x", "--out", "y", "--pretrain.epoch", "3") == 2
    assert "pretrain.epoch" in capsys.readouterr().err


def test_bad_value_exit_2(capsys):
    assert run("pretrain", "--data", "x", "--out", "y", "--pretrain.epochs=-1") == 2


def test_missing_data_exit_3(tmp_path, capsys):
    assert run("pretrain", *TINY, "--data", tmp_path / "none", "--out", tmp_path / "o") == 3
    assert "annotations.json" in capsys.readouterr().err


def test_wrong_encoder_exit_4(pipeline, tmp_path, capsys):
    root = pipeline[0]
    code = run("finetune", *TINY, "--model.encoder.dim=32", "--detector.fpn_branch_channels=[8,8,32,32]",
               "--data", root / "data", "--encoder", root / "enc", "--out", tmp_path)
    assert code == 4
    assert "unmatched" in capsys.readouterr().err


def test_eval_needs_source(pipeline, tmp_path):
    assert run("eval", *TINY, "--data", pipeline[0] / "data", "--out", tmp_path) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sarmae.cli", "gen-data", "--out", str(tmp_path),
                           "--pretrain.epoch", "1"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "unknown config key 'pretrain.epoch'" in proc.stderr
