import numpy as np
import pytest

from sarmae import boxes as B
from sarmae import train as TR
from sarmae.checkpoint import Checkpoint
from sarmae.data import read_dataset, write_dataset
from sarmae.detector import Detector
from sarmae.errors import CheckpointError, DataError
from sarmae.mae import export_encoder

from tiny import tiny_config


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = tiny_config()
    write_dataset(root, "train", cfg.data.scene, 4)
    return read_dataset(root, "train")


def test_format_log():
    line = TR.format_log(3, 1, 1.5e-4, 0.25, {"rpn_cls": 0.125})
    assert line == "3 1 1.500000000e-04 2.500000000e-01 rpn_cls=1.250000000e-01"
    assert TR.TrainResult(None, [line]).losses == [0.25]


def test_hflip_involution():
    img = np.random.default_rng(0).random((1, 5, 7))
    assert np.array_equal(TR.hflip(TR.hflip(img)), img)
    assert np.array_equal(TR.hflip(img)[0, :, 0], img[0, :, -1])


def test_flip_image_and_boxes_consistently():
    img = np.zeros((1, 8, 16))
    img[0, 2:5, 1:4] = 1.0
    box = np.array([[1.0, 2.0, 4.0, 5.0]])
    flipped = B.flip_boxes(box, 16)[0].astype(int)
    x1, y1, x2, y2 = flipped
    assert np.all(TR.hflip(img)[0, y1:y2, x1:x2] == 1.0)
    assert TR.hflip(img).sum() == img.sum()
    assert np.array_equal(B.flip_boxes(B.flip_boxes(box, 16), 16), box)


def test_resize_noop_and_shape():
    img = np.random.default_rng(0).random((1, 8, 8)).astype(np.float32)
    assert TR.resize(img, 8) is img
    out = TR.resize(img, 16)
    assert out.shape == (1, 16, 16) and out.dtype == np.float32


def test_pretrain_step_count_and_checkpoints(dataset, tmp_path):
    res = TR.pretrain(tiny_config(), dataset, out_dir=tmp_path)
    assert len(res.log) == 4  # 2 epochs x 4 images / batch 2
    assert [int(line.split()[0]) for line in res.log] == [0, 1, 2, 3]
    assert [int(line.split()[1]) for line in res.log] == [0, 0, 1, 1]
    assert float(res.log[0].split()[2]) == 0.0
    assert res.checkpoint.step == 4
    for stem in ("mae", "last"):
        assert Checkpoint.load(tmp_path / stem).step == 4
    assert (tmp_path / "mae.bin").read_bytes() == (tmp_path / "last.bin").read_bytes()


def test_pretrain_log_deterministic(dataset):
    a = TR.pretrain(tiny_config(), dataset, seed=3)
    b = TR.pretrain(tiny_config(), dataset, seed=3)
    c = TR.pretrain(tiny_config(), dataset, seed=4)
    assert a.log == b.log
    assert a.checkpoint.digest() == b.checkpoint.digest()
    assert a.log != c.log


def test_finetune_from_encoder(dataset, tmp_path):
    cfg = tiny_config()
    enc = export_encoder(TR.pretrain(cfg, dataset).checkpoint)
    res = TR.finetune(cfg, dataset, enc, out_dir=tmp_path)
    assert len(res.log) == 4
    fields = res.log[0].split()
    assert [f.split("=")[0] for f in fields[4:]] == ["rpn_cls", "rpn_reg", "roi_cls", "roi_reg"]
    assert res.checkpoint.provenance == {"init": "encoder", "encoder_sha256": enc.digest()}
    assert Checkpoint.load(tmp_path / "detector").kind == "detector"
    for name, arr in enc.tensors.items():
        # the backbone moved away from the encoder during training but kept its shape
        assert res.checkpoint.tensors["backbone." + name[len("encoder."):]].shape == arr.shape


def test_finetune_deterministic(dataset):
    a = TR.finetune(tiny_config(), dataset, seed=1)
    b = TR.finetune(tiny_config(), dataset, seed=1)
    assert a.log == b.log and a.checkpoint.digest() == b.checkpoint.digest()
    assert a.checkpoint.provenance == {"init": "scratch"}


def test_check_encoder_rejects_mismatch(dataset):
    enc = export_encoder(TR.pretrain(tiny_config(), dataset).checkpoint)
    with pytest.raises(CheckpointError, match="unmatched"):
        TR.check_encoder(tiny_config(**{"model.encoder.depth": 2}), enc)


def test_empty_split_is_data_error(tmp_path):
    write_dataset(tmp_path, "none", tiny_config().data.scene, 0)
    with pytest.raises(DataError, match="no images"):
        TR.pretrain(tiny_config(), read_dataset(tmp_path, "none"))


def test_evaluate_detector_reports_all_metrics(dataset):
    model_ckpt = TR.finetune(tiny_config(), dataset).checkpoint
    dets, metrics = TR.evaluate_detector(Detector.from_checkpoint(model_ckpt), dataset, tiny_config())
    assert len(dets) == 4
    assert set(metrics) == {"mAP", "AP50", "AP75", "mAP_s", "mAP_m", "mAP_l"}
    assert 0.0 <= metrics["mAP"] <= 1.0
