import math

import numpy as np
import pytest

from sarmae import boxes as B
from sarmae import tensor as T
from sarmae.checkpoint import Checkpoint
from sarmae.detector import (
    Detector, DetectorConfig, RoIHead, RPNHead, SimpleFPN, assign_levels, detection_losses,
    pool_rois, select_proposals,
)
from sarmae.errors import CheckpointError, ShapeError
from sarmae.mae import MAE, MAEConfig, export_encoder
from sarmae.vit import ViTConfig

from gradcheck import max_rel_error


def tiny_config(**kw) -> DetectorConfig:
    base = dict(backbone=ViTConfig(depth=1, dim=16, heads=2, patch=16), num_classes=2,
                fpn_branch_channels=(8, 8, 16, 16), fpn_channels=8, fc_dim=16, anchor_scale=2.0,
                rpn_pre_nms_topk=50, rpn_post_nms_topk_train=20, rpn_post_nms_topk_test=20,
                roi_batch_per_image=16, rpn_batch_per_image=32)
    base.update(kw)
    return DetectorConfig(**base)


def _zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def test_config_requires_stride_16_backbone():
    with pytest.raises(ShapeError):
        tiny_config(backbone=ViTConfig(depth=1, dim=16, heads=2, patch=8))
    with pytest.raises(ShapeError):
        tiny_config(fpn_branch_channels=(8, 8, 32, 16))


def test_config_dict_roundtrip():
    cfg = tiny_config()
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


# -- Simple FPN ------------------------------------------------------------

def test_fpn_base_shapes():
    fpn = SimpleFPN(768, (192, 384, 768, 768), 256)
    x = np.random.default_rng(0).standard_normal((768, 16, 16)).astype(np.float32)
    with T.no_grad():
        levels = fpn(T.Tensor(x))
    assert [lv.shape for lv in levels] == [(256, s, s) for s in (64, 32, 16, 8, 4)]


@pytest.mark.parametrize("H,W", [(16, 16), (48, 80), (112, 32)])
def test_pyramid_shapes_ceil(H, W):
    model = Detector(tiny_config(), seed=0)
    with T.no_grad():
        levels = model.features(np.zeros((1, H, W), dtype=np.float32))
    for lv, s in zip(levels, (4, 8, 16, 32, 64)):
        assert lv.shape[1:] == (math.ceil(H / s), math.ceil(W / s))


def test_fpn_zero_input_zero_pyramid():
    fpn = SimpleFPN(16, (8, 8, 16, 16), 8)
    for name, p in fpn.named_parameters():
        if name.endswith("bias"):
            p.data = np.zeros_like(p.data)
    levels = fpn(T.Tensor(np.zeros((16, 4, 4), dtype=np.float32)))
    assert all(np.all(lv.data == 0) for lv in levels)


def test_fpn_gradient_reaches_backbone():
    model = Detector(tiny_config(), seed=0)
    image = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
    loss = sum((T.tsum(lv * lv) for lv in model.features(image)), T.Tensor(0.0))
    loss.backward()
    grads = [p.grad for n, p in model.named_parameters() if n.startswith("backbone.")]
    assert all(g is not None and np.any(g) for g in grads)


# -- RPN -------------------------------------------------------------------

def test_rpn_counts_on_64_level():
    head = RPNHead(8, 3)
    with T.no_grad():
        obj, deltas = head(T.Tensor(np.zeros((8, 64, 64), dtype=np.float32)))
    assert obj.shape == (12_288,) and deltas.shape == (12_288, 4)


def test_rpn_zero_weights_give_bias():
    head = RPNHead(4, 3)
    _zero(head)
    head.objectness.bias.data[:] = [0.1, 0.2, 0.3]
    obj, _ = head(T.Tensor(np.random.default_rng(0).standard_normal((4, 2, 2)).astype(np.float32)))
    assert np.allclose(obj.data, np.tile([0.1, 0.2, 0.3], 4))


def test_rpn_head_gradcheck():
    def build(rng):
        head = RPNHead(3, 3)
        for p in head.parameters():
            p.data = rng.standard_normal(p.shape) * 0.5
        x = T.Tensor(rng.standard_normal((3, 2, 2)))

        def fn():
            obj, d = head(x)
            return T.concat([obj, d.reshape(-1)], axis=0)

        return fn, list(head.parameters())

    with T.precision(np.float64):
        for i in range(3):
            assert max_rel_error(build, np.random.default_rng([7, i])) < 1e-4


# -- proposals -------------------------------------------------------------

def test_select_single_anchor():
    anchors = [np.array([[2.0, 2.0, 10.0, 10.0]])]
    out = [(np.array([1.0]), np.array([[0.25, 0.0, 0.0, 0.0]]))]
    boxes, scores = select_proposals(out, anchors, (32, 32))
    assert np.allclose(boxes, [[4.0, 2.0, 12.0, 10.0]]) and scores.tolist() == [1.0]


def test_select_duplicates_keep_best():
    anchors = [np.array([[0.0, 0.0, 8.0, 8.0], [0.0, 0.0, 8.0, 8.0]])]
    out = [(np.array([0.8, 0.9]), np.zeros((2, 4)))]
    boxes, scores = select_proposals(out, anchors, (32, 32))
    assert scores.tolist() == [0.9] and boxes.shape == (1, 4)


def test_select_disjoint_all_survive():
    anchors = [np.array([[0.0, 0.0, 4.0, 4.0], [10.0, 10.0, 14.0, 14.0]]),
               np.array([[20.0, 0.0, 30.0, 10.0]])]
    out = [(np.array([0.1, 0.5]), np.zeros((2, 4))), (np.array([0.3]), np.zeros((1, 4)))]
    _, scores = select_proposals(out, anchors, (32, 32))
    assert scores.tolist() == [0.5, 0.3, 0.1]


def test_select_drops_tiny_boxes():
    anchors = [np.array([[0.0, 0.0, 0.5, 8.0]])]
    boxes, _ = select_proposals([(np.array([1.0]), np.zeros((1, 4)))], anchors, (32, 32))
    assert boxes.shape == (0, 4)


# -- RoIAlign --------------------------------------------------------------

def test_roi_align_constant_map():
    feat = T.Tensor(np.full((2, 8, 8), 3.5))
    out = T.roi_align(feat, [[3.0, 5.0, 20.0, 17.0]], 0.25, 7, 2)
    assert out.shape == (1, 2, 7, 7)
    assert np.allclose(out.data, 3.5)


def test_roi_align_ramp_shift():
    stride, slope = 4, 0.7
    feat = T.Tensor(np.tile(slope * np.arange(12.0), (1, 12, 1)))
    box = np.array([[8.0, 8.0, 24.0, 20.0]])
    a = T.roi_align(feat, box, 1 / stride, 7, 2).data
    b = T.roi_align(feat, box + [stride, 0, stride, 0], 1 / stride, 7, 2).data
    assert np.allclose(b - a, slope, atol=1e-12)


def test_roi_align_degenerate_box():
    with pytest.raises(ShapeError):
        T.roi_align(T.Tensor(np.zeros((1, 4, 4))), [[2.0, 2.0, 2.0, 3.0]], 1.0)


def test_level_assignment():
    boxes = np.array([[0, 0, 224, 224], [0, 0, 112, 112], [0, 0, 8, 8], [0, 0, 2000, 2000]], dtype=float)
    assert assign_levels(boxes).tolist() == [4, 3, 2, 6]


def test_pool_rois_keeps_order_across_levels():
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    pyramid = [T.Tensor(rng.standard_normal((2, 64 // s, 64 // s))) for s in (4, 8, 16, 32, 64)]
    rois = np.array([[0, 0, 60, 60], [0, 0, 10, 10], [4, 4, 50, 40]], dtype=float)
    pooled = pool_rois(pyramid, cfg.strides, rois, cfg).data
    for i, lv in enumerate(assign_levels(rois)):
        single = T.roi_align(pyramid[lv - 2], rois[i:i + 1], 1 / cfg.strides[lv - 2], 7, 2).data
        assert np.array_equal(pooled[i], single[0])


# -- RoI head --------------------------------------------------------------

def test_roi_head_output_sizes():
    head = RoIHead(8 * 49, 16, 6)
    logits, deltas = head(T.Tensor(np.zeros((3, 8, 7, 7))))
    assert logits.shape == (3, 7) and deltas.shape == (3, 24)


def test_roi_head_zero_weights_uniform():
    head = RoIHead(4 * 49, 8, 6)
    _zero(head)
    logits, _ = head(T.Tensor(np.random.default_rng(0).standard_normal((2, 4, 7, 7))))
    assert np.all(logits.data == 0)
    assert np.allclose(T.softmax(logits, axis=-1).data, 1 / 7)


def test_roi_head_gradcheck():
    def build(rng):
        head = RoIHead(2 * 4, 5, 2)
        for p in head.parameters():
            p.data = rng.standard_normal(p.shape) * 0.5
        x = T.Tensor(rng.standard_normal((3, 2, 2, 2)))

        def fn():
            logits, deltas = head(x)
            return T.concat([logits.reshape(-1), deltas.reshape(-1)], axis=0)

        return fn, list(head.parameters())

    with T.precision(np.float64):
        for i in range(3):
            assert max_rel_error(build, np.random.default_rng([8, i])) < 1e-4


# -- losses ----------------------------------------------------------------

def _smooth_l1(x, beta):
    x = abs(x)
    return 0.5 * x * x / beta if x < beta else x - 0.5 * beta


def _bce(z, y):
    return max(z, 0) - z * y + math.log1p(math.exp(-abs(z)))


def test_two_anchor_loss_hand_reference():
    cfg = tiny_config()
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    anchors = np.array([[1.0, 0.0, 11.0, 10.0], [20.0, 20.0, 30.0, 30.0]])  # IoU 9/11, 0
    obj_logits = np.array([0.3, -1.2])
    rpn_d = np.array([[0.05, -0.02, 0.1, 0.0], [0.4, 0.4, 0.4, 0.4]])
    cls_logits = np.array([[0.2, 1.0, -0.5], [0.7, 0.1, 0.0]])
    roi_d = np.array([[0.3, -0.1, 0.2, 0.5, 9.0, 9.0, 9.0, 9.0], [5.0] * 8])
    roi_labels = np.array([1, 0])
    roi_targets = np.array([[0.1, 0.1, -0.2, 0.4], [0.0] * 4])
    with T.precision(np.float64):
        rpn_out = [(T.Tensor(obj_logits), T.Tensor(rpn_d))]
        got = detection_losses(rpn_out, anchors, gt, (T.Tensor(cls_logits), T.Tensor(roi_d)),
                               roi_labels, roi_targets, cfg, np.random.default_rng(0))

    t = [(-1.0 + 0.0) / 10, 0.0, 0.0, 0.0]  # centre 6 -> 5 over width 10
    ref_rpn_cls = (_bce(0.3, 1) + _bce(-1.2, 0)) / 2
    ref_rpn_reg = sum(_smooth_l1(rpn_d[0, j] - t[j], 1 / 9) for j in range(4)) / 2

    def ce(row, y):
        m = max(row)
        return -(row[y] - m - math.log(sum(math.exp(v - m) for v in row)))

    ref_roi_cls = (ce(cls_logits[0], 1) + ce(cls_logits[1], 0)) / 2
    ref_roi_reg = sum(_smooth_l1(roi_d[0, j] - roi_targets[0, j], 1.0) for j in range(4)) / 2
    ref = {"rpn_cls": ref_rpn_cls, "rpn_reg": ref_rpn_reg, "roi_cls": ref_roi_cls, "roi_reg": ref_roi_reg}
    for k, v in ref.items():
        assert abs(got[k].item() - v) < 1e-10, k
    assert abs(got["total"].item() - sum(ref.values())) < 1e-10


def test_background_only_regression_zero():
    model = Detector(tiny_config(), seed=0)
    image = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
    losses = model.losses(image, np.zeros((0, 4)), np.zeros(0), np.random.default_rng(0))
    assert losses["rpn_reg"].item() == 0.0 and losses["roi_reg"].item() == 0.0
    assert losses["rpn_cls"].item() > 0 and losses["roi_cls"].item() > 0


def test_losses_nonnegative_and_reach_every_parameter():
    # sample every anchor so the coarse levels contribute too
    model = Detector(tiny_config(rpn_batch_per_image=100_000), seed=0)
    for p in model.parameters():
        p.data = p.data + np.float32(0.05) * np.random.default_rng(p.size).standard_normal(p.shape).astype(np.float32)
    image = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
    gts = np.array([[2.0, 3.0, 14.0, 12.0], [16.0, 18.0, 30.0, 29.0]])
    losses = model.losses(image, gts, np.array([0, 1]), np.random.default_rng(1))
    assert all(v.item() >= 0 for v in losses.values())
    losses["total"].backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


# -- inference -------------------------------------------------------------

def test_detect_contract_and_determinism():
    model = Detector(tiny_config(), seed=0)
    image = np.random.default_rng(0).random((1, 64, 64)).astype(np.float32)
    a = model.detect(image, image_id=3, score_thresh=0.05, max_dets=100)
    b = model.detect(image, image_id=3, score_thresh=0.05, max_dets=100)
    assert len(a) <= 100 and np.all(a.scores >= 0.05)
    assert np.all(np.diff(a.scores) <= 0)
    assert np.all((a.labels >= 0) & (a.labels < 2))
    assert np.all(a.boxes[:, [0, 1]] >= 0) and np.all(a.boxes[:, [2, 3]] <= 64)
    assert a.boxes.tobytes() == b.boxes.tobytes() and a.scores.tobytes() == b.scores.tobytes()
    assert a.image_id == 3


def test_detect_max_dets_and_threshold():
    model = Detector(tiny_config(), seed=0)
    image = np.random.default_rng(0).random((1, 64, 64)).astype(np.float32)
    assert len(model.detect(image, score_thresh=0.0, max_dets=3)) <= 3
    assert len(model.detect(image, score_thresh=1.0)) == 0


def test_detector_checkpoint_roundtrip(tmp_path):
    model = Detector(tiny_config(), seed=0)
    model.to_checkpoint(step=4).save(tmp_path / "d")
    back = Detector.from_checkpoint(Checkpoint.load(tmp_path / "d"))
    image = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
    a, b = model.detect(image, score_thresh=0.0), back.detect(image, score_thresh=0.0)
    assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.scores, b.scores)


def _encoder_checkpoint(dim=16, depth=1):
    enc = ViTConfig(depth=depth, dim=dim, heads=2, patch=16)
    mae = MAE(MAEConfig(enc, ViTConfig(depth=1, dim=8, heads=2, patch=16), 32, 0.75), seed=5)
    return export_encoder(mae.to_checkpoint())


def test_load_encoder_copies_weights():
    model = Detector(tiny_config(), seed=0)
    ckpt = _encoder_checkpoint()
    model.load_encoder(ckpt)
    params = dict(model.named_parameters())
    for name, arr in ckpt.tensors.items():
        assert np.array_equal(params["backbone." + name[len("encoder."):]].data, arr)


def test_load_encoder_mismatch_lists_names():
    model = Detector(tiny_config(), seed=0)
    with pytest.raises(CheckpointError, match=r"backbone\.blocks\.1\..*unexpected"):
        model.load_encoder(_encoder_checkpoint(depth=2))
    with pytest.raises(CheckpointError, match=r"shape"):
        Detector(tiny_config(backbone=ViTConfig(depth=1, dim=32, heads=2, patch=16),
                             fpn_branch_channels=(8, 8, 32, 32))).load_encoder(_encoder_checkpoint())


def test_load_encoder_wrong_kind():
    model = Detector(tiny_config(), seed=0)
    with pytest.raises(CheckpointError):
        model.load_encoder(model.to_checkpoint())
