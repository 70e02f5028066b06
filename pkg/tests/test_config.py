import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarmae import config as C
from sarmae.errors import ConfigError


def test_presets_load_and_validate():
    base = C.load_preset("paper-base")
    assert base.model.encoder.dim == 768 and base.model.encoder.depth == 12
    assert base.model.decoder.depth == 3 and base.model.decoder.dim == 512
    assert base.model.image_size == 256 and base.model.mask_ratio == 0.75
    assert abs(base.pretrain.peak_lr - 3e-4) < 1e-15
    assert base.pretrain.betas == (0.9, 0.95) and base.finetune.betas == (0.9, 0.999)
    assert base.finetune.milestones == (8, 11) and base.finetune.warmup_steps == 500
    det = base.detector_config()
    assert det.fpn_branch_channels == (192, 384, 768, 768) and det.fpn_channels == 256
    assert det.strides == (4, 8, 16, 32, 64) and det.anchor_scale == 8.0
    desk = C.load_preset("desk")
    assert desk.detector_config().backbone == desk.model.encoder


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        C.load_preset("huge")


@pytest.mark.parametrize("data,key", [
    ({"pretrain": {"epoch": 3}}, "pretrain.epoch"),
    ({"model": {"encoder": {"width": 3}}}, "model.encoder.width"),
    ({"detector": {"num_classes": 3}}, "detector.num_classes"),
    ({"bogus": 1}, "bogus"),
])
def test_unknown_keys_named(data, key):
    with pytest.raises(ConfigError, match=f"'{key}'"):
        C.from_dict(data, C.load_preset("desk"))


@pytest.mark.parametrize("data", [
    {"pretrain": {"epochs": "ten"}},
    {"pretrain": {"batch_size": 0}},
    {"finetune": {"flip_prob": 1.5}},
    {"pretrain": {"epochs": 2, "warmup_epochs": 2}},
    {"data": {"scene": {"image_size": 72}}},
    {"data": {"scene": {"looks": 0.5}}},
    {"model": {"encoder": {"heads": 5}}},
    {"detector": {"fpn_channels": "wide"}},
])
def test_invalid_values_are_config_errors(data):
    with pytest.raises(ConfigError):
        C.from_dict(data, C.load_preset("desk"))


def test_overrides_apply_and_leave_base_untouched():
    base = C.load_preset("desk")
    cfg = C.apply_overrides(base, {"pretrain.epochs": 3, "detector.fc_dim": 32, "model.encoder.dim": 128,
                                   "detector.fpn_branch_channels": [16, 32, 128, 64]})
    assert cfg.pretrain.epochs == 3 and cfg.detector_config().fc_dim == 32
    assert cfg.detector_config().backbone.dim == 128
    assert base.pretrain.epochs == 20


def test_override_unknown_path():
    with pytest.raises(ConfigError, match="'pretrain.epoch'"):
        C.apply_overrides(C.load_preset("desk"), {"pretrain.epoch": 1})


def test_dumps_roundtrip(tmp_path):
    cfg = C.load_preset("desk")
    (tmp_path / "c.json").write_text(C.dumps(cfg))
    again = C.load_file(tmp_path / "c.json", C.RunConfig())
    assert C.dumps(again) == C.dumps(cfg)


def test_bad_config_file(tmp_path):
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        C.load_file(tmp_path / "c.json")
    with pytest.raises(ConfigError, match="cannot read"):
        C.load_file(tmp_path / "missing.json")


def test_parse_value():
    assert C.parse_value("3") == 3 and C.parse_value("[1, 2]") == [1, 2]
    assert C.parse_value("true") is True and C.parse_value("null") is None
    assert C.parse_value("warmup-cosine") == "warmup-cosine"


def test_every_leaf_path_is_overridable_with_its_own_value():
    cfg = C.load_preset("desk")
    plain = json.loads(C.dumps(cfg))
    for path in C.leaf_paths(cfg):
        node = plain
        for part in path.split("."):
            node = node[part] if part in node else None
            if node is None:
                break
        if path.startswith("detector."):
            node = getattr(cfg.detector_config(), path.split(".")[1])
            node = list(node) if isinstance(node, tuple) else node
        again = C.apply_overrides(cfg, {path: node})
        assert again.detector_config() == cfg.detector_config(), path
        assert again.model == cfg.model and again.pretrain == cfg.pretrain and again.data == cfg.data


@settings(max_examples=25)
@given(st.integers(2, 50), st.integers(1, 64))
def test_valid_integer_overrides_roundtrip(epochs, batch):
    cfg = C.apply_overrides(C.load_preset("desk"), {"pretrain.epochs": epochs, "finetune.batch_size": batch,
                                                    "pretrain.warmup_epochs": 1})
    assert cfg.pretrain.epochs == epochs and cfg.finetune.batch_size == batch
