"""Small configurations shared by the training, CLI and acceptance tests."""
from sarmae import config as C

TINY_OVERRIDES = {
    "model.encoder.depth": 1, "model.encoder.dim": 16, "model.encoder.heads": 2,
    "model.decoder.depth": 1, "model.decoder.dim": 8, "model.decoder.heads": 2,
    "model.image_size": 32,
    "detector.fpn_branch_channels": [8, 8, 16, 16], "detector.fpn_channels": 8,
    "detector.fc_dim": 16, "detector.anchor_scale": 2.0,
    "detector.rpn_batch_per_image": 32, "detector.roi_batch_per_image": 16,
    "data.scene.image_size": 32, "data.scene.min_size": 6, "data.scene.max_size": 14,
    "data.train_images": 4, "data.val_images": 2,
    "pretrain.batch_size": 2, "pretrain.epochs": 2, "pretrain.warmup_epochs": 1,
    "finetune.batch_size": 2, "finetune.epochs": 2, "finetune.warmup_steps": 1,
    "finetune.milestones": [1],
}


def tiny_config(**extra) -> C.RunConfig:
    return C.apply_overrides(C.load_preset("desk"), {**TINY_OVERRIDES, **extra})


def cli_overrides(**extra) -> list:
    """The tiny config as ``--key=value`` command-line arguments."""
    import json

    return [f"--{k}={json.dumps(v)}" for k, v in {**TINY_OVERRIDES, **extra}.items()]
