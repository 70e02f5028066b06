"""Masked auto-encoder: encoder over visible patches, lightweight decoder, masked-pixel MSE."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import CheckpointError, DegenerateLossError, ShapeError
from .nn import LayerNorm, Linear, Module
from .patches import PatchGrid, patchify, sample_mask, scatter_full, unpatchify
from .tensor import Parameter, Tensor
from .vit import Block, ViTConfig, ViTEncoder, _cached_pos, init_parameters, trunk_forward

ENCODER_SCOPE = "encoder."
DECODER_SCOPE = "decoder."


@dataclass(frozen=True)
class MAEConfig:
    encoder: ViTConfig
    decoder: ViTConfig
    image_size: int = 256
    mask_ratio: float = 0.75

    def __post_init__(self):
        if self.image_size % self.encoder.patch:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch {self.encoder.patch}")

    @property
    def patch(self) -> int:
        return self.encoder.patch

    @property
    def in_channels(self) -> int:
        return self.encoder.in_channels

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "image_size": self.image_size, "mask_ratio": self.mask_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "MAEConfig":
        return cls(ViTConfig(**d["encoder"]), ViTConfig(**d["decoder"]), d["image_size"], d["mask_ratio"])


class MAEDecoder(Module):
    def __init__(self, cfg: MAEConfig):
        dec = cfg.decoder
        self._cfg = dec
        self.embed = Linear(cfg.encoder.dim, dec.dim)
        self.mask_token = Parameter(np.zeros((1, dec.dim), dtype=T.get_dtype()))
        self.blocks = [Block(dec) for _ in range(dec.depth)]
        self.norm = LayerNorm(dec.dim)
        self.pred = Linear(dec.dim, cfg.patch * cfg.patch * cfg.in_channels)

    def forward(self, latent, plan, grid_h: int, grid_w: int):
        x = self.embed(latent)
        x = scatter_full(x, self.mask_token, plan, _cached_pos(grid_h, grid_w, self._cfg.dim))
        x = trunk_forward(x, self._cfg, self.blocks, self.norm)
        return self.pred(x)[1:]


class MAE(Module):
    def __init__(self, cfg: MAEConfig, seed=None):
        self._cfg = cfg
        self.encoder = ViTEncoder(cfg.encoder)
        self.decoder = MAEDecoder(cfg)
        if seed is not None:
            init_parameters(self, seed)

    @property
    def config(self) -> MAEConfig:
        return self._cfg

    def _grid(self, image) -> PatchGrid:
        x = T.as_tensor(image)
        C, H, W = x.shape
        s = self._cfg.image_size
        if (C, H, W) != (self._cfg.in_channels, s, s):
            raise ShapeError(f"image shape {x.shape} does not match config "
                             f"({self._cfg.in_channels}, {s}, {s})")
        return patchify(x, self._cfg.patch)

    def predict_all(self, image, seed):
        """Decoder predictions for every patch: ([N, p*p*C] tensor, plan, grid)."""
        grid = self._grid(image)
        plan = sample_mask(grid.N, self._cfg.mask_ratio, seed)
        latent = self.encoder.forward_visible(grid, plan)
        return self.decoder(latent, plan, grid.grid_h, grid.grid_w), plan, grid

    def forward(self, image, seed):
        """Return (predictions for the masked patches [m, p*p*C], mask plan)."""
        full, plan, _ = self.predict_all(image, seed)
        return T.gather(full, plan.masked_idx, axis=0), plan

    def loss(self, image, seed) -> Tensor:
        full, plan, grid = self.predict_all(image, seed)
        pred = T.gather(full, plan.masked_idx, axis=0)
        return mse_masked_loss(pred, grid.patches.data, plan)

    def to_checkpoint(self, step: int = 0, rng_state=None) -> Checkpoint:
        return Checkpoint("mae", {"mae": self._cfg.to_dict()}, OrderedDict(
            (n, p.data.astype(np.float32)) for n, p in self.named_parameters()), step, rng_state)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MAE":
        if ckpt.kind != "mae":
            raise CheckpointError(f"expected an MAE checkpoint, got kind {ckpt.kind!r}")
        model = cls(MAEConfig.from_dict(ckpt.config["mae"]))
        model.load_state_dict(ckpt.tensors, strict=True)
        return model


def mae_forward(model: MAE, image, seed):
    return model(image, seed)


def mse_masked_loss(pred, target_patches, plan) -> Tensor:
    """Mean over all masked elements of ``(pred - target)**2``; targets are raw pixels."""
    pred = T.as_tensor(pred)
    if plan.num_masked == 0:
        raise DegenerateLossError("no masked patches: the reconstruction loss is undefined")
    target = np.asarray(target_patches.data if isinstance(target_patches, Tensor) else target_patches)
    x_m = target[plan.masked_idx].astype(pred.dtype)
    if pred.shape != x_m.shape:
        raise ShapeError(f"predictions {pred.shape} do not match masked targets {x_m.shape}")
    diff = pred - x_m
    return T.mean(diff * diff)


def export_encoder(ckpt: Checkpoint) -> Checkpoint:
    """Keep only the encoder scope of an MAE checkpoint; the decoder is dropped."""
    if ckpt.kind == "encoder":
        return Checkpoint("encoder", dict(ckpt.config), OrderedDict(ckpt.tensors), ckpt.step,
                          None, ckpt.provenance)
    if ckpt.kind != "mae" or "mae" not in ckpt.config:
        raise CheckpointError(f"cannot export an encoder from a {ckpt.kind!r} checkpoint")
    kept = OrderedDict((n, a) for n, a in ckpt.tensors.items() if n.startswith(ENCODER_SCOPE))
    if not kept:
        raise CheckpointError("checkpoint has no encoder-scoped tensors")
    cfg = ckpt.config["mae"]
    config = {"encoder": cfg["encoder"], "image_size": cfg["image_size"]}
    provenance = {"source_sha256": ckpt.digest(), "source_step": int(ckpt.step)}
    return Checkpoint("encoder", config, kept, ckpt.step, None, provenance)


def reconstruct_image(image, model: MAE, seed, paste_visible: bool = True):
    """Return (masked input, reconstruction, original) as [C,H,W] arrays.

    Masked patches are zeroed in the first image. In the reconstruction the
    masked patches come from the decoder and, with ``paste_visible``, the
    visible patches are copied from the original.
    """
    original = np.asarray(T.as_tensor(image).data, dtype=np.float64)
    with T.no_grad():
        full, plan, grid = model.predict_all(image, seed)
    patches = grid.patches.data.astype(np.float64)
    vis = plan.visible_mask()
    masked = np.where(vis[:, None], patches, 0.0)
    recon = full.data.astype(np.float64).copy()
    if paste_visible:
        recon[vis] = patches[vis]
    shape = (grid.grid_h, grid.grid_w, grid.p, grid.C)
    to_img = lambda a: unpatchify(T.Tensor(a, dtype=np.float64), *shape).data  # noqa: E731
    return to_img(masked), to_img(recon), original
