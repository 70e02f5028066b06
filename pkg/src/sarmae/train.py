"""Pre-training and fine-tuning loops, augmentation, and detector evaluation over a split."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from . import boxes as B
from . import cocoeval
from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import Dataset
from .detector import Detector
from .errors import CheckpointError, ConfigError, DataError
from .mae import MAE
from .optim import AdamW, lr_at

LAST = "last"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return [float(line.split()[3]) for line in self.log]


def format_log(step: int, epoch: int, lr: float, loss: float, parts: Optional[dict] = None) -> str:
    extra = "".join(f" {k}={v:.9e}" for k, v in (parts or {}).items())
    return f"{step} {epoch} {lr:.9e} {loss:.9e}{extra}"


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] image to size x size (no-op when already that size)."""
    C, H, W = image.shape
    if (H, W) == (size, size):
        return image
    out = ndimage.zoom(image.astype(np.float64), (1, size / H, size / W), order=1, mode="nearest")
    return out.astype(image.dtype)


def _load_all(dataset: Dataset) -> list:
    if len(dataset) == 0:
        raise DataError(f"split {dataset.split!r} under {dataset.root} has no images")
    out = []
    for s in dataset.samples:
        try:
            out.append(s.load().data)
        except OSError as exc:
            raise DataError(f"cannot read image {s.path}: {exc}") from exc
    return out


def _batches(rng: np.random.Generator, n: int, batch: int) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _clip(params, max_norm: Optional[float]) -> None:
    if max_norm is None:
        return
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def _save(ckpt: Checkpoint, out_dir, name: str) -> None:
    if out_dir is not None:
        ckpt.save(Path(out_dir) / name)


def pretrain(cfg: RunConfig, dataset: Dataset, seed: Optional[int] = None, out_dir=None,
             on_step: Optional[Callable[[str], None]] = None) -> TrainResult:
    """MAE pre-training; checkpoints ``last`` after every epoch and ``mae`` at the end."""
    seed = cfg.seed if seed is None else seed
    pc = cfg.pretrain
    images = [resize(img, cfg.model.image_size) for img in _load_all(dataset)]
    model = MAE(cfg.model, seed=seed)
    opt = AdamW(model.named_parameters(), pc.betas, pc.weight_decay)
    rng = np.random.default_rng([seed, 1])
    steps_per_epoch = math.ceil(len(images) / pc.batch_size)
    schedule = pc.schedule(steps_per_epoch)
    peak = pc.peak_lr
    log, step = [], 0
    for epoch in range(pc.epochs):
        for batch in _batches(rng, len(images), pc.batch_size):
            lr = lr_at(schedule, step, peak)
            opt.zero_grad()
            total = 0.0
            for i in batch:
                img = hflip(images[i]) if rng.random() < pc.flip_prob else images[i]
                loss = model.loss(img, int(rng.integers(2 ** 63)))
                total += loss.item()
                T.backward(loss * (1.0 / len(batch)))
            _clip(opt.params, pc.grad_clip)
            opt.step(lr)
            line = format_log(step, epoch, lr, total / len(batch))
            log.append(line)
            if on_step:
                on_step(line)
            step += 1
        _save(model.to_checkpoint(step, rng.bit_generator.state), out_dir, LAST)
    ckpt = model.to_checkpoint(step, rng.bit_generator.state)
    _save(ckpt, out_dir, "mae")
    return TrainResult(ckpt, log)


def check_encoder(cfg: RunConfig, ckpt: Checkpoint) -> None:
    """Fail before training when an encoder checkpoint cannot seed the configured backbone."""
    if ckpt.kind not in ("encoder", "mae"):
        raise CheckpointError(f"expected an encoder checkpoint, got kind {ckpt.kind!r}")
    Detector(cfg.detector_config()).load_encoder(ckpt)


def finetune(cfg: RunConfig, dataset: Dataset, encoder: Optional[Checkpoint] = None,
             seed: Optional[int] = None, out_dir=None,
             on_step: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Detector training; without ``encoder`` the backbone starts from random init."""
    seed = cfg.seed if seed is None else seed
    fc = cfg.finetune
    images = _load_all(dataset)
    steps_per_epoch = math.ceil(len(images) / fc.batch_size)
    try:
        schedule = fc.schedule(steps_per_epoch)
    except ValueError as exc:
        raise ConfigError(f"finetune schedule: {exc}") from exc
    model = Detector(cfg.detector_config(), seed=seed)
    provenance = {"init": "scratch"}
    if encoder is not None:
        model.load_encoder(encoder)
        provenance = {"init": "encoder", "encoder_sha256": encoder.digest()}
    opt = AdamW(model.named_parameters(), fc.betas, fc.weight_decay)
    rng = np.random.default_rng([seed, 2])
    log, step = [], 0
    for epoch in range(fc.epochs):
        for batch in _batches(rng, len(images), fc.batch_size):
            lr = lr_at(schedule, step, fc.lr)
            opt.zero_grad()
            sums: dict = {}
            for i in batch:
                s = dataset.samples[i]
                img, boxes = images[i], s.boxes
                if rng.random() < fc.flip_prob:
                    img, boxes = hflip(img), B.flip_boxes(boxes, img.shape[-1])
                losses = model.losses(img, boxes, s.labels, rng)
                for k, v in losses.items():
                    sums[k] = sums.get(k, 0.0) + v.item()
                T.backward(losses["total"] * (1.0 / len(batch)))
            _clip(opt.params, fc.grad_clip)
            opt.step(lr)
            total = sums.pop("total") / len(batch)
            line = format_log(step, epoch, lr, total, {k: v / len(batch) for k, v in sums.items()})
            log.append(line)
            if on_step:
                on_step(line)
            step += 1
        _save(model.to_checkpoint(step, rng.bit_generator.state, provenance), out_dir, LAST)
    ckpt = model.to_checkpoint(step, rng.bit_generator.state, provenance)
    _save(ckpt, out_dir, "detector")
    return TrainResult(ckpt, log)


def run_detector(model: Detector, dataset: Dataset, score_thresh: Optional[float] = None) -> list:
    return [model.detect(img, s.image_id, score_thresh)
            for s, img in zip(dataset.samples, _load_all(dataset))]


def as_eval_dets(dets) -> list:
    return [cocoeval.ImageDets(d.image_id, d.boxes, d.scores, d.labels) for d in dets]


def ground_truth(dataset: Dataset) -> list:
    return [cocoeval.ImageGT(s.image_id, s.boxes, s.labels) for s in dataset.samples]


def eval_config(cfg: RunConfig) -> cocoeval.EvalConfig:
    return cocoeval.EvalConfig(recall_samples=cfg.eval.recall_samples, max_dets=cfg.eval.max_dets)


def evaluate_detector(model: Detector, dataset: Dataset, cfg: RunConfig,
                      score_thresh: Optional[float] = None) -> tuple[list, dict]:
    dets = run_detector(model, dataset, score_thresh)
    metrics = cocoeval.summarize(as_eval_dets(dets), ground_truth(dataset), eval_config(cfg),
                                 num_classes=len(dataset.categories))
    return dets, metrics

