"""Train the compression model that a recovery run will later mine.

Plain cross-entropy training; Mixup/CutMix label mixing and random
resized crops are opt-in. Batching is done by in-memory index
permutation from an explicit generator, so a fixed seed reproduces the
run bit for bit on a single device.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .crops import crop_and_resize, sample_crop, sample_cutmix_box
from .data import LabeledDataset
from .errors import ConfigurationError, DivergenceError
from .evaluate import top1
from .models import BackboneSpec, Checkpoint, build_backbone
from .optim_utils import cosine_lr, make_optimizer, set_lr

AUGMENTATIONS = ("random_resized_crop", "mixup", "cutmix")


@dataclass
class SqueezeConfig:
    optimizer: str = "sgd"
    lr: float = 0.2
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 256
    epochs: int = 50
    augmentations: tuple[str, ...] = ()
    mixup_alpha: float = 0.2
    cutmix_beta: float = 1.0
    crop_scale_range: tuple[float, float] = (0.08, 1.0)
    crop_ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        for a in self.augmentations:
            if a not in AUGMENTATIONS:
                raise ConfigurationError(
                    f"unknown augmentation {a!r}; expected subset of {AUGMENTATIONS}"
                )
        if self.mixup_alpha <= 0 or self.cutmix_beta <= 0:
            raise ConfigurationError("mixup_alpha and cutmix_beta must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("betas", "crop_scale_range", "crop_ratio_range", "augmentations"):
            d[k] = list(d[k])
        return d


def _mixed_ce(logits, y_a, y_b, lam: float):
    return lam * F.cross_entropy(logits, y_a) + (1.0 - lam) * F.cross_entropy(logits, y_b)


def squeeze_train(
    train: LabeledDataset,
    val: Optional[LabeledDataset],
    spec: BackboneSpec,
    cfg: SqueezeConfig,
) -> Checkpoint:
    """Train a backbone on the full dataset and freeze it as a checkpoint.

    The checkpoint keeps the BN running statistics plus enough metadata
    (dataset name, normalization, val accuracy) for the later stages to
    validate against.
    """
    cfg.validate()
    spec.validate()
    if train.resolution != spec.input_resolution:
        raise ConfigurationError(
            f"dataset resolution {train.resolution} does not match "
            f"spec resolution {spec.input_resolution}"
        )
    if train.num_classes > spec.num_classes:
        raise ConfigurationError(
            f"dataset has {train.num_classes} classes, spec allows {spec.num_classes}"
        )
    model = build_backbone(spec, seed=cfg.seed)
    model.train()
    optimizer = make_optimizer(
        cfg.optimizer, model.parameters(), cfg.lr,
        weight_decay=cfg.weight_decay, momentum=cfg.momentum, betas=cfg.betas,
    )
    n = len(train)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    perm_gen = torch.Generator().manual_seed(cfg.seed)
    aug_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    use_rrc = "random_resized_crop" in cfg.augmentations
    mixers = [m for m in ("mixup", "cutmix") if m in cfg.augmentations]
    last_finite = None
    step = 0
    final_loss = None
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=perm_gen)
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = train.images[idx]
            y = train.labels[idx]
            if use_rrc:
                rects = [
                    sample_crop(train.resolution, train.resolution,
                                cfg.crop_scale_range, cfg.crop_ratio_range, aug_rng)
                    for _ in range(x.shape[0])
                ]
                x = crop_and_resize(x, rects, size=train.resolution)
            mixer = None
            if mixers:
                mixer = mixers[int(aug_rng.integers(len(mixers)))]
            if mixer == "mixup":
                lam = float(aug_rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
                perm = torch.from_numpy(aug_rng.permutation(x.shape[0]))
                x = lam * x + (1.0 - lam) * x[perm]
                y_b = y[perm]
            elif mixer == "cutmix":
                lam = float(aug_rng.beta(cfg.cutmix_beta, cfg.cutmix_beta))
                perm = torch.from_numpy(aug_rng.permutation(x.shape[0]))
                top, left, bh, bw = sample_cutmix_box(x.shape[-2], x.shape[-1], lam, aug_rng)
                x = x.clone()
                x[:, :, top : top + bh, left : left + bw] = x[perm][:, :, top : top + bh, left : left + bw]
                lam = 1.0 - (bh * bw) / (x.shape[-2] * x.shape[-1])
                y_b = y[perm]
            set_lr(optimizer, cosine_lr(cfg.lr, step, total_steps))
            logits = model(x)
            if mixer is None:
                loss = F.cross_entropy(logits, y)
            else:
                loss = _mixed_ce(logits, y, y_b, lam)
            loss_val = float(loss.detach())
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, step {b}",
                    diagnostics={"epoch": epoch, "step": b, "last_finite_loss": last_finite},
                )
            last_finite = loss_val
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            final_loss = loss_val
    model.eval()
    val_top1 = top1(model, val) if val is not None else None
    meta = {
        "stage": "squeeze",
        "dataset": train.name,
        "normalization": train.normalization.to_dict(),
        "epochs_trained": cfg.epochs,
        "augmentations_used": list(cfg.augmentations),
        "val_top1": val_top1,
        "final_train_loss": final_loss,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    return Checkpoint.from_model(model, spec, meta=meta)


def evaluate_checkpoint(checkpoint, val: LabeledDataset, batch_size: int = 256) -> float:
    """Deterministic top-1 accuracy of a stored checkpoint on a split."""
    model = checkpoint.build_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    return top1(model, val, batch_size=batch_size)
