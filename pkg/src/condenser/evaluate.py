"""Train and score student models on a condensed set.

Students consume the pre-generated crop archive: at epoch e, image i is
shown exactly as the view recorded in archive[i][e], with its stored
soft label. There is no student-side temperature; the loss is plain
soft-target cross-entropy. ``label_mode='hard'`` instead trains on the
archive's argmax labels through the standard CE path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .crops import apply_hflips, crop_and_resize, sample_cutmix_box
from .data import CondensedDataset, LabeledDataset
from .errors import ConfigurationError, DivergenceError
from .models import BackboneSpec, Checkpoint, build_backbone
from .optim_utils import cosine_lr, make_optimizer, set_lr
from .relabel import CropLabelArchive


@dataclass
class EvalConfig:
    student: BackboneSpec = None
    epochs: int = 100
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 64
    label_mode: str = "soft"
    cutmix_prob: float = 0.0
    cutmix_beta: float = 1.0
    seed: int = 0

    def validate(self):
        if self.student is None:
            raise ConfigurationError("EvalConfig.student spec is required")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.label_mode not in ("soft", "hard"):
            raise ConfigurationError(f"label_mode must be soft or hard, got {self.label_mode!r}")
        if not (0.0 <= self.cutmix_prob <= 1.0):
            raise ConfigurationError("cutmix_prob must lie in [0, 1]")
        if self.label_mode == "hard" and self.cutmix_prob > 0:
            raise ConfigurationError("cutmix requires soft labels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["student"] = self.student.to_dict()
        d["betas"] = list(self.betas)
        return d


def kd_loss(log_probs: torch.Tensor, soft_targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against a soft distribution: -sum(q * log p).

    Accepts a single (C,) pair or batched (B, C) inputs; batches are
    averaged. A uniform target against a uniform prediction over k
    classes gives log k.
    """
    if log_probs.shape != soft_targets.shape:
        raise ConfigurationError(
            f"shape mismatch: log_probs {tuple(log_probs.shape)} vs "
            f"targets {tuple(soft_targets.shape)}"
        )
    per_sample = -(soft_targets * log_probs).sum(dim=-1)
    return per_sample.mean() if per_sample.dim() > 0 else per_sample


def top1(model, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy over a split; evaluation order has no effect."""
    if isinstance(model, Checkpoint):
        model = model.build_model()
    model.eval()
    dtype = next(model.parameters()).dtype
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size].to(dtype)
            y = dataset.labels[start : start + batch_size]
            correct += int((model(x).argmax(dim=1) == y).sum())
    return correct / len(dataset)


def _epoch_views(condensed, archive, indices, epoch, output_size, dtype):
    rects, flips, soft = [], [], []
    for i in indices:
        rec = archive.record(i, epoch)
        rects.append(rec.rect)
        flips.append(rec.hflip)
        soft.append(rec.soft_label)
    x = crop_and_resize(condensed.images[indices].to(dtype), rects, size=output_size)
    x = apply_hflips(x, flips)
    targets = torch.from_numpy(np.stack(soft)).to(dtype)
    return x, targets


def train_student(
    condensed: CondensedDataset,
    archive: CropLabelArchive,
    cfg: EvalConfig,
    val: LabeledDataset | None = None,
):
    """Train a fresh student on archived views; returns (checkpoint, history).

    history has one row per epoch: mean train loss and, when ``val`` is
    given, top-1 accuracy after that epoch.
    """
    cfg.validate()
    if archive.num_images != len(condensed):
        raise ConfigurationError(
            f"archive covers {archive.num_images} images, condensed set has {len(condensed)}"
        )
    if cfg.epochs > archive.epochs:
        raise ConfigurationError(
            f"requested {cfg.epochs} epochs but the archive stores crops for "
            f"{archive.epochs}; regenerate it with more epochs"
        )
    if archive.num_classes != condensed.num_classes:
        raise ConfigurationError(
            f"archive labels span {archive.num_classes} classes, condensed set "
            f"declares {condensed.num_classes}"
        )
    output_size = int(archive.meta["crop_params"]["output_size"])
    if cfg.student.input_resolution != output_size:
        raise ConfigurationError(
            f"student expects {cfg.student.input_resolution}px inputs but archive "
            f"views are {output_size}px"
        )
    model = build_backbone(cfg.student, seed=cfg.seed)
    dtype = next(model.parameters()).dtype
    optimizer = make_optimizer(
        cfg.optimizer, model.parameters(), cfg.lr,
        weight_decay=cfg.weight_decay, momentum=cfg.momentum, betas=cfg.betas,
    )
    n = len(condensed)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    perm_gen = torch.Generator().manual_seed(cfg.seed)
    mix_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=perm_gen).tolist()
        epoch_losses = []
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, targets = _epoch_views(condensed, archive, idx, epoch, output_size, dtype)
            if cfg.cutmix_prob > 0 and mix_rng.random() < cfg.cutmix_prob:
                lam = float(mix_rng.beta(cfg.cutmix_beta, cfg.cutmix_beta))
                perm = torch.from_numpy(mix_rng.permutation(x.shape[0]))
                top, left, bh, bw = sample_cutmix_box(x.shape[-2], x.shape[-1], lam, mix_rng)
                x = x.clone()
                x[:, :, top : top + bh, left : left + bw] = x[perm][:, :, top : top + bh, left : left + bw]
                lam = 1.0 - (bh * bw) / (x.shape[-2] * x.shape[-1])
                targets = lam * targets + (1.0 - lam) * targets[perm]
            set_lr(optimizer, cosine_lr(cfg.lr, step, total_steps))
            logits = model(x)
            if cfg.label_mode == "soft":
                loss = kd_loss(F.log_softmax(logits, dim=1), targets)
            else:
                loss = F.cross_entropy(logits, targets.argmax(dim=1))
            loss_val = float(loss.detach())
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite student loss at epoch {epoch}, step {b}",
                    diagnostics={"epoch": epoch, "step": b,
                                 "last_finite_loss": epoch_losses[-1] if epoch_losses else None},
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss_val)
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        if val is not None:
            row["val_top1"] = top1(model, val)
        history.append(row)
    model.eval()
    meta = {
        "stage": "eval",
        "teacher_id": archive.meta.get("teacher_id"),
        "label_mode": cfg.label_mode,
        "epochs_trained": cfg.epochs,
        "val_top1": history[-1].get("val_top1") if history else None,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    return Checkpoint.from_model(model, cfg.student, meta=meta), history
