"""Synthesize a condensed set from a frozen model's batch-norm statistics.

Images start as Gaussian noise and are optimized so that (a) the frozen
model assigns them their target classes and (b) the per-layer batch
statistics they induce match the stored running statistics. Each step
optimizes one randomly cropped-and-resized view per image; pixels
outside a step's crop must come out of that step bitwise unchanged.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .crops import crop_and_resize, sample_crop
from .data import CondensedDataset, Normalization, resolve_normalization, save_condensed
from .errors import ConfigurationError, DivergenceError, StructureError
from .hashing import mapping_hash
from .models import BNLayerStats, Checkpoint, iter_bn_layers
from .optim_utils import cosine_lr, set_lr

LOSS_CSV_COLUMNS = ("batch", "iter", "ce", "r_bn", "r_tv", "r_l2", "total")


@dataclass
class RecoverConfig:
    ipc: int = 10
    iterations: int = 1000
    batch_size: int = 100
    lr: float = 0.1
    betas: tuple[float, float] = (0.5, 0.9)
    alpha_bn: float = 1.0
    alpha_tv: float = 0.0
    alpha_l2: float = 0.0
    tv_beta: float = 2.0
    crop_scale_range: tuple[float, float] = (0.08, 1.0)
    crop_ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    init_mean: float = 0.0
    init_std: float = 1.0
    clamp_unit_range: bool = False
    seed: int = 0

    def validate(self):
        if self.ipc < 1:
            raise ConfigurationError("ipc must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        for name in ("alpha_bn", "alpha_tv", "alpha_l2"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.tv_beta <= 0:
            raise ConfigurationError("tv_beta must be positive")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"bad crop scale range {self.crop_scale_range}")
        if not (0.0 < self.crop_ratio_range[0] <= self.crop_ratio_range[1]):
            raise ConfigurationError(f"bad crop ratio range {self.crop_ratio_range}")
        if self.init_std < 0:
            raise ConfigurationError("init_std must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("betas", "crop_scale_range", "crop_ratio_range"):
            d[k] = list(d[k])
        return d


@dataclass
class RecoveryLossBreakdown:
    """Scalar loss terms of one step; ``total`` recomposes exactly.

    ``total`` is computed from these already-rounded floats, so
    ``ce + alpha_bn*r_bn + alpha_tv*r_tv + alpha_l2*r_l2`` reproduces it
    bit for bit.
    """

    ce: float
    r_bn: float
    r_tv: float
    r_l2: float
    total: float


@dataclass
class SyntheticBatch:
    """Learnable images, their fixed class targets, and optimizer state."""

    images: torch.Tensor
    targets: torch.Tensor
    iteration: int = 0
    optimizer: object = field(default=None, repr=False)
    last_breakdown: RecoveryLossBreakdown | None = field(default=None, repr=False)
    last_rects: list | None = field(default=None, repr=False)
    clamp_bounds: tuple | None = field(default=None, repr=False)

    def ensure_optimizer(self, cfg: RecoverConfig):
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(
                [self.images], lr=cfg.lr, betas=tuple(cfg.betas)
            )
        return self.optimizer


def init_synthetic(
    ipc: int,
    class_ids,
    resolution: int,
    cfg: RecoverConfig,
    seed: int | None = None,
) -> list[SyntheticBatch]:
    """Draw Gaussian-noise images with round-robin class targets.

    The set is split into batches of ``cfg.batch_size``; round-robin
    assignment keeps every batch class-balanced.
    """
    class_ids = [int(c) for c in class_ids]
    if len(set(class_ids)) != len(class_ids) or not class_ids:
        raise ConfigurationError("class_ids must be non-empty and unique")
    total = ipc * len(class_ids)
    g = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    images = cfg.init_mean + cfg.init_std * torch.randn(
        total, 3, resolution, resolution, generator=g
    )
    targets = torch.tensor(
        [class_ids[m % len(class_ids)] for m in range(total)], dtype=torch.int64
    )
    batches = []
    for start in range(0, total, cfg.batch_size):
        chunk = images[start : start + cfg.batch_size].clone().requires_grad_(True)
        batches.append(SyntheticBatch(images=chunk, targets=targets[start : start + cfg.batch_size]))
    return batches


def tv_regularizer(x: torch.Tensor, beta: float = 2.0) -> torch.Tensor:
    """Total variation: sum over pixels of (dh^2 + dv^2)^(beta/2).

    Differences past the right/bottom border count as zero. Channels are
    summed; a batch dimension, if present, is averaged so the value does
    not scale with batch size.
    """
    if beta <= 0:
        raise ConfigurationError("tv beta must be positive")
    if x.dim() == 2:
        x = x.unsqueeze(0)
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
    dh = torch.zeros_like(x)
    dv = torch.zeros_like(x)
    dh[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    dv[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    sq = dh * dh + dv * dv
    if beta == 2.0:
        per_image = sq.sum(dim=(1, 2, 3))
    else:
        per_image = sq.pow(beta / 2.0).sum(dim=(1, 2, 3))
    return per_image.mean()


def l2_regularizer(x: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of each flattened image, averaged over the batch."""
    if x.dim() <= 3:
        return torch.linalg.vector_norm(x)
    return torch.linalg.vector_norm(x.flatten(1), dim=1).mean()


def _as_stat_pair(entry):
    if isinstance(entry, BNLayerStats):
        return entry.running_mean, entry.running_var
    mean, var = entry
    return mean, var


def bn_matching_loss(batch_stats, reference_stats) -> torch.Tensor:
    """Sum over layers of ||mu - mu_ref||_2 + ||var - var_ref||_2.

    ``batch_stats`` and ``reference_stats`` are parallel sequences of
    per-layer (mean, var); reference entries may be BNLayerStats. Any
    layer-count or channel-shape mismatch is a structural error.
    """
    batch_stats = list(batch_stats)
    reference_stats = list(reference_stats)
    if len(batch_stats) != len(reference_stats):
        raise StructureError(
            f"{len(batch_stats)} captured BN layers vs "
            f"{len(reference_stats)} reference layers"
        )
    total = None
    for i, (b, r) in enumerate(zip(batch_stats, reference_stats)):
        mean, var = _as_stat_pair(b)
        ref_mean, ref_var = _as_stat_pair(r)
        if mean.shape != ref_mean.shape or var.shape != ref_var.shape:
            raise StructureError(
                f"BN layer {i}: channel shape {tuple(mean.shape)} does not "
                f"match reference {tuple(ref_mean.shape)}"
            )
        term = torch.linalg.vector_norm(mean - ref_mean) + torch.linalg.vector_norm(
            var - ref_var
        )
        total = term if total is None else total + term
    if total is None:
        raise StructureError("no BN layers to match")
    return total


class _BNStatsCapture:
    """Forward hooks recording biased batch stats entering each BN layer."""

    def __init__(self, model):
        self.stats = []
        self.handles = []
        for _, module in iter_bn_layers(model):
            self.handles.append(
                module.register_forward_hook(self._make_hook(len(self.handles)))
            )
            self.stats.append(None)

    def _make_hook(self, index):
        def hook(module, inputs, output):
            x = inputs[0]
            reduce_dims = [0] + list(range(2, x.dim()))
            mean = x.mean(dim=reduce_dims)
            var = x.var(dim=reduce_dims, unbiased=False)
            self.stats[index] = (mean, var)

        return hook

    def close(self):
        for h in self.handles:
            h.remove()
        self.handles = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def composite_loss(
    images: torch.Tensor,
    targets: torch.Tensor | None,
    model,
    cfg: RecoverConfig,
    crops=None,
    bn_reference=None,
):
    """Recovery loss on the given crop views (full images when ``crops``
    is None). Returns (differentiable total, RecoveryLossBreakdown).

    CE and both priors are evaluated on the same resized views the model
    sees; the BN term compares hook-captured batch statistics against
    ``bn_reference`` (default: the model's own running statistics).
    """
    if model.training:
        raise ConfigurationError("recovery requires the model in eval mode")
    if bn_reference is None:
        from .models import extract_bn_stats

        bn_reference = extract_bn_stats(model)
    if crops is None:
        views = images
    else:
        views = crop_and_resize(images, crops, size=images.shape[-1])
    with _BNStatsCapture(model) as capture:
        logits = model(views)
    if targets is None:
        ce = images.new_zeros(())
    else:
        ce = F.cross_entropy(logits, targets)
    r_bn = bn_matching_loss(capture.stats, bn_reference)
    r_tv = tv_regularizer(views, beta=cfg.tv_beta)
    r_l2 = l2_regularizer(views)
    total = ce + cfg.alpha_bn * r_bn + cfg.alpha_tv * r_tv + cfg.alpha_l2 * r_l2
    ce_f, r_bn_f, r_tv_f, r_l2_f = (float(t.detach()) for t in (ce, r_bn, r_tv, r_l2))
    breakdown = RecoveryLossBreakdown(
        ce=ce_f,
        r_bn=r_bn_f,
        r_tv=r_tv_f,
        r_l2=r_l2_f,
        total=ce_f + cfg.alpha_bn * r_bn_f + cfg.alpha_tv * r_tv_f + cfg.alpha_l2 * r_l2_f,
    )
    return total, breakdown


def recover_step(batch: SyntheticBatch, model, cfg: RecoverConfig, rng,
                 bn_reference=None) -> RecoveryLossBreakdown:
    """One crop-local optimization step on a synthetic batch.

    Samples an independent crop per image, updates only those regions,
    and restores everything else from a pre-step snapshot, so pixels
    outside the crops are bitwise untouched (Adam state would otherwise
    drift them once they have been inside any earlier crop).
    """
    images = batch.images
    h, w = images.shape[-2], images.shape[-1]
    rects = [
        sample_crop(h, w, cfg.crop_scale_range, cfg.crop_ratio_range, rng)
        for _ in range(images.shape[0])
    ]
    total, breakdown = composite_loss(
        images, batch.targets, model, cfg, crops=rects, bn_reference=bn_reference
    )
    if not np.isfinite(breakdown.total):
        raise DivergenceError(
            f"non-finite recovery loss at iteration {batch.iteration}",
            diagnostics={
                "iteration": batch.iteration,
                "breakdown": asdict(breakdown),
                "last_finite": asdict(batch.last_breakdown) if batch.last_breakdown else None,
            },
        )
    optimizer = batch.ensure_optimizer(cfg)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    with torch.no_grad():
        snapshot = images.detach().clone()
        optimizer.step()
        mask = torch.zeros(images.shape[0], 1, h, w, dtype=torch.bool)
        for i, (top, left, ch, cw) in enumerate(rects):
            mask[i, :, top : top + ch, left : left + cw] = True
        updated = images.detach()
        if batch.clamp_bounds is not None:
            lo, hi = batch.clamp_bounds
            updated = torch.clamp(updated, min=lo, max=hi)
        images.data = torch.where(mask, updated, snapshot)
    batch.iteration += 1
    batch.last_breakdown = breakdown
    batch.last_rects = rects
    return breakdown


def recover(
    checkpoint: Checkpoint,
    cfg: RecoverConfig,
    class_ids=None,
    out_dir=None,
) -> CondensedDataset:
    """Run full recovery against a frozen checkpoint model.

    Writes the condensed set, per-step loss CSV, and previews under
    ``out_dir`` when given; on divergence, finished batches are persisted
    there before the error propagates.
    """
    cfg.validate()
    spec = checkpoint.spec
    model = checkpoint.build_model()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    bn_reference = checkpoint.bn_stats
    if class_ids is None:
        class_ids = list(range(spec.num_classes))
    class_ids = [int(c) for c in class_ids]
    if any(c < 0 or c >= spec.num_classes for c in class_ids):
        raise ConfigurationError(
            f"class ids must lie in [0, {spec.num_classes}); got {class_ids}"
        )
    norm_dict = checkpoint.meta.get("normalization")
    normalization = (
        Normalization.from_dict(norm_dict) if norm_dict else resolve_normalization("default")
    )
    batches = init_synthetic(cfg.ipc, class_ids, spec.input_resolution, cfg)
    if cfg.clamp_unit_range:
        bounds = normalization.raw_unit_range()
        for batch in batches:
            batch.clamp_bounds = bounds
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    final_totals = []
    for bi, batch in enumerate(batches):
        batch.ensure_optimizer(cfg)
        try:
            for t in range(cfg.iterations):
                set_lr(batch.optimizer, cosine_lr(cfg.lr, t, cfg.iterations))
                bd = recover_step(batch, model, cfg, rng, bn_reference=bn_reference)
                rows.append((bi, t, bd.ce, bd.r_bn, bd.r_tv, bd.r_l2, bd.total))
        except DivergenceError as e:
            if out_dir is not None:
                _persist_partial(out_dir, batches[:bi], class_ids, e)
            raise
        final_totals.append(batch.last_breakdown.total)
    images = torch.cat([b.images.detach() for b in batches])
    targets = torch.cat([b.targets for b in batches])
    order = torch.argsort(targets, stable=True)
    cd = CondensedDataset(
        ipc=cfg.ipc,
        class_ids=sorted(class_ids),
        num_classes=spec.num_classes,
        resolution=spec.input_resolution,
        images=images[order].contiguous(),
        hard_labels=targets[order].contiguous(),
        normalization=normalization,
        provenance={
            "stage": "recover",
            "teacher_id": checkpoint.content_id(),
            "config_hash": mapping_hash(cfg.to_dict()),
            "config": cfg.to_dict(),
            "iterations": cfg.iterations,
            "final_totals": final_totals,
        },
    )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_condensed(cd, out_dir / "condensed")
        write_loss_csv(out_dir / "loss.csv", rows)
    return cd


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CSV_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_loss_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            {
                "batch": int(r["batch"]),
                "iter": int(r["iter"]),
                **{k: float(r[k]) for k in ("ce", "r_bn", "r_tv", "r_l2", "total")},
            }
            for r in reader
        ]


def _persist_partial(out_dir: Path, completed_batches, class_ids, error):
    """Dump finished batches raw; a partial set cannot honor ipc-per-class."""
    partial = Path(out_dir) / "partial"
    partial.mkdir(parents=True, exist_ok=True)
    if completed_batches:
        images = torch.cat([b.images.detach() for b in completed_batches]).numpy()
        targets = torch.cat([b.targets for b in completed_batches]).numpy()
        np.save(partial / "images.npy", images)
        np.save(partial / "targets.npy", targets)
    (partial / "abort.json").write_text(
        json.dumps(
            {
                "completed_batches": len(completed_batches),
                "class_ids": list(class_ids),
                "diagnostics": error.diagnostics,
            },
            sort_keys=True,
            indent=1,
        )
    )
