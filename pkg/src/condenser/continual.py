"""Class-incremental evaluation over a condensed set.

The condensed pool doubles as the replay memory: at each step the seen
classes grow by a fixed amount, a student is retrained from scratch on
every stored image of the seen classes, and accuracy is measured on the
validation samples of exactly those classes. With enough memory the
final step trains on the whole pool, so a one-step run is the natural
joint-training reference.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import CondensedDataset, LabeledDataset
from .errors import ConfigurationError
from .evaluate import EvalConfig, top1, train_student
from .relabel import CropLabelArchive


def _filter_val(val: LabeledDataset, keep_classes) -> LabeledDataset:
    keep = sorted(int(c) for c in keep_classes)
    mask = np.isin(val.labels.numpy(), keep)
    idx = np.nonzero(mask)[0].tolist()
    return LabeledDataset(
        name=val.name,
        split=f"{val.split}[{len(keep)} classes]",
        resolution=val.resolution,
        num_classes=val.num_classes,
        images=val.images[idx],
        labels=val.labels[idx],
        normalization=val.normalization,
        class_names=val.class_names,
    )


def class_incremental_run(
    condensed: CondensedDataset,
    archive: CropLabelArchive,
    steps: int,
    cfg: EvalConfig,
    val: LabeledDataset,
    seed: int = 0,
    classes_per_step: int | None = None,
    memory_per_class: int | None = None,
) -> list[dict]:
    """Run the incremental protocol; returns one curve row per step.

    Class order is a seed-shuffled permutation. Classes must divide
    evenly across steps. ``memory_per_class`` caps how many condensed
    images per class the student may replay.
    """
    num_classes = len(condensed.class_ids)
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if classes_per_step is None:
        if num_classes % steps != 0:
            raise ConfigurationError(
                f"{num_classes} classes do not divide evenly into {steps} steps"
            )
        classes_per_step = num_classes // steps
    if classes_per_step * steps != num_classes:
        raise ConfigurationError(
            f"steps*classes_per_step = {steps * classes_per_step} must equal "
            f"{num_classes} classes"
        )
    order = np.random.default_rng(seed).permutation(
        np.array(sorted(condensed.class_ids))
    ).tolist()
    curve = []
    for t in range(steps):
        seen = order[: (t + 1) * classes_per_step]
        sub_cd, indices = condensed.subset(seen, per_class=memory_per_class)
        sub_archive = archive.subset(indices)
        student, history = train_student(sub_cd, sub_archive, replace(cfg), val=None)
        seen_val = _filter_val(val, seen)
        acc = top1(student, seen_val)
        curve.append(
            {
                "step": t + 1,
                "classes_seen": len(seen),
                "top1": acc,
                "train_loss": history[-1]["train_loss"],
            }
        )
    return curve
