"""Pre-generate crop-level soft labels for a condensed set.

For every (image, epoch) pair a crop rectangle and flip flag are drawn
from a seed that depends only on (seed, image, epoch); the teacher's
temperature-softened prediction on exactly that view is stored. Student
training later replays the same views, so labels and pixels always
agree. Regenerating an archive with the same inputs is byte-identical.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .crops import CropParams, apply_hflips, crop_and_resize, sample_crop
from .data import CondensedDataset
from .errors import ConfigurationError, IntegrityError
from .models import Checkpoint

ARCHIVE_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class CropRecord:
    """One stored view: where it was cut, whether it was flipped, and the
    teacher's distribution over classes for it."""

    epoch: int
    rect: tuple[int, int, int, int]
    hflip: bool
    soft_label: np.ndarray


@dataclass
class CropLabelArchive:
    """records[i][e] is the CropRecord of image i at training epoch e."""

    meta: dict
    records: list[list[CropRecord]] = field(repr=False)

    @property
    def num_images(self) -> int:
        return len(self.records)

    @property
    def epochs(self) -> int:
        return len(self.records[0]) if self.records else 0

    @property
    def num_classes(self) -> int:
        return int(self.meta["num_classes"])

    def record(self, image_index: int, epoch: int) -> CropRecord:
        if epoch >= self.epochs:
            raise ConfigurationError(
                f"archive holds {self.epochs} epochs of crops; epoch {epoch} requested"
            )
        return self.records[image_index][epoch]

    def subset(self, indices) -> "CropLabelArchive":
        meta = dict(self.meta, num_images=len(indices), subset=True)
        return CropLabelArchive(meta=meta, records=[self.records[i] for i in indices])

    def labels_equal(self, other: "CropLabelArchive", atol: float = 0.0) -> bool:
        if self.num_images != other.num_images or self.epochs != other.epochs:
            return False
        for mine, theirs in zip(self.records, other.records):
            for a, b in zip(mine, theirs):
                if a.rect != b.rect or a.hflip != b.hflip:
                    return False
                if not np.allclose(a.soft_label, b.soft_label, rtol=0.0, atol=atol):
                    return False
        return True


def generate_crop_plan(num_images: int, epochs: int, params: CropParams, seed: int):
    """Deterministic (rect, flip) for every (image, epoch) pair.

    Each pair gets its own generator keyed by (seed, image, epoch), so
    any single record can be regenerated without replaying the rest.
    """
    params.validate()
    plan = []
    for i in range(num_images):
        per_image = []
        for e in range(epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(i, e))
            )
            rect = sample_crop(
                params.output_size, params.output_size,
                params.scale_range, params.ratio_range, rng,
            )
            flip = bool(rng.random() < params.hflip_prob)
            per_image.append((rect, flip))
        plan.append(per_image)
    return plan


def relabel(
    condensed: CondensedDataset,
    teacher,
    tau: float,
    epochs: int,
    crop_params: CropParams | None = None,
    seed: int = 0,
    batch_size: int = 256,
) -> CropLabelArchive:
    """Run the teacher over every planned crop and store softened labels."""
    if tau <= 0:
        raise ConfigurationError("temperature must be positive")
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if crop_params is None:
        crop_params = CropParams(output_size=condensed.resolution)
    crop_params.validate()
    teacher_id = None
    if isinstance(teacher, Checkpoint):
        if teacher.spec.input_resolution != crop_params.output_size:
            raise ConfigurationError(
                f"teacher expects {teacher.spec.input_resolution}px inputs but "
                f"crops are resized to {crop_params.output_size}px"
            )
        if teacher.spec.num_classes != condensed.num_classes:
            raise ConfigurationError(
                f"teacher has {teacher.spec.num_classes} outputs, condensed set "
                f"labels span {condensed.num_classes} classes"
            )
        teacher_id = teacher.content_id()
        model = teacher.build_model()
    else:
        model = teacher
    model.eval()
    n = len(condensed)
    plan = generate_crop_plan(n, epochs, crop_params, seed)
    records: list[list[CropRecord]] = [[] for _ in range(n)]
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for e in range(epochs):
            for start in range(0, n, batch_size):
                idx = list(range(start, min(start + batch_size, n)))
                rects = [plan[i][e][0] for i in idx]
                flips = [plan[i][e][1] for i in idx]
                views = crop_and_resize(
                    condensed.images[idx].to(dtype), rects, size=crop_params.output_size
                )
                views = apply_hflips(views, flips)
                soft = F.softmax(model(views) / tau, dim=1).to(torch.float32).numpy()
                for row, i in enumerate(idx):
                    records[i].append(
                        CropRecord(
                            epoch=e,
                            rect=rects[row],
                            hflip=flips[row],
                            soft_label=soft[row].copy(),
                        )
                    )
    meta = {
        "kind": "crop_label_archive",
        "teacher_id": teacher_id,
        "temperature": tau,
        "epochs": epochs,
        "num_images": n,
        "num_classes": condensed.num_classes,
        "crop_params": {
            "output_size": crop_params.output_size,
            "scale_range": list(crop_params.scale_range),
            "ratio_range": list(crop_params.ratio_range),
            "hflip_prob": crop_params.hflip_prob,
        },
        "seed": seed,
        "condensed_checksum": condensed.checksum(),
    }
    return CropLabelArchive(meta=meta, records=records)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array)
    return buf.getvalue()


def save_archive(archive: CropLabelArchive, path, precision: str = "float16",
                 topk: int | None = None) -> Path:
    """Serialize an archive; fp16 storage and top-k sparsification are the
    size/fidelity knobs. Top-k keeps the k largest probabilities per label
    and renormalizes them on load; the tail mass is discarded.
    """
    if precision not in ("float16", "float32"):
        raise ConfigurationError(f"precision must be float16 or float32, got {precision!r}")
    n, e, c = archive.num_images, archive.epochs, archive.num_classes
    if topk is not None and not (1 <= topk <= c):
        raise ConfigurationError(f"topk must be in [1, {c}], got {topk}")
    rects = np.zeros((n, e, 4), dtype=np.int32)
    flips = np.zeros((n, e), dtype=np.uint8)
    labels = np.zeros((n, e, c), dtype=np.float32)
    for i, per_image in enumerate(archive.records):
        for j, rec in enumerate(per_image):
            rects[i, j] = rec.rect
            flips[i, j] = 1 if rec.hflip else 0
            labels[i, j] = rec.soft_label
    store_dtype = np.float16 if precision == "float16" else np.float32
    manifest = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "meta": archive.meta,
        "precision": precision,
        "topk": topk,
        "shape": [n, e, c],
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        _zip_write(zf, "rects.npy", _npy_bytes(rects))
        _zip_write(zf, "flips.npy", _npy_bytes(flips))
        if topk is None:
            _zip_write(zf, "labels.npy", _npy_bytes(labels.astype(store_dtype)))
        else:
            # argsort descending; ties resolve by class index for determinism
            order = np.argsort(-labels, axis=2, kind="stable")[:, :, :topk]
            values = np.take_along_axis(labels, order, axis=2)
            _zip_write(zf, "label_idx.npy", _npy_bytes(order.astype(np.int32)))
            _zip_write(zf, "label_val.npy", _npy_bytes(values.astype(store_dtype)))
    return path


def load_archive(path) -> CropLabelArchive:
    """Load an archive, reconstructing float32 labels that sum to one."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != ARCHIVE_FORMAT_VERSION:
                raise IntegrityError(
                    f"archive format version {manifest.get('format_version')} not supported"
                )
            rects = np.load(io.BytesIO(zf.read("rects.npy")))
            flips = np.load(io.BytesIO(zf.read("flips.npy")))
            n, e, c = manifest["shape"]
            if manifest["topk"] is None:
                labels = np.load(io.BytesIO(zf.read("labels.npy"))).astype(np.float32)
            else:
                idx = np.load(io.BytesIO(zf.read("label_idx.npy")))
                val = np.load(io.BytesIO(zf.read("label_val.npy"))).astype(np.float32)
                labels = np.zeros((n, e, c), dtype=np.float32)
                np.put_along_axis(labels, idx.astype(np.int64), val, axis=2)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, OSError) as err:
        raise IntegrityError(f"cannot read label archive {path}: {err}") from err
    sums = labels.sum(axis=2, keepdims=True)
    if not np.all(sums > 0):
        raise IntegrityError(f"archive {path} holds an all-zero label row")
    labels = labels / sums
    records = []
    for i in range(n):
        per_image = []
        for j in range(e):
            per_image.append(
                CropRecord(
                    epoch=j,
                    rect=tuple(int(v) for v in rects[i, j]),
                    hflip=bool(flips[i, j]),
                    soft_label=labels[i, j],
                )
            )
        records.append(per_image)
    meta = dict(manifest["meta"])
    meta["precision"] = manifest["precision"]
    meta["topk"] = manifest["topk"]
    return CropLabelArchive(meta=meta, records=records)
