"""Dataset ingestion and the on-disk condensed-set format.

Real datasets load from either a class-folder tree
(``root/<split>/<class>/*.png``) or a packed ``root/<split>.npz`` with
uint8 HWC images. Condensed sets are written as a manifest plus a raw
float32 blob; the per-class PNG previews exist for eyeballing only and
are never read back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, DataError, IntegrityError
from .hashing import sha256_file, sha256_tensors, stable_json

CONDENSED_FORMAT_VERSION = 1

# Channel statistics in raw [0,1] space, keyed by dataset name. Unknown
# names fall back to "default"; every stage must use the same entry, or
# clamping and previews silently disagree.
NORMALIZATION_REGISTRY = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "tiny-imagenet": ((0.4802, 0.4481, 0.3975), (0.2770, 0.2691, 0.2821)),
    "imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "default": ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def _tensors(self, like: torch.Tensor):
        shape = (1, 3, 1, 1) if like.dim() == 4 else (3, 1, 1)
        mean = torch.tensor(self.mean, dtype=like.dtype).reshape(shape)
        std = torch.tensor(self.std, dtype=like.dtype).reshape(shape)
        return mean, std

    def normalize(self, raw: torch.Tensor) -> torch.Tensor:
        mean, std = self._tensors(raw)
        return (raw - mean) / std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._tensors(x)
        return x * std + mean

    def raw_unit_range(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized-space per-channel bounds of the raw [0,1] range."""
        mean = torch.tensor(self.mean).reshape(3, 1, 1)
        std = torch.tensor(self.std).reshape(3, 1, 1)
        return (0.0 - mean) / std, (1.0 - mean) / std

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(mean=tuple(d["mean"]), std=tuple(d["std"]))


def resolve_normalization(dataset_name: str) -> Normalization:
    mean, std = NORMALIZATION_REGISTRY.get(
        dataset_name, NORMALIZATION_REGISTRY["default"]
    )
    return Normalization(mean=mean, std=std)


@dataclass
class LabeledDataset:
    """An in-memory split: normalized float32 images plus integer labels."""

    name: str
    split: str
    resolution: int
    num_classes: int
    images: torch.Tensor
    labels: torch.Tensor
    normalization: Normalization
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError("images and labels disagree in length")

    def __len__(self):
        return self.images.shape[0]

    def checksum(self) -> str:
        return sha256_tensors([("images", self.images), ("labels", self.labels)])


def _load_folder_split(split_dir: Path, name: str, split: str) -> tuple:
    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class folders under {split_dir}")
    images, labels, class_names = [], [], []
    resolution = None
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise DataError(f"class folder {cdir} is empty")
        class_names.append(cdir.name)
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except Exception as e:
                raise DataError(f"unreadable image {f}: {e}") from e
            if arr.shape[0] != arr.shape[1]:
                raise DataError(f"non-square image {f}: {arr.shape}")
            if resolution is None:
                resolution = arr.shape[0]
            elif arr.shape[0] != resolution:
                raise DataError(
                    f"mixed resolutions in {split_dir}: {f} is {arr.shape[0]}, "
                    f"expected {resolution}"
                )
            images.append(arr)
            labels.append(label)
    raw = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
    return raw, torch.tensor(labels, dtype=torch.int64), class_names, resolution


def _load_npz_split(npz_path: Path) -> tuple:
    with np.load(npz_path) as z:
        if "images" not in z or "labels" not in z:
            raise DataError(f"{npz_path} must contain 'images' and 'labels'")
        images = z["images"]
        labels = z["labels"].astype(np.int64)
    if images.ndim != 4 or images.shape[-1] != 3 or images.dtype != np.uint8:
        raise DataError(f"{npz_path}: expected uint8 NHWC images, got {images.shape} {images.dtype}")
    raw = torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0
    names = [str(c) for c in sorted(set(labels.tolist()))]
    return raw, torch.from_numpy(labels), names, images.shape[1]


def load_dataset(root, name: str, split: str) -> LabeledDataset:
    """Ingest one split from a folder tree or packed npz under ``root``."""
    root = Path(root)
    split_dir = root / split
    npz_path = root / f"{split}.npz"
    if split_dir.is_dir():
        raw, labels, class_names, resolution = _load_folder_split(split_dir, name, split)
    elif npz_path.is_file():
        raw, labels, class_names, resolution = _load_npz_split(npz_path)
    else:
        raise DataError(f"no {split!r} split found under {root}")
    norm = resolve_normalization(name)
    num_classes = int(labels.max().item()) + 1
    return LabeledDataset(
        name=name,
        split=split,
        resolution=resolution,
        num_classes=num_classes,
        images=norm.normalize(raw),
        labels=labels,
        normalization=norm,
        class_names=class_names,
    )


def make_toy_dataset(
    root,
    num_classes: int = 10,
    train_per_class: int = 100,
    val_per_class: int = 20,
    resolution: int = 32,
    seed: int = 0,
) -> Path:
    """Write a synthetic class-folder dataset of colored oriented gratings.

    Each class has a distinct orientation, frequency, and color tint, so the
    classes stay separable even under aggressive cropping. Intended for
    tests and demos; returns the dataset root.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.arange(resolution, dtype=np.float64),
        np.arange(resolution, dtype=np.float64),
        indexing="ij",
    )
    for split, per_class in (("train", train_per_class), ("val", val_per_class)):
        for c in range(num_classes):
            cdir = root / split / f"class_{c:02d}"
            cdir.mkdir(parents=True, exist_ok=True)
            theta = np.pi * c / num_classes
            freq = 2.0 + (c % 5)
            tint = np.array(
                [
                    0.6 + 0.4 * np.cos(2 * np.pi * c / num_classes),
                    0.6 + 0.4 * np.cos(2 * np.pi * c / num_classes + 2.1),
                    0.6 + 0.4 * np.cos(2 * np.pi * c / num_classes + 4.2),
                ]
            )
            wave_x = (xx * np.cos(theta) + yy * np.sin(theta)) / resolution
            for k in range(per_class):
                phase = rng.uniform(0.0, 2 * np.pi)
                grating = np.sin(2 * np.pi * freq * wave_x + phase)
                img = 0.5 + 0.45 * grating[None, :, :] * tint[:, None, None]
                img = img + rng.normal(0.0, 0.06, size=img.shape)
                arr = (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)
                Image.fromarray(arr.transpose(1, 2, 0)).save(cdir / f"img_{k:04d}.png")
    return root


@dataclass
class CondensedDataset:
    """A recovered synthetic set: ipc images per class, class-major order."""

    ipc: int
    class_ids: list[int]
    num_classes: int
    resolution: int
    images: torch.Tensor
    hard_labels: torch.Tensor
    normalization: Normalization
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.ipc * len(self.class_ids)
        if self.images.shape[0] != expected:
            raise IntegrityError(
                f"condensed set has {self.images.shape[0]} images, "
                f"expected ipc*classes = {expected}"
            )
        if self.hard_labels.shape[0] != expected:
            raise IntegrityError("hard_labels length disagrees with images")

    @property
    def classes(self) -> int:
        return len(self.class_ids)

    def __len__(self):
        return self.images.shape[0]

    def checksum(self) -> str:
        return sha256_tensors(
            [("images", self.images), ("hard_labels", self.hard_labels)]
        )

    def subset(self, keep_classes, per_class: int | None = None):
        """Restrict to ``keep_classes`` (first ``per_class`` each).

        Returns the sub-dataset plus the kept source indices, so aligned
        structures (a label archive) can be subset consistently.
        """
        keep = set(int(c) for c in keep_classes)
        unknown = keep - set(int(c) for c in self.class_ids)
        if unknown:
            raise ConfigurationError(f"classes {sorted(unknown)} not in condensed set")
        limit = self.ipc if per_class is None else min(per_class, self.ipc)
        indices = []
        counts = {c: 0 for c in keep}
        for i, label in enumerate(self.hard_labels.tolist()):
            if label in keep and counts[label] < limit:
                indices.append(i)
                counts[label] += 1
        sub = CondensedDataset(
            ipc=limit,
            class_ids=sorted(keep),
            num_classes=self.num_classes,
            resolution=self.resolution,
            images=self.images[indices].clone(),
            hard_labels=self.hard_labels[indices].clone(),
            normalization=self.normalization,
            provenance=dict(self.provenance, subset_of=self.provenance.get("content", "")),
        )
        return sub, indices


def save_condensed(cd: CondensedDataset, out_dir) -> Path:
    """Write manifest + raw float32 blob + per-class PNG previews."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = cd.images.detach().cpu().contiguous().to(torch.float32)
    blob = images.numpy().astype("<f4", copy=False).tobytes()
    (out_dir / "images.bin").write_bytes(blob)
    manifest = {
        "format_version": CONDENSED_FORMAT_VERSION,
        "kind": "condensed",
        "ipc": cd.ipc,
        "class_ids": [int(c) for c in cd.class_ids],
        "num_classes": cd.num_classes,
        "resolution": cd.resolution,
        "shape": list(images.shape),
        "dtype": "float32_le",
        "hard_labels": cd.hard_labels.tolist(),
        "normalization": cd.normalization.to_dict(),
        "provenance": cd.provenance,
        "images_sha256": sha256_file(out_dir / "images.bin"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    raw = cd.normalization.denormalize(images).clamp(0.0, 1.0)
    raw = (raw * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    per_class_count = {}
    for i, label in enumerate(cd.hard_labels.tolist()):
        k = per_class_count.get(label, 0)
        per_class_count[label] = k + 1
        pdir = out_dir / "previews" / f"{label:04d}"
        pdir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(raw[i]).save(pdir / f"{k:04d}.png")
    return out_dir


def load_condensed(path) -> CondensedDataset:
    """Read a condensed set back; any manifest/blob mismatch is an error."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    blob_path = path / "images.bin"
    if not manifest_path.is_file() or not blob_path.is_file():
        raise IntegrityError(f"{path} is not a condensed-set directory")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise IntegrityError(f"corrupt condensed manifest {manifest_path}: {e}") from e
    if manifest.get("format_version") != CONDENSED_FORMAT_VERSION:
        raise IntegrityError(
            f"condensed format version {manifest.get('format_version')} not supported"
        )
    if manifest["images_sha256"] != sha256_file(blob_path):
        raise IntegrityError(f"images.bin does not match manifest checksum in {path}")
    shape = tuple(manifest["shape"])
    data = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise IntegrityError(
            f"images.bin holds {data.size} values, manifest says {int(np.prod(shape))}"
        )
    images = torch.from_numpy(data.reshape(shape).copy())
    return CondensedDataset(
        ipc=int(manifest["ipc"]),
        class_ids=[int(c) for c in manifest["class_ids"]],
        num_classes=int(manifest["num_classes"]),
        resolution=int(manifest["resolution"]),
        images=images,
        hard_labels=torch.tensor(manifest["hard_labels"], dtype=torch.int64),
        normalization=Normalization.from_dict(manifest["normalization"]),
        provenance=manifest.get("provenance", {}),
    )
