"""Backbone construction, BatchNorm bookkeeping, and checkpoint IO.

Every backbone here tracks running BatchNorm statistics, because the
recovery stage matches synthetic batches against exactly those values.
The checkpoint format is a zip of npy blobs plus a JSON manifest; entry
timestamps are pinned so identical contents produce identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torchvision.models import resnet as tv_resnet

from . import vit
from .errors import CheckpointLoadError, ConfigurationError
from .hashing import sha256_bytes, sha256_tensors, stable_json

ARCH_IDS = ("convnet4", "resnet18_adapted", "resnet50_adapted", "bnvit_tiny")
SUPPORTED_RESOLUTIONS = (32, 64, 224)
CHECKPOINT_FORMAT_VERSION = 1

# Fixed zip entry timestamp; real mtimes would break artifact checksums.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture identity plus the input contract it was built for.

    ``small_input_mode`` selects a 3x3 stem with no initial pooling on
    the resnets; ``None`` derives it from the resolution (on below 224,
    off at 224).
    """

    arch_id: str
    input_resolution: int
    num_classes: int
    small_input_mode: bool | None = None

    def validate(self):
        if self.arch_id not in ARCH_IDS:
            raise ConfigurationError(
                f"unknown arch_id {self.arch_id!r}; expected one of {ARCH_IDS}"
            )
        if self.input_resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigurationError(
                f"unsupported input resolution {self.input_resolution}; "
                f"expected one of {SUPPORTED_RESOLUTIONS}"
            )
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")

    def resolved_small_input(self) -> bool:
        if self.small_input_mode is None:
            return self.input_resolution < 224
        return self.small_input_mode

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "input_resolution": self.input_resolution,
            "num_classes": self.num_classes,
            "small_input_mode": self.small_input_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            arch_id=d["arch_id"],
            input_resolution=int(d["input_resolution"]),
            num_classes=int(d["num_classes"]),
            small_input_mode=d.get("small_input_mode"),
        )


class ConvNet4(nn.Module):
    """Four conv-BN-ReLU-avgpool blocks and a linear head."""

    def __init__(self, num_classes: int, input_resolution: int, width: int = 128):
        super().__init__()
        layers = []
        in_ch = 3
        for _ in range(4):
            layers += [
                nn.Conv2d(in_ch, width, kernel_size=3, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.AvgPool2d(kernel_size=2, stride=2),
            ]
            in_ch = width
        self.body = nn.Sequential(*layers)
        spatial = input_resolution // 16
        if spatial < 1:
            raise ConfigurationError(
                f"resolution {input_resolution} too small for four pooling stages"
            )
        self.head = nn.Linear(width * spatial * spatial, num_classes)

    def features(self, x):
        return self.body(x).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


class AdaptedResNet(nn.Module):
    """torchvision resnet topology, optionally with a small-input stem."""

    def __init__(self, depth: int, num_classes: int, small_input: bool):
        super().__init__()
        if depth == 18:
            net = tv_resnet.ResNet(
                block=tv_resnet.BasicBlock, layers=[2, 2, 2, 2], num_classes=num_classes
            )
        elif depth == 50:
            net = tv_resnet.ResNet(
                block=tv_resnet.Bottleneck, layers=[3, 4, 6, 3], num_classes=num_classes
            )
        else:
            raise ConfigurationError(f"unsupported resnet depth {depth}")
        if small_input:
            # 3x3 stride-1 stem, no max-pool: keeps 32/64 px maps usable.
            net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
            net.maxpool = nn.Identity()
        self.net = net

    def features(self, x):
        n = self.net
        x = n.relu(n.bn1(n.conv1(x)))
        x = n.maxpool(x)
        x = n.layer4(n.layer3(n.layer2(n.layer1(x))))
        return torch.flatten(n.avgpool(x), 1)

    def forward(self, x):
        return self.net.fc(self.features(x))


def build_backbone(spec: BackboneSpec, seed: int = 0) -> nn.Module:
    """Construct a freshly initialized backbone; init is seed-deterministic."""
    spec.validate()
    torch.manual_seed(seed)
    if spec.arch_id == "convnet4":
        model = ConvNet4(spec.num_classes, spec.input_resolution)
    elif spec.arch_id == "resnet18_adapted":
        model = AdaptedResNet(18, spec.num_classes, spec.resolved_small_input())
    elif spec.arch_id == "resnet50_adapted":
        model = AdaptedResNet(50, spec.num_classes, spec.resolved_small_input())
    else:
        desc = vit.tiny_description(spec.input_resolution, spec.num_classes)
        model = vit.convert_ln_to_bn(desc)
    model.spec = spec
    return model


convert_ln_to_bn = vit.convert_ln_to_bn


def iter_bn_layers(model: nn.Module):
    """Yield (name, module) for every BatchNorm, in registration order."""
    for name, module in model.named_modules():
        if isinstance(module, nn.modules.batchnorm._BatchNorm):
            yield name, module


@dataclass
class BNLayerStats:
    """Frozen running statistics of one BatchNorm layer."""

    layer_index: int
    running_mean: torch.Tensor
    running_var: torch.Tensor


def extract_bn_stats(model: nn.Module) -> list[BNLayerStats]:
    """Pull running stats from every BatchNorm, preserving network order.

    A model without any BatchNorm cannot drive recovery, so that case is
    an error rather than an empty list.
    """
    stats = []
    for idx, (name, module) in enumerate(iter_bn_layers(model)):
        if module.running_mean is None or module.running_var is None:
            raise ConfigurationError(
                f"BatchNorm layer {name!r} does not track running statistics"
            )
        stats.append(
            BNLayerStats(
                layer_index=idx,
                running_mean=module.running_mean.detach().clone(),
                running_var=module.running_var.detach().clone(),
            )
        )
    if not stats:
        raise ConfigurationError(
            "model has no BatchNorm layers and cannot be used for recovery"
        )
    return stats


@dataclass
class Checkpoint:
    """A trained backbone: spec, weights, BN stats, and free-form metadata."""

    spec: BackboneSpec
    state: dict[str, torch.Tensor]
    bn_stats: list[BNLayerStats]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: nn.Module, spec: BackboneSpec, meta: dict | None = None):
        state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        return cls(spec=spec, state=state, bn_stats=extract_bn_stats(model), meta=dict(meta or {}))

    def build_model(self) -> nn.Module:
        model = build_backbone(self.spec, seed=0)
        model.load_state_dict(self.state, strict=True)
        return model

    def content_id(self) -> str:
        """Checksum over the spec and weights; stable across save/load."""
        spec_part = sha256_bytes(stable_json(self.spec.to_dict()).encode())
        state_part = sha256_tensors(sorted(self.state.items()))
        return sha256_bytes((spec_part + state_part).encode())


def _write_npy(zf: zipfile.ZipFile, name: str, array: np.ndarray):
    buf = io.BytesIO()
    np.save(buf, array)
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, buf.getvalue())


def _write_json(zf: zipfile.ZipFile, name: str, obj):
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, json.dumps(obj, sort_keys=True, indent=1).encode())


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    tensors = []
    for i, (name, t) in enumerate(checkpoint.state.items()):
        tensors.append({"name": name, "entry": f"tensors/{i:05d}.npy"})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "checkpoint",
        "spec": checkpoint.spec.to_dict(),
        "meta": checkpoint.meta,
        "tensors": tensors,
        "num_bn_layers": len(checkpoint.bn_stats),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_json(zf, "manifest.json", manifest)
        for rec, (name, t) in zip(tensors, checkpoint.state.items()):
            _write_npy(zf, rec["entry"], t.detach().cpu().numpy())
        for s in checkpoint.bn_stats:
            _write_npy(zf, f"bn/{s.layer_index:05d}_mean.npy", s.running_mean.numpy())
            _write_npy(zf, f"bn/{s.layer_index:05d}_var.npy", s.running_var.numpy())


def _read_npy(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    with zf.open(name) as f:
        return np.load(io.BytesIO(f.read()))


def load_checkpoint(path) -> Checkpoint:
    """Load a checkpoint; truncated or tampered files raise a load error."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointLoadError(
                    f"checkpoint format version {version} not supported "
                    f"(expected {CHECKPOINT_FORMAT_VERSION})"
                )
            spec = BackboneSpec.from_dict(manifest["spec"])
            state = {}
            for rec in manifest["tensors"]:
                state[rec["name"]] = torch.from_numpy(_read_npy(zf, rec["entry"]).copy())
            bn_stats = []
            for i in range(manifest["num_bn_layers"]):
                bn_stats.append(
                    BNLayerStats(
                        layer_index=i,
                        running_mean=torch.from_numpy(
                            _read_npy(zf, f"bn/{i:05d}_mean.npy").copy()
                        ),
                        running_var=torch.from_numpy(
                            _read_npy(zf, f"bn/{i:05d}_var.npy").copy()
                        ),
                    )
                )
    except CheckpointLoadError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, OSError) as e:
        raise CheckpointLoadError(f"cannot read checkpoint {path}: {e}") from e
    return Checkpoint(spec=spec, state=state, bn_stats=bn_stats, meta=manifest.get("meta", {}))
