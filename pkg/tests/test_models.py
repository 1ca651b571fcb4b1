"""Backbone construction, BN bookkeeping, and checkpoint IO."""

import io
import json
import zipfile

import pytest
import torch
from torch import nn

from condenser.errors import CheckpointLoadError, ConfigurationError
from condenser.hashing import sha256_tensors
from condenser.models import (
    BackboneSpec,
    Checkpoint,
    build_backbone,
    extract_bn_stats,
    iter_bn_layers,
    load_checkpoint,
    save_checkpoint,
)
from condenser import vit


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        BackboneSpec("lenet", 32, 10).validate()
    with pytest.raises(ConfigurationError):
        BackboneSpec("convnet4", 48, 10).validate()
    with pytest.raises(ConfigurationError):
        BackboneSpec("convnet4", 32, 1).validate()
    BackboneSpec("convnet4", 32, 2).validate()


def test_small_input_mode_derivation():
    assert BackboneSpec("resnet18_adapted", 32, 10).resolved_small_input()
    assert BackboneSpec("resnet18_adapted", 64, 10).resolved_small_input()
    assert not BackboneSpec("resnet18_adapted", 224, 10).resolved_small_input()
    # explicit flag wins over the resolution rule
    assert not BackboneSpec("resnet18_adapted", 32, 10, small_input_mode=False).resolved_small_input()


def test_spec_dict_roundtrip():
    spec = BackboneSpec("resnet50_adapted", 64, 17, small_input_mode=True)
    assert BackboneSpec.from_dict(spec.to_dict()) == spec


def test_build_backbone_is_seed_deterministic():
    spec = BackboneSpec("convnet4", 32, 10)
    a = build_backbone(spec, seed=3).state_dict()
    b = build_backbone(spec, seed=3).state_dict()
    assert sorted(a) == sorted(b)
    for k in a:
        assert torch.equal(a[k], b[k]), k
    c = build_backbone(spec, seed=4).state_dict()
    assert any(not torch.equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize(
    "arch", ["convnet4", "resnet18_adapted", "resnet50_adapted", "bnvit_tiny"]
)
def test_forward_and_feature_shapes(arch):
    spec = BackboneSpec(arch, 32, 7)
    model = build_backbone(spec, seed=0).eval()
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        logits = model(x)
        feats = model.features(x)
    assert logits.shape == (2, 7)
    assert feats.dim() == 2 and feats.shape[0] == 2


@pytest.mark.parametrize(
    "arch,expected",
    [("convnet4", 4), ("resnet18_adapted", 20), ("resnet50_adapted", 53), ("bnvit_tiny", 37)],
)
def test_bn_layer_counts(arch, expected):
    model = build_backbone(BackboneSpec(arch, 32, 10), seed=0)
    assert sum(1 for _ in iter_bn_layers(model)) == expected


def test_fresh_bn_stats_are_identity():
    model = build_backbone(BackboneSpec("convnet4", 32, 10), seed=0)
    for s in extract_bn_stats(model):
        assert torch.all(s.running_mean == 0.0)
        assert torch.all(s.running_var == 1.0)


def test_one_training_batch_moves_every_bn_layer():
    model = build_backbone(BackboneSpec("convnet4", 32, 10), seed=0)
    before = extract_bn_stats(model)
    model.train()
    g = torch.Generator().manual_seed(1)
    model(torch.randn(8, 3, 32, 32, generator=g))
    after = extract_bn_stats(model)
    for b, a in zip(before, after):
        assert not torch.equal(b.running_mean, a.running_mean)
        assert not torch.equal(b.running_var, a.running_var)


def test_extract_bn_stats_twice_identical_and_isolated():
    model = build_backbone(BackboneSpec("convnet4", 32, 10), seed=2)
    first = extract_bn_stats(model)
    second = extract_bn_stats(model)
    for a, b in zip(first, second):
        assert torch.equal(a.running_mean, b.running_mean)
        assert torch.equal(a.running_var, b.running_var)
    # extraction returns copies, not views into the live buffers
    next(iter_bn_layers(model))[1].running_mean.fill_(5.0)
    assert torch.all(first[0].running_mean == 0.0)


def test_extract_bn_stats_requires_bn():
    with pytest.raises(ConfigurationError):
        extract_bn_stats(nn.Sequential(nn.Linear(4, 4), nn.ReLU()))


def test_checkpoint_roundtrip_preserves_everything(tmp_path):
    spec = BackboneSpec("convnet4", 32, 4)
    model = build_backbone(spec, seed=5)
    meta = {"stage": "squeeze", "note": "hello", "nested": {"values": [1, 2, 3], "f": 0.25}}
    ckpt = Checkpoint.from_model(model, spec, meta=meta)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == spec
    assert loaded.meta == meta
    assert sorted(loaded.state) == sorted(ckpt.state)
    for k in ckpt.state:
        assert torch.equal(loaded.state[k], ckpt.state[k]), k
    for a, b in zip(ckpt.bn_stats, loaded.bn_stats):
        assert torch.equal(a.running_mean, b.running_mean)
        assert torch.equal(a.running_var, b.running_var)
    assert loaded.content_id() == ckpt.content_id()
    # the rebuilt model computes exactly what the original did
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(loaded.build_model().eval()(x), model.eval()(x))


def test_checkpoint_file_is_byte_deterministic(tmp_path):
    spec = BackboneSpec("convnet4", 32, 4)
    ckpt = Checkpoint.from_model(build_backbone(spec, seed=1), spec, meta={"k": 1})
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    save_checkpoint(ckpt, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncated_checkpoint_rejected(tmp_path):
    spec = BackboneSpec("convnet4", 32, 4)
    ckpt = Checkpoint.from_model(build_backbone(spec, seed=1), spec)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointLoadError):
        load_checkpoint(path)


def test_unknown_format_version_rejected(tmp_path):
    spec = BackboneSpec("convnet4", 32, 4)
    ckpt = Checkpoint.from_model(build_backbone(spec, seed=1), spec)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    bumped = tmp_path / "future.ckpt"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(bumped, "w") as dst:
        for name in src.namelist():
            payload = src.read(name)
            if name == "manifest.json":
                manifest = json.loads(payload)
                manifest["format_version"] = 99
                payload = json.dumps(manifest).encode()
            dst.writestr(name, payload)
    with pytest.raises(CheckpointLoadError):
        load_checkpoint(bumped)


def test_content_id_tracks_weights():
    spec = BackboneSpec("convnet4", 32, 4)
    ckpt = Checkpoint.from_model(build_backbone(spec, seed=1), spec)
    other = Checkpoint.from_model(build_backbone(spec, seed=2), spec)
    assert ckpt.content_id() != other.content_id()
    assert ckpt.content_id() == Checkpoint.from_model(build_backbone(spec, seed=1), spec).content_id()


def test_vit_conversion_requires_two_linear_ffn():
    desc = vit.tiny_description(32, 10)
    bad = vit.TransformerDescription(
        embed_dim=desc.embed_dim,
        depth=desc.depth,
        num_heads=desc.num_heads,
        ffn_hidden_dims=(64, 64),
        patch_size=desc.patch_size,
        input_resolution=desc.input_resolution,
        num_classes=desc.num_classes,
    )
    with pytest.raises(ConfigurationError):
        vit.convert_ln_to_bn(bad)


def test_vit_conversion_replaces_all_norms():
    model = vit.convert_ln_to_bn(vit.tiny_description(32, 10))
    assert not any(isinstance(m, nn.LayerNorm) for m in model.modules())
    assert any(isinstance(m, vit.TokenBatchNorm) for m in model.modules())
