"""Crop sampling, batched crop-resize, flips, and the cutmix box."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from condenser.crops import (
    CropParams,
    apply_hflips,
    crop_and_resize,
    sample_crop,
    sample_cutmix_box,
)
from condenser.errors import ConfigurationError


def test_crop_params_validation():
    CropParams(output_size=32).validate()
    with pytest.raises(ConfigurationError):
        CropParams(output_size=32, scale_range=(0.0, 1.0)).validate()
    with pytest.raises(ConfigurationError):
        CropParams(output_size=32, scale_range=(0.9, 0.5)).validate()
    with pytest.raises(ConfigurationError):
        CropParams(output_size=32, ratio_range=(-1.0, 1.0)).validate()
    with pytest.raises(ConfigurationError):
        CropParams(output_size=32, hflip_prob=1.5).validate()


def test_thousand_draws_stay_in_bounds_and_scale():
    rng = np.random.default_rng(0)
    scale = (0.08, 1.0)
    h = w = 32
    fractions = []
    for _ in range(1000):
        top, left, ch, cw = sample_crop(h, w, scale, (3 / 4, 4 / 3), rng)
        assert 0 <= top and top + ch <= h
        assert 0 <= left and left + cw <= w
        assert ch >= 1 and cw >= 1
        fractions.append(ch * cw / (h * w))
    # integer rounding can undershoot the lower scale bound slightly
    assert min(fractions) >= scale[0] * 0.75
    assert max(fractions) <= scale[1] + 1e-9
    assert min(fractions) < 0.3 < max(fractions)  # the range is actually explored


def test_degenerate_scale_returns_full_image():
    rng = np.random.default_rng(0)
    assert sample_crop(32, 32, (1.0, 1.0), (1.0, 1.0), rng) == (0, 0, 32, 32)


def test_crop_and_resize_matches_per_image_resize():
    g = torch.Generator().manual_seed(1)
    images = torch.randn(5, 3, 16, 16, generator=g)
    rng = np.random.default_rng(2)
    rects = [sample_crop(16, 16, (0.2, 1.0), (3 / 4, 4 / 3), rng) for _ in range(5)]
    out = crop_and_resize(images, rects, size=16)
    for i, (top, left, ch, cw) in enumerate(rects):
        crop = images[i : i + 1, :, top : top + ch, left : left + cw]
        expected = F.interpolate(crop, size=(16, 16), mode="bilinear", align_corners=False)
        if (ch, cw) == (16, 16):
            expected = crop
        assert torch.allclose(out[i], expected[0], atol=1e-6), i


def test_full_rects_skip_the_resize():
    images = torch.randn(3, 3, 8, 8)
    out = crop_and_resize(images, [(0, 0, 8, 8)] * 3, size=8)
    assert out is images


def test_crop_gradients_stay_inside_the_rect():
    images = torch.randn(2, 3, 8, 8, requires_grad=True)
    rects = [(0, 0, 4, 4), (2, 2, 5, 5)]
    crop_and_resize(images, rects, size=8).sum().backward()
    grad = images.grad
    assert grad[0, :, :4, :4].abs().sum() > 0
    assert grad[0, :, 4:, :].abs().sum() == 0
    assert grad[0, :, :, 4:].abs().sum() == 0
    assert grad[1, :, 2:7, 2:7].abs().sum() > 0
    assert grad[1, :, :2, :].abs().sum() == 0


def test_hflip_is_an_involution():
    views = torch.randn(4, 3, 8, 8)
    flips = [True, False, True, False]
    once = apply_hflips(views, flips)
    twice = apply_hflips(once, flips)
    assert torch.equal(twice, views)
    assert not torch.equal(once[0], views[0])
    assert torch.equal(once[1], views[1])


def test_cutmix_box_area_tracks_lambda():
    rng = np.random.default_rng(3)
    for lam in (0.2, 0.5, 0.8):
        fracs = []
        for _ in range(300):
            top, left, bh, bw = sample_cutmix_box(32, 32, lam, rng)
            assert 0 <= top <= top + bh <= 32
            assert 0 <= left <= left + bw <= 32
            fracs.append(bh * bw / 1024.0)
        # border clipping keeps boxes at or below the nominal 1 - lam area
        assert max(fracs) <= (1.0 - lam) + 0.05
        assert np.mean(fracs) > 0.4 * (1.0 - lam)


def test_cutmix_box_extremes():
    rng = np.random.default_rng(4)
    top, left, bh, bw = sample_cutmix_box(32, 32, 1.0, rng)
    assert bh * bw == 0
