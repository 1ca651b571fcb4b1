"""Random resized-crop sampling shared by recovery, relabeling, and training.

The sampler mirrors the usual area/aspect rejection scheme: up to ten
draws of (area fraction, log-uniform aspect) and a center-crop fallback.
All randomness flows through an explicit numpy Generator so every stage
can replay its crops exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass(frozen=True)
class CropParams:
    output_size: int
    scale_range: tuple[float, float] = (0.08, 1.0)
    ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_prob: float = 0.5

    def validate(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"bad crop scale range {self.scale_range}")
        if not (0.0 < self.ratio_range[0] <= self.ratio_range[1]):
            raise ConfigurationError(f"bad crop ratio range {self.ratio_range}")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ConfigurationError(f"bad hflip probability {self.hflip_prob}")


def sample_crop(height: int, width: int, scale_range, ratio_range, rng):
    """Sample one (top, left, h, w) rectangle inside an image."""
    area = float(height * width)
    log_ratio = (math.log(ratio_range[0]), math.log(ratio_range[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = math.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # Fallback: clamp aspect, center the crop.
    in_ratio = width / height
    if in_ratio < ratio_range[0]:
        w = width
        h = min(int(round(w / ratio_range[0])), height)
    elif in_ratio > ratio_range[1]:
        h = height
        w = min(int(round(h * ratio_range[1])), width)
    else:
        w, h = width, height
    top = (height - h) // 2
    left = (width - w) // 2
    return top, left, h, w


def crop_and_resize(images: torch.Tensor, rects, size: int) -> torch.Tensor:
    """Extract per-image rectangles and resize each to ``size`` (bilinear).

    Stays differentiable with respect to ``images``. Rectangles of equal
    shape share one batched resize; resize is skipped entirely when a
    rectangle already matches the target size.
    """
    full = (0, 0, size, size)
    if images.shape[-2] == images.shape[-1] == size and all(r == full for r in rects):
        return images
    groups: dict = {}
    for i, rect in enumerate(rects):
        groups.setdefault((rect[2], rect[3]), []).append(i)
    views = [None] * len(rects)
    for (h, w), idxs in groups.items():
        crops = torch.stack(
            [
                images[i, :, rects[i][0] : rects[i][0] + h, rects[i][1] : rects[i][1] + w]
                for i in idxs
            ]
        )
        if h != size or w != size:
            crops = F.interpolate(crops, size=(size, size), mode="bilinear", align_corners=False)
        for k, i in enumerate(idxs):
            views[i] = crops[k]
    return torch.stack(views)


def apply_hflips(views: torch.Tensor, flips) -> torch.Tensor:
    flipped = views.clone()
    for i, f in enumerate(flips):
        if f:
            flipped[i] = torch.flip(views[i], dims=[-1])
    return flipped


def sample_cutmix_box(height: int, width: int, lam: float, rng):
    """Rectangle for patch mixing; its area fraction is roughly 1 - lam."""
    cut = math.sqrt(max(0.0, 1.0 - lam))
    ch, cw = int(round(height * cut)), int(round(width * cut))
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    top = max(0, cy - ch // 2)
    bottom = min(height, cy + ch // 2)
    left = max(0, cx - cw // 2)
    right = min(width, cx + cw // 2)
    return top, left, bottom - top, right - left
