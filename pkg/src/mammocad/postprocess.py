"""From probability maps to ranked lesion regions and classifier RoIs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import BinaryMask, BoundingBox, GrayImage

ROI_SCALE = 256
ROI_SIZE = 224
MIN_AREA_FRACTION = 0.0005
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class DetectedRegion:
    mask: BinaryMask
    box: BoundingBox
    area: int
    mean_probability: float = 0.0

    @property
    def scan_index(self) -> int:
        """Raster index of the region's first pixel."""
        return int(np.argmax(self.mask.bits.ravel()))


@dataclass(frozen=True, eq=False)
class RoiPatch:
    pixels: np.ndarray  # (224, 224)
    source_box: BoundingBox
    provenance: tuple[str, int] = ("", 0)

    def __post_init__(self):
        if self.pixels.shape != (ROI_SIZE, ROI_SIZE):
            raise ValueError(f"RoI must be {ROI_SIZE}x{ROI_SIZE}, got {self.pixels.shape}")


def binarize(pmap, threshold: float = 0.5) -> BinaryMask:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    values = pmap.values if hasattr(pmap, "values") else np.asarray(pmap)
    return BinaryMask(values >= threshold)


def connected_components(mask: BinaryMask, pmap=None) -> list[DetectedRegion]:
    """8-connected components in label (raster) order."""
    labels, n = ndimage.label(mask.bits, structure=_EIGHT)
    values = None if pmap is None else (pmap.values if hasattr(pmap, "values") else np.asarray(pmap))
    regions = []
    for lab in range(1, n + 1):
        bits = labels == lab
        mean_p = float(values[bits].mean()) if values is not None else 0.0
        regions.append(DetectedRegion(BinaryMask(bits), BoundingBox.of_mask(bits), int(bits.sum()), mean_p))
    return regions


def select_top_regions(regions: list[DetectedRegion], k: int = 3, min_area: int = 0) -> list[DetectedRegion]:
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = [r for r in regions if r.area >= min_area]
    kept.sort(key=lambda r: (-r.area, -r.mean_probability, r.scan_index))
    return kept[:k]


def default_min_area(width: int, height: int) -> int:
    return int(math.ceil(MIN_AREA_FRACTION * width * height))


def detect_regions(pmap, threshold: float = 0.5, k: int = 3, min_area: Optional[int] = None) -> list[DetectedRegion]:
    """binarize -> connected components -> top-k by area."""
    if min_area is None:
        min_area = default_min_area(pmap.width, pmap.height)
    return select_top_regions(connected_components(binarize(pmap, threshold), pmap), k, min_area)


def double_square_box(box: BoundingBox, image_w: int, image_h: int) -> BoundingBox:
    """Square of twice the box's longer side about its centre, shifted inside the image."""
    side = 2 * max(box.w, box.h)
    cx, cy = box.center
    sw, sh = min(side, image_w), min(side, image_h)
    x0 = int(math.floor(cx - side / 2.0))
    y0 = int(math.floor(cy - side / 2.0))
    if sw < side:
        x0 = 0
    if sh < side:
        y0 = 0
    x0 = min(max(x0, 0), image_w - sw)
    y0 = min(max(y0, 0), image_h - sh)
    return BoundingBox(x0, y0, sw, sh)


def scale_region(img: GrayImage, box: BoundingBox, size: int = ROI_SCALE) -> np.ndarray:
    """Crop ``box`` and bilinearly resize it to size x size (8-bit scale)."""
    if not box.within(img.width, img.height):
        raise ValueError(f"box {box} outside image {img.width}x{img.height}")
    crop = img.pixels[box.y0:box.y1, box.x0:box.x1].astype(np.float64)
    if img.bit_depth != 8:
        crop = crop * (255.0 / img.max_value)
    t = torch.from_numpy(crop)[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False,
                        antialias=crop.shape[0] > size or crop.shape[1] > size)
    return np.clip(np.rint(out[0, 0].numpy()), 0, 255).astype(np.uint8)


def crop_offset(crop_seed: Optional[int], train: bool, slack: int = ROI_SCALE - ROI_SIZE) -> tuple[int, int]:
    if not train:
        return (slack // 2, slack // 2)
    rng = np.random.default_rng(crop_seed)
    ox, oy = rng.integers(0, slack + 1, size=2)
    return (int(ox), int(oy))


def crop_patch(scaled: np.ndarray, offset: tuple[int, int]) -> np.ndarray:
    ox, oy = offset
    return scaled[oy:oy + ROI_SIZE, ox:ox + ROI_SIZE]


def extract_roi(
    img: GrayImage,
    box: BoundingBox,
    crop_seed: Optional[int] = None,
    train: bool = False,
    provenance: tuple[str, int] = ("", 0),
) -> RoiPatch:
    """Crop, resize to 256x256, then take a 224x224 crop.

    Training mode draws the crop offset from ``crop_seed``; otherwise the
    centre crop is used.
    """
    scaled = scale_region(img, box)
    return RoiPatch(crop_patch(scaled, crop_offset(crop_seed, train)), box, provenance)


def normalized_lesion_size(region_area: int, breast_area: int) -> float:
    if breast_area <= 0:
        raise ValueError("breast area must be positive")
    return region_area / breast_area
