"""Tissue segmentation, intensity normalisation, noise augmentation, quantisation."""

from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .data import (
    BinaryMask,
    CaseRecord,
    DatasetManifest,
    GrayImage,
    read_image,
    write_image,
    write_manifest,
)

NOISE_SUFFIX = "+noise"
_EIGHT = np.ones((3, 3), dtype=bool)


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    sigma: float = 2.0  # 8-bit intensity units, applied after normalisation
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def derive_seed(seed: int, key: str) -> int:
    """Stable per-item seed: ``seed`` xor a hash of ``key``."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "little")) & 0xFFFFFFFFFFFFFFFF


def largest_component(bits: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(bits, structure=_EIGHT)
    if n == 0:
        return np.zeros_like(bits, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def segment_breast(img: GrayImage) -> BinaryMask:
    """Largest 8-connected component above an Otsu threshold.

    The threshold is chosen on log intensities: bright lesions otherwise pull
    it up into the dimmest tissue and the breast edge erodes.
    """
    px = img.pixels
    if px.min() == px.max():
        raise PreprocessError("no tissue found")
    logpx = np.log1p(px.astype(np.float64))
    return BinaryMask(largest_component(logpx > threshold_otsu(logpx)))


def normalize_intensities(img: GrayImage, tissue: BinaryMask) -> GrayImage:
    if tissue.bits.shape != img.pixels.shape:
        raise PreprocessError("tissue mask and image dimensions differ")
    if not tissue.bits.any():
        raise PreprocessError("empty tissue mask")
    vals = img.pixels[tissue.bits].astype(np.float64)
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        raise PreprocessError("degenerate intensity range")
    out = np.zeros(img.pixels.shape, dtype=np.float64)
    out[tissue.bits] = (vals - lo) / (hi - lo) * 255.0
    return GrayImage(np.rint(out).astype(np.uint8), 8)


def add_gaussian_noise(img: GrayImage, cfg: AugmentationConfig) -> GrayImage:
    if cfg.sigma == 0:
        return img
    rng = np.random.default_rng(cfg.seed)
    noisy = img.pixels.astype(np.float64) + rng.normal(0.0, cfg.sigma, size=img.pixels.shape)
    return GrayImage(np.clip(np.rint(noisy), 0, img.max_value).astype(img.pixels.dtype), img.bit_depth)


def quantize(img: GrayImage, threshold_percentile: float, out_depth: int = 8) -> GrayImage:
    """Saturate intensities above a percentile, then rescale linearly.

    ``threshold_percentile=0`` disables saturation (plain linear rescale).
    """
    if not 0 <= threshold_percentile < 100:
        raise ValueError("threshold_percentile must lie in [0, 100)")
    if out_depth != 8:
        raise ValueError("only 8-bit output is supported")
    px = img.pixels.astype(np.float64)
    lo = px.min()
    top = px.max() if threshold_percentile == 0 else np.percentile(px, threshold_percentile, method="inverted_cdf")
    if top <= lo:
        out = np.where(px > lo, 255.0, 0.0)
    else:
        out = (np.clip(px, lo, top) - lo) / (top - lo) * 255.0
    return GrayImage(np.rint(out).astype(np.uint8), 8)


def preprocess_image(img: GrayImage, quantize_percentile: Optional[float] = None) -> GrayImage:
    if quantize_percentile is not None:
        img = quantize(img, quantize_percentile)
    return normalize_intensities(img, segment_breast(img))


def is_noise_copy(record: CaseRecord) -> bool:
    return record.image_id.endswith(NOISE_SUFFIX)


def preprocess_manifest(
    manifest: DatasetManifest,
    out_dir,
    sigma: float = 2.0,
    augment: bool = True,
    quantize_percentile: Optional[float] = None,
    seed: int = 0,
) -> DatasetManifest:
    """Normalise every image and add one noisy copy per training image.

    Noisy copies carry ``+noise`` in their image id and reuse the source mask.
    """
    out = Path(out_dir)
    records = []
    for rec in manifest.records:
        img = read_image(rec.image_path, rec.bit_depth)
        proc = preprocess_image(img, quantize_percentile)
        img_path = out / "images" / f"{rec.image_id}.png"
        write_image(proc, img_path)
        mask_path = None
        if rec.mask_path is not None:
            mask_path = out / "masks" / f"{rec.image_id}.png"
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(rec.mask_path, mask_path)
        records.append(CaseRecord(rec.case_id, rec.image_id, rec.view, rec.label, img_path, mask_path, rec.split, 8))
        if augment and rec.split == "train" and sigma > 0:
            noisy = add_gaussian_noise(proc, AugmentationConfig(sigma, derive_seed(seed, rec.image_id)))
            noisy_id = rec.image_id + NOISE_SUFFIX
            noisy_path = out / "images" / f"{noisy_id}.png"
            write_image(noisy, noisy_path)
            records.append(CaseRecord(rec.case_id, noisy_id, rec.view, rec.label, noisy_path, mask_path, rec.split, 8))
    result = DatasetManifest(tuple(records), manifest.source_tag, out)
    write_manifest(result, out / "manifest.csv")
    return result
