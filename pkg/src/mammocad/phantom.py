"""Seeded synthetic mammogram phantoms with ground-truth lesion masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import (
    BinaryMask,
    BoundingBox,
    CaseRecord,
    DatasetManifest,
    GrayImage,
    VIEWS,
    write_image,
    write_manifest,
    write_mask,
)

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 128
    height: int = 128
    lesion_count_range: tuple[int, int] = (1, 2)
    lesion_radius_range: tuple[float, float] = (0.06, 0.11)
    spike_count: int = 8
    spike_length: float = 0.8  # fraction of lesion radius
    background_texture_scale: float = 4.0
    tissue_contrast: float = 0.3
    seed: int = 0
    bit_depth: int = 8
    calcifications: int = 0  # confounder dots, never part of the mask
    size_multiple: int = 8

    def __post_init__(self):
        object.__setattr__(self, "lesion_count_range", tuple(int(v) for v in self.lesion_count_range))
        object.__setattr__(self, "lesion_radius_range", tuple(float(v) for v in self.lesion_radius_range))
        self.validate()

    def validate(self) -> None:
        lo, hi = self.lesion_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"lesion_count_range must satisfy 0 <= min <= max, got {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range
        if not (0 < rlo <= rhi < 0.5):
            raise ValueError(f"lesion_radius_range must lie in (0, 0.5) with min <= max, got {self.lesion_radius_range}")
        if self.spike_count < 0 or self.spike_length < 0:
            raise ValueError("spiculation parameters must be non-negative")
        if not (0 < self.tissue_contrast <= 1):
            raise ValueError("tissue_contrast must lie in (0, 1]")
        if self.background_texture_scale <= 0:
            raise ValueError("background_texture_scale must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.width % self.size_multiple or self.height % self.size_multiple:
            raise ValueError(
                f"width and height must be divisible by {self.size_multiple} "
                f"(got {self.width}x{self.height})"
            )
        if self.bit_depth not in (8, 12, 14, 16):
            raise ValueError(f"unsupported bit depth {self.bit_depth}")


@dataclass(frozen=True, eq=False)
class PhantomSample:
    image: GrayImage
    mask: BinaryMask
    label: str
    lesion_boxes: list[BoundingBox]
    breast: BinaryMask = field(repr=False)
    lesion_masks: list[np.ndarray] = field(default_factory=list, repr=False)
    spiculated: list[bool] = field(default_factory=list)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *stream]))


def _breast_support(spec: PhantomSpec, rng: np.random.Generator, yy, xx) -> np.ndarray:
    h, w = spec.height, spec.width
    a = w * rng.uniform(0.65, 0.85)
    b = min(h * rng.uniform(0.38, 0.46), h / 2 - 2)
    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    return ((xx + 0.5) / a) ** 2 + ((yy + 0.5 - cy) / b) ** 2 <= 1.0


def _texture(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((spec.height, spec.width))
    field_ = ndimage.gaussian_filter(noise, spec.background_texture_scale, mode="reflect")
    field_ /= field_.std() + 1e-12
    return np.clip(0.5 + field_ / 5.0, 0.0, 1.0)


def _lesion_support(shape, cx, cy, rx, ry, theta, spikes, yy, xx) -> np.ndarray:
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    support = u * u + v * v <= 1.0
    for angle, length in spikes:
        ca, sa = math.cos(angle), math.sin(angle)
        base = 0.6 * min(rx, ry)
        tip = max(rx, ry) + length
        # distance from pixel centres to the spike segment
        t = dx * ca + dy * sa
        perp = np.abs(-dx * sa + dy * ca)
        inside = (t >= base) & (t <= tip)
        frac = np.clip((t - base) / max(tip - base, 1e-9), 0.0, 1.0)
        half_width = 1.4 * (1 - frac) + 0.7 * frac
        support |= inside & (perp <= half_width)
    return support


def generate_phantom(
    spec: PhantomSpec,
    index: int,
    label: Optional[str] = None,
    lesion_count: Optional[int] = None,
) -> PhantomSample:
    """Render phantom ``index`` of ``spec``; deterministic in (seed, index).

    ``label`` and ``lesion_count`` override the random draws, which cohort
    generation uses to keep views of a case consistent.
    """
    spec.validate()
    rng = _rng(spec.seed, int(index))
    h, w = spec.height, spec.width
    maxv = (1 << spec.bit_depth) - 1
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    breast = _breast_support(spec, rng, yy, xx)
    inner = ndimage.binary_erosion(breast, structure=_EIGHT, iterations=2)

    tc = spec.tissue_contrast
    headroom = max(1.0 - 1.2 * tc, 0.1)
    tissue = (0.3 + 0.6 * _texture(spec, rng)) * headroom

    n_lo, n_hi = spec.lesion_count_range
    n = int(rng.integers(n_lo, n_hi + 1)) if lesion_count is None else int(lesion_count)
    if label is None:
        label = "benign" if spec.spike_count == 0 or n == 0 else str(rng.choice(["benign", "malignant"]))
    if label not in ("benign", "malignant"):
        raise ValueError(f"unknown label {label!r}")
    if label == "malignant" and (spec.spike_count == 0 or n == 0):
        raise ValueError("a malignant phantom needs at least one spiculated lesion")

    spiculated = [False] * n
    if label == "malignant":
        spiculated[0] = True
        for i in range(1, n):
            spiculated[i] = bool(rng.random() < 0.5)

    occupied = np.zeros((h, w), dtype=bool)
    lesion_masks: list[np.ndarray] = []
    intensity = tissue.copy()
    rlo, rhi = spec.lesion_radius_range
    ys_in, xs_in = np.nonzero(inner)
    for i in range(n):
        for attempt in range(1000):
            # crowded breasts: shrink the radius a little every 100 failed tries
            r = rng.uniform(rlo, rhi) * w * 0.85 ** (attempt // 100)
            rx, ry = r, r * rng.uniform(0.7, 1.0)
            theta = rng.uniform(0, math.pi)
            spikes = []
            if spiculated[i]:
                k = spec.spike_count + int(rng.integers(-1, 2)) if spec.spike_count > 1 else spec.spike_count
                offset = rng.uniform(0, 2 * math.pi)
                for j in range(k):
                    ang = offset + 2 * math.pi * j / k + rng.uniform(-0.25, 0.25)
                    spikes.append((ang, spec.spike_length * r * rng.uniform(0.8, 1.2)))
            pick = int(rng.integers(len(ys_in)))
            cx, cy = xs_in[pick] + rng.random(), ys_in[pick] + rng.random()
            sup = _lesion_support((h, w), cx, cy, rx, ry, theta, spikes, yy, xx)
            if not sup.any() or (sup & ~inner).any():
                continue
            if (ndimage.binary_dilation(sup, structure=_EIGHT) & occupied).any():
                continue
            break
        else:
            raise ValueError(f"could not place lesion {i} of phantom {index}; lesions too large for the breast region")
        occupied |= sup
        lesion_masks.append(sup)
        d = np.hypot((xx + 0.5 - cx) / rx, (yy + 0.5 - cy) / ry)
        bump = tc * (1.0 + 0.2 * np.clip(1.0 - d, 0.0, 1.0))
        intensity = np.where(sup, tissue + bump, intensity)

    img = np.where(breast, intensity, 0.0) * maxv
    img = np.where(breast, img, rng.uniform(0, 0.01, size=(h, w)) * maxv)
    if spec.calcifications:
        free = inner & ~ndimage.binary_dilation(occupied, structure=_EIGHT, iterations=2)
        fy, fx = np.nonzero(free)
        for _ in range(spec.calcifications):
            p = int(rng.integers(len(fy)))
            y0, x0 = fy[p], fx[p]
            img[y0:y0 + 2, x0:x0 + 2] = 0.97 * maxv
    pixels = np.clip(np.rint(img), 0, maxv).astype(np.int64)

    boxes = [BoundingBox.of_mask(m) for m in lesion_masks]
    return PhantomSample(
        image=GrayImage(pixels, spec.bit_depth),
        mask=BinaryMask(occupied),
        label=label,
        lesion_boxes=boxes,
        breast=BinaryMask(breast),
        lesion_masks=lesion_masks,
        spiculated=spiculated,
    )


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    counts = [int(math.floor(n * f + 1e-9)) for f in fractions]
    # hand out the remainder by largest fractional part, in split order on ties
    rema = sorted(range(len(fractions)), key=lambda i: (-(n * fractions[i] - counts[i]), i))
    for i in rema[: n - sum(counts)]:
        counts[i] += 1
    return counts


def assign_cases(n_cases: int, split_fractions, seed: int) -> list[tuple[str, str]]:
    """(label, split) per case index, class-balanced and stratified by split."""
    rng = _rng(seed, 0xC0_40_27)
    labels = ["benign", "malignant"] * ((n_cases + 1) // 2)
    labels = [labels[i] for i in rng.permutation(n_cases)] if n_cases else []
    out: list[Optional[tuple[str, str]]] = [None] * n_cases
    for cls in ("benign", "malignant"):
        idx = [i for i, lab in enumerate(labels) if lab == cls]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        counts = _split_counts(len(idx), split_fractions)
        pos = 0
        for split, cnt in zip(("train", "val", "test"), counts):
            for i in idx[pos:pos + cnt]:
                out[i] = (cls, split)
            pos += cnt
    return out  # type: ignore[return-value]


def generate_cohort(
    spec: PhantomSpec,
    n_cases: int,
    views_per_case: int,
    split_fractions: Sequence[float],
    out_dir,
    multi_lesion_splits: Sequence[str] = ("test",),
) -> DatasetManifest:
    """Write a labelled phantom cohort under ``out_dir`` and return its manifest.

    Images outside ``multi_lesion_splits`` carry exactly one lesion.
    """
    fr = tuple(float(f) for f in split_fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {split_fractions}")
    if n_cases < 1:
        raise ValueError("n_cases must be at least 1")
    if not 1 <= views_per_case <= len(VIEWS):
        raise ValueError(f"views_per_case must be between 1 and {len(VIEWS)}")
    spec.validate()

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for c, (label, split) in enumerate(assign_cases(n_cases, fr, spec.seed)):
        case_id = f"P{c + 1:04d}"
        for v in range(views_per_case):
            view = VIEWS[v]
            image_id = f"{case_id}_{view}"
            count = 1
            if split in multi_lesion_splits:
                lo, hi = spec.lesion_count_range
                count = int(_rng(spec.seed, c, v).integers(max(lo, 1), max(hi, 1) + 1))
            sample = generate_phantom(spec, c * len(VIEWS) + v, label=label, lesion_count=count)
            img_path = out / "images" / f"{image_id}.png"
            mask_path = out / "masks" / f"{image_id}.png"
            write_image(sample.image, img_path)
            write_mask(sample.mask, mask_path)
            records.append(CaseRecord(case_id, image_id, view, label, img_path, mask_path, split, spec.bit_depth))
    manifest = DatasetManifest(tuple(records), "synthetic", out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
