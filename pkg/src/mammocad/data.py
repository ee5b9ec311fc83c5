"""Domain types, manifest parsing and grayscale image IO."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

MANIFEST_HEADER = [
    "case_id",
    "image_id",
    "view",
    "label",
    "image_path",
    "mask_path",
    "split",
    "bit_depth",
]
VIEWS = ("MLO", "CC")
LABELS = ("benign", "malignant")
SPLITS = ("train", "val", "test")
BIT_DEPTHS = (8, 12, 14, 16)


class ManifestError(ValueError):
    """Raised for malformed or invalid manifest files."""


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray  # (height, width), integer intensities
    bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"expected a non-empty 2D raster, got shape {px.shape}")
        if self.bit_depth not in BIT_DEPTHS:
            raise ValueError(f"unsupported bit depth {self.bit_depth}")
        if px.size and (px.min() < 0 or px.max() > self.max_value):
            raise ValueError(f"pixel values outside [0, {self.max_value}]")
        px = px.astype(np.uint8 if self.bit_depth == 8 else np.uint16)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.bit_depth == other.bit_depth and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray  # (height, width), bool

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"expected a 2D mask, got shape {b.shape}")
        b = b.astype(bool)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {self}")

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0)

    def within(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    @classmethod
    def of_mask(cls, bits: np.ndarray) -> "BoundingBox":
        """Tight box around the true pixels of ``bits``."""
        ys, xs = np.nonzero(bits)
        if len(ys) == 0:
            raise ValueError("empty mask has no bounding box")
        return cls(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_id: str
    view: str
    label: str
    image_path: Path
    mask_path: Optional[Path] = None
    split: str = "train"
    bit_depth: int = 8


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[CaseRecord, ...]
    source_tag: str = ""
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ManifestError("manifest is empty")
        seen = set()
        for i, r in enumerate(self.records, start=1):
            key = (r.case_id, r.image_id)
            if key in seen:
                raise ManifestError(f"record {i}: duplicate (case_id, image_id) = {key}")
            seen.add(key)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(
            tuple(r for r in self.records if r.split == split), self.source_tag, self.root
        )

    def with_masks(self) -> bool:
        return all(r.mask_path is not None for r in self.records)


def _validate_record(row: dict, rowno: int, base: Path, check_files: bool) -> CaseRecord:
    def bad(fieldname, why):
        return ManifestError(f"row {rowno}: field '{fieldname}' {why} (value {row.get(fieldname)!r})")

    for name in ("case_id", "image_id", "image_path"):
        if not row.get(name):
            raise bad(name, "is required")
    if row["view"] not in VIEWS:
        raise bad("view", f"must be one of {VIEWS}")
    if row["label"] not in LABELS:
        raise bad("label", f"must be one of {LABELS}")
    if row["split"] not in SPLITS:
        raise bad("split", f"must be one of {SPLITS}")
    try:
        depth = int(row["bit_depth"])
    except (TypeError, ValueError):
        raise bad("bit_depth", "is not an integer") from None
    if depth not in BIT_DEPTHS:
        raise bad("bit_depth", f"must be one of {BIT_DEPTHS}")

    image_path = base / row["image_path"]
    mask_path = base / row["mask_path"] if row.get("mask_path") else None
    if check_files:
        if not image_path.is_file():
            raise bad("image_path", "does not resolve to a file")
        if mask_path is not None and not mask_path.is_file():
            raise bad("mask_path", "does not resolve to a file")
    return CaseRecord(
        case_id=row["case_id"],
        image_id=row["image_id"],
        view=row["view"],
        label=row["label"],
        image_path=image_path,
        mask_path=mask_path,
        split=row["split"],
        bit_depth=depth,
    )


def parse_manifest(text: str, base: Path, source_tag: str = "", check_files: bool = True) -> DatasetManifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("manifest is empty") from None
    if header != MANIFEST_HEADER:
        raise ManifestError(f"bad header {header!r}; expected {','.join(MANIFEST_HEADER)}")
    records = []
    for rowno, cells in enumerate(reader, start=1):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(MANIFEST_HEADER):
            raise ManifestError(
                f"row {rowno}: expected {len(MANIFEST_HEADER)} fields, found {len(cells)}"
            )
        row = dict(zip(MANIFEST_HEADER, (c.strip() for c in cells)))
        records.append(_validate_record(row, rowno, base, check_files))
    try:
        return DatasetManifest(tuple(records), source_tag, base)
    except ManifestError as exc:
        raise ManifestError(str(exc)) from None


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load and validate a manifest CSV; paths resolve relative to its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, path.parent, source_tag=path.parent.name, check_files=check_files)


def _relpath(p: Optional[Path], base: Path) -> str:
    if p is None:
        return ""
    p = Path(p)
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return p.as_posix()


def manifest_to_csv(manifest: DatasetManifest, base: Path) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        w.writerow([
            r.case_id, r.image_id, r.view, r.label,
            _relpath(r.image_path, base), _relpath(r.mask_path, base),
            r.split, r.bit_depth,
        ])
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_to_csv(manifest, path.parent), encoding="utf-8")


def group_by_case(manifest: DatasetManifest) -> "OrderedDict[str, list[CaseRecord]]":
    groups: OrderedDict[str, list[CaseRecord]] = OrderedDict()
    for r in manifest.records:
        groups.setdefault(r.case_id, []).append(r)
    return groups


# -- image IO --------------------------------------------------------------

def read_image(path, bit_depth: Optional[int] = None) -> GrayImage:
    """Read a grayscale PNG.

    16-bit containers default to ``bit_depth=16``; pass the manifest's
    declared depth to recover 12- or 14-bit data.
    """
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if im.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr", "LA", "HSV"):
        raise ImageFormatError("color image unsupported")
    if im.mode in ("L", "1"):
        px = np.array(im.convert("L"), dtype=np.uint8)
        depth = 8
    elif im.mode in ("I;16", "I;16B", "I;16L", "I"):
        px = np.array(im)
        if px.min() < 0 or px.max() > 65535:
            raise ImageFormatError(f"{path}: values outside 16-bit range")
        px = px.astype(np.uint16)
        depth = 16
    else:
        raise ImageFormatError(f"unsupported image mode {im.mode}")
    if bit_depth is not None:
        if bit_depth == 8 and depth != 8:
            raise ImageFormatError(f"{path}: declared 8-bit but stored in a 16-bit container")
        depth = bit_depth
    return GrayImage(px, depth)


def write_image(img: GrayImage, path) -> None:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ImageFormatError(f"unsupported output format {path.suffix!r}; only PNG is written")
    path.parent.mkdir(parents=True, exist_ok=True)
    px = img.pixels
    Image.fromarray(px.astype(np.uint8) if img.bit_depth == 8 else px.astype(np.uint16)).save(path)


def read_mask(path) -> BinaryMask:
    img = read_image(path)
    return BinaryMask(img.pixels != 0)


def write_mask(mask: BinaryMask, path) -> None:
    write_image(GrayImage(mask.bits.astype(np.uint8) * 255, 8), path)
