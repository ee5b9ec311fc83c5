import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mammocad.cade import ProbabilityMap
from mammocad.data import BinaryMask, BoundingBox, GrayImage
from mammocad.phantom import PhantomSpec, generate_phantom
from mammocad.postprocess import (
    DetectedRegion, binarize, connected_components, crop_offset, default_min_area, detect_regions,
    double_square_box, extract_roi, normalized_lesion_size, select_top_regions,
)
from mammocad.preprocess import segment_breast

from oracles import flood_fill_components


def test_binarize_examples():
    assert binarize(np.full((3, 3), 0.9)).bits.all()
    assert not binarize(np.full((3, 3), 0.1)).bits.any()
    checker = np.where(np.indices((4, 4)).sum(0) % 2, 0.6, 0.4)
    assert np.array_equal(binarize(ProbabilityMap(checker)).bits, checker > 0.5)
    assert binarize(np.array([[0.5]])).bits.all()
    with pytest.raises(ValueError):
        binarize(checker, 1.0)


def test_components_small_cases():
    assert connected_components(BinaryMask(np.zeros((5, 5), bool))) == []
    diag = np.zeros((3, 3), bool)
    diag[0, 0] = diag[1, 1] = True
    (region,) = connected_components(BinaryMask(diag))
    assert region.area == 2 and (region.box.w, region.box.h) == (2, 2)


def test_components_match_flood_fill(rng):
    for _ in range(500):
        bits = rng.random((32, 32)) < rng.uniform(0.2, 0.6)
        regions = connected_components(BinaryMask(bits))
        got = {frozenset(zip(*map(lambda a: a.tolist(), r.mask.bits.nonzero()))) for r in regions}
        assert got == flood_fill_components(bits)
        for r in regions:
            assert r.area == r.mask.area
            assert r.box == BoundingBox.of_mask(r.mask.bits)


@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1)), st.floats(0.05, 0.95))
def test_components_idempotent_after_rebinarize(values, t):
    regions = connected_components(binarize(values, t), values)
    induced = np.zeros(values.shape)
    for r in regions:
        induced[r.mask.bits] = 1.0
    again = connected_components(binarize(induced, 0.5))
    assert sorted(tuple(np.flatnonzero(r.mask.bits)) for r in again) == \
        sorted(tuple(np.flatnonzero(r.mask.bits)) for r in regions)
    for r in regions:
        assert np.isclose(r.mean_probability, values[r.mask.bits].mean())


def _region(area, p=0.5, start=0, width=64):
    bits = np.zeros((8, width), bool)
    bits.ravel()[start:start + area] = True
    return DetectedRegion(BinaryMask(bits), BoundingBox.of_mask(bits), area, p)


def test_select_top_examples():
    regions = [_region(a) for a in (20, 50, 10, 40, 30)]
    assert [r.area for r in select_top_regions(regions, 3)] == [50, 40, 30]
    assert len(select_top_regions(regions[:2], 3)) == 2
    lo, hi = _region(5, 0.6, 0), _region(5, 0.9, 100)
    assert select_top_regions([lo, hi], 3)[0] is hi
    a, b = _region(5, 0.7, 200), _region(5, 0.7, 100)
    assert select_top_regions([a, b], 3)[0] is b
    assert select_top_regions(regions, 3, min_area=45) == [regions[1]]


@given(st.lists(st.tuples(st.integers(1, 20), st.floats(0, 1)), max_size=8), st.integers(1, 5), st.integers(0, 15))
def test_select_top_properties(specs, k, min_area):
    regions = [_region(a, p, 24 * i, 200) for i, (a, p) in enumerate(specs)]
    out = select_top_regions(regions, k, min_area)
    assert len(out) <= k
    assert all(any(o is r for r in regions) for o in out)
    assert [o.area for o in out] == sorted((o.area for o in out), reverse=True)
    assert all(o.area >= min_area for o in out)
    eligible = sorted((r.area for r in regions if r.area >= min_area), reverse=True)
    assert [o.area for o in out] == eligible[:k]


def test_select_top_rejects_bad_k():
    with pytest.raises(ValueError):
        select_top_regions([], 0)


def test_double_square_box_examples():
    assert double_square_box(BoundingBox(10, 10, 20, 10), 100, 100) == BoundingBox(0, 0, 40, 40)
    out = double_square_box(BoundingBox(40, 44, 10, 12), 200, 200)
    assert out.center == BoundingBox(40, 44, 10, 12).center and out.w == out.h == 24
    wide = double_square_box(BoundingBox(5, 5, 60, 20), 100, 100)
    assert wide.w == 100


@given(st.integers(4, 120), st.integers(4, 120), st.data())
def test_double_square_box_properties(iw, ih, data):
    w = data.draw(st.integers(1, iw))
    h = data.draw(st.integers(1, ih))
    box = BoundingBox(data.draw(st.integers(0, iw - w)), data.draw(st.integers(0, ih - h)), w, h)
    out = double_square_box(box, iw, ih)
    assert out.within(iw, ih)
    cx, cy = box.center
    assert out.x0 <= cx <= out.x1 and out.y0 <= cy <= out.y1
    side = 2 * max(w, h)
    if side <= iw and side <= ih:
        assert out.w == out.h == side
        assert out.x0 <= box.x0 and box.x1 <= out.x1 and out.y0 <= box.y0 and box.y1 <= out.y1


def test_extract_roi_offsets_and_constant_patch():
    img = GrayImage(np.full((50, 60), 77, np.uint8))
    box = BoundingBox(5, 5, 30, 20)
    roi = extract_roi(img, box)
    assert roi.pixels.shape == (224, 224) and (roi.pixels == 77).all()
    assert crop_offset(None, train=False) == (16, 16)
    assert crop_offset(5, train=True) == crop_offset(5, train=True)
    offs = {crop_offset(s, train=True) for s in range(200)}
    assert all(0 <= x <= 32 and 0 <= y <= 32 for x, y in offs) and len(offs) > 50


def test_extract_roi_center_crop_matches_scaled_region():
    ramp = np.tile(np.arange(64, dtype=np.uint8) * 4, (64, 1))
    roi = extract_roi(GrayImage(ramp), BoundingBox(0, 0, 64, 64), provenance=("img", 2))
    assert roi.provenance == ("img", 2)
    # columns increase left to right after resizing a horizontal ramp
    assert (np.diff(roi.pixels[100].astype(int)) >= 0).all()


@given(st.integers(8, 40), st.integers(8, 40), st.data(), st.booleans(), st.sampled_from([8, 16]))
def test_extract_roi_always_224(iw, ih, data, train, depth):
    w = data.draw(st.integers(1, iw))
    h = data.draw(st.integers(1, ih))
    box = BoundingBox(data.draw(st.integers(0, iw - w)), data.draw(st.integers(0, ih - h)), w, h)
    dtype = np.uint8 if depth == 8 else np.uint16
    px = np.random.default_rng(iw * ih).integers(0, 2 ** depth, (ih, iw)).astype(dtype)
    roi = extract_roi(GrayImage(px, depth), box, crop_seed=w, train=train)
    assert roi.pixels.shape == (224, 224) and roi.pixels.dtype == np.uint8


def test_extract_roi_rejects_box_outside():
    with pytest.raises(ValueError):
        extract_roi(GrayImage(np.zeros((10, 10), np.uint8)), BoundingBox(5, 5, 10, 10))


def test_normalized_lesion_size():
    assert normalized_lesion_size(10, 100) == 0.1
    assert normalized_lesion_size(100, 100) == 1.0
    with pytest.raises(ValueError):
        normalized_lesion_size(1, 0)


def test_lesion_sizes_recomputed_from_masks():
    spec = PhantomSpec(lesion_count_range=(1, 2))
    for i in range(8):
        s = generate_phantom(spec, i)
        breast = segment_breast(s.image).bits
        regions = connected_components(s.mask)
        sizes = sorted(normalized_lesion_size(r.area, int(breast.sum())) for r in regions)
        direct = sorted(m.sum() / breast.sum() for m in s.lesion_masks)
        assert np.allclose(sizes, direct)
        assert all(0 < v <= 1 for v in sizes)


def test_detect_regions_pipeline():
    values = np.zeros((100, 100))
    values[10:20, 10:20] = 0.9
    values[50:55, 50:55] = 0.8
    values[80, 80] = 0.99  # below default min area of 5 px
    values[70:72, 5:8] = 0.7
    regions = detect_regions(ProbabilityMap(values))
    assert default_min_area(100, 100) == 5
    assert [r.area for r in regions] == [100, 25, 6]
    assert regions[0].mean_probability == pytest.approx(0.9)
    assert [r.area for r in detect_regions(ProbabilityMap(values), k=1)] == [100]
