import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hepatoscan.atlas import (
    CANONICAL_SPACING_MM,
    ELONGATED,
    NORMAL,
    SHORTENED,
    UNCLASSIFIED,
    AtlasError,
    LiverShapeType,
    LiverTemplate,
    TemplateAtlas,
    build_template,
    classify_left_lobe,
    classify_mask,
    classify_right_lobe,
    generate_reference_atlas,
    shape_type,
)
from hepatoscan.volume import BinaryMask, InvalidArgumentError, VoxelGrid, label_bits


@pytest.fixture(scope="module")
def atlas():
    return generate_reference_atlas(seed=0)


@pytest.mark.parametrize("cc,cls", [(145, NORMAL), (135, NORMAL), (155, NORMAL), (160, ELONGATED), (134.9, SHORTENED)])
def test_right_lobe(cc, cls):
    assert classify_right_lobe(cc) == cls


@pytest.mark.parametrize("r,cls", [(0.7, NORMAL), (0.5, NORMAL), (0.9, NORMAL), (1.0, ELONGATED), (0.49, SHORTENED)])
def test_left_lobe(r, cls):
    assert classify_left_lobe(r * 100.0, 100.0) == cls


def test_classifier_errors():
    with pytest.raises(InvalidArgumentError):
        classify_right_lobe(0)
    with pytest.raises(InvalidArgumentError):
        classify_left_lobe(10, -1)


@settings(max_examples=60, deadline=None)
@given(st.floats(1, 400), st.floats(1, 400))
def test_right_lobe_monotone(a, b):
    order = {SHORTENED: 0, NORMAL: 1, ELONGATED: 2}
    lo, hi = sorted((a, b))
    assert order[classify_right_lobe(lo)] <= order[classify_right_lobe(hi)]


def test_shape_type_table():
    assert shape_type(NORMAL, NORMAL) is LiverShapeType.I
    assert shape_type(ELONGATED, SHORTENED) is LiverShapeType.VI
    assert shape_type(SHORTENED, NORMAL) == UNCLASSIFIED
    six = {shape_type(r, l) for r in (NORMAL, ELONGATED) for l in (SHORTENED, NORMAL, ELONGATED)}
    assert six == set(LiverShapeType)


def test_box_template():
    g = VoxelGrid((70, 60, 75), (2.0, 2.0, 2.0))
    t = build_template(BinaryMask(g, np.ones(g.shape, bool)), "box")
    assert abs(t.cc_extent_mm - 150.0) <= 2.0
    # every x-slab of a box is full height, so the whole width is right lobe:
    # cc 150 mm is normal, the empty left lobe is shortened
    assert t.shape_type is LiverShapeType.III
    assert t.mask.grid.spacing_mm == CANONICAL_SPACING_MM
    assert t.mask.grid.dims == (72, 62, 77)  # one voxel margin


def test_box_at_other_spacing():
    g = VoxelGrid((140, 120, 50), (1.0, 1.0, 3.0))
    t = build_template(BinaryMask(g, np.ones(g.shape, bool)), "box", LiverShapeType.III)
    assert abs(t.cc_extent_mm - 150.0) <= 2.0
    assert t.shape_type is LiverShapeType.III


def test_satellite_removed(atlas):
    src = atlas[0].mask
    bits = np.pad(src.bits, 4)
    bits[0, 0, :5] = True
    g = VoxelGrid(tuple(d + 8 for d in src.grid.dims), CANONICAL_SPACING_MM)
    t = build_template(BinaryMask(g, bits), "x", atlas[0].shape_type)
    assert t.voxel_count == atlas[0].voxel_count
    assert len(label_bits(t.mask.bits)) == 1


def test_idempotent(atlas):
    for t in atlas:
        again = build_template(t.mask, t.id, t.shape_type)
        assert again.mask == t.mask
        assert again.cc_extent_mm == t.cc_extent_mm


def test_empty_mask_rejected():
    g = VoxelGrid((3, 3, 3), (2, 2, 2))
    with pytest.raises(InvalidArgumentError):
        build_template(BinaryMask.empty(g), "e")


def test_reference_atlas(atlas):
    assert len(atlas) == 12
    counts = {}
    for t in atlas:
        counts[t.shape_type] = counts.get(t.shape_type, 0) + 1
        assert classify_mask(t.mask.bits, t.mask.grid.spacing_mm) is t.shape_type
        assert len(label_bits(t.mask.bits)) == 1
    assert set(counts.values()) == {2} and len(counts) == 6
    atlas.validate_reference()


def test_reference_atlas_deterministic(atlas):
    assert generate_reference_atlas(seed=0) == atlas
    assert generate_reference_atlas(seed=1) != atlas


def test_validate_reference_rejects_short_atlas(atlas):
    with pytest.raises(AtlasError):
        TemplateAtlas(atlas.templates[:11]).validate_reference()


def test_duplicate_ids(atlas):
    with pytest.raises(AtlasError):
        TemplateAtlas((atlas[0], atlas[0]))


def test_template_invariants(atlas):
    t = atlas[0]
    with pytest.raises(AtlasError):
        LiverTemplate(t.id, t.shape_type, t.mask, t.cc_extent_mm + 10)
    bits = np.zeros((3, 3, 5), bool)
    bits[1, 1, 0] = bits[1, 1, 4] = True
    with pytest.raises(AtlasError):
        LiverTemplate("two", LiverShapeType.I, BinaryMask(VoxelGrid((5, 3, 3), CANONICAL_SPACING_MM), bits), 2.0)
