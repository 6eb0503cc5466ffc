import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from matplotlib.path import Path as MplPath

from fractoseg.data import (
    BRITTLE,
    OTHER,
    TAXONOMY,
    ClassTaxonomy,
    DatasetManifest,
    ImageRecord,
    ManifestEntry,
    PolygonAnnotation,
    class_histogram,
    colorize,
    compute_ratio,
    load_mask,
    rasterize,
    save_mask,
    split_dataset,
    validate_mask,
)
from fractoseg.errors import (
    BadFractions,
    DegeneratePolygon,
    InsufficientLabeled,
    NoLabeledRecords,
    ShapeMismatch,
    UnknownLabel,
)


def test_taxonomy_names_and_lookup():
    assert len(TAXONOMY) == 7
    assert TAXONOMY.id_of("brittle fracture") == BRITTLE
    assert TAXONOMY.id_of("Fatigue-Precrack") == 3
    with pytest.raises(UnknownLabel):
        TAXONOMY.id_of("rust")
    with pytest.raises(ValueError):
        ClassTaxonomy(("a",) * 7)


def test_image_record_validation():
    ImageRecord("ok", np.zeros((64, 64, 3), np.uint8), scale=0.1)
    with pytest.raises(ShapeMismatch):
        ImageRecord("small", np.zeros((32, 64, 3), np.uint8))
    with pytest.raises(ShapeMismatch):
        ImageRecord("gray", np.zeros((64, 64), np.uint8))
    with pytest.raises(ValueError):
        ImageRecord("scale", np.zeros((64, 64, 3), np.uint8), scale=0.0)


def test_validate_mask_rejects_bad_ids():
    with pytest.raises(ValueError):
        validate_mask(np.full((4, 4), 7))
    with pytest.raises(ShapeMismatch):
        validate_mask(np.zeros((4, 4)), shape=(4, 5))


def test_rasterize_empty_is_background():
    assert not rasterize(PolygonAnnotation([], 8, 8)).any()


def test_rasterize_rectangle_brute_force():
    # cols 2..5 and rows 1..3 inclusive: corners at pixel edges
    ann = PolygonAnnotation([("brittle fracture", [(2, 1), (6, 1), (6, 4), (2, 4)])], 8, 8)
    mask = rasterize(ann)
    expected = np.zeros((8, 8), np.uint8)
    for r in range(8):
        for c in range(8):
            if 2 <= c <= 5 and 1 <= r <= 3:
                expected[r, c] = 5
    assert np.array_equal(mask, expected)
    assert class_histogram(mask)[5] == 12


def test_rasterize_last_writer_wins():
    ann = PolygonAnnotation([
        ("brittle_fracture", [(0, 0), (5, 0), (5, 5), (0, 5)]),
        ("other", [(3, 3), (8, 3), (8, 8), (3, 8)]),
    ], 8, 8)
    mask = rasterize(ann)
    assert (mask[3:5, 3:5] == OTHER).all()
    assert (mask[:3, :3] == BRITTLE).all()


def test_rasterize_degenerate_polygon():
    with pytest.raises(DegeneratePolygon):
        rasterize(PolygonAnnotation([("other", [(0, 0), (1, 1)])], 8, 8))


@given(st.integers(0, 10_000))
def test_rasterize_matches_independent_point_in_polygon(seed):
    # random float vertices, so no pixel center lies on an edge
    rng = np.random.default_rng(seed)
    h, w = 20, 24
    shapes = []
    for _ in range(rng.integers(1, 4)):
        n = rng.integers(3, 7)
        center = rng.uniform([3, 3], [w - 3, h - 3])
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = rng.uniform(2, 9, n)
        pts = center + np.stack([np.cos(ang) * rad, np.sin(ang) * rad], 1)
        shapes.append((TAXONOMY.names[rng.integers(1, 7)], [tuple(p) for p in pts]))
    mask = rasterize(PolygonAnnotation(shapes, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    centers = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], 1)
    expected = np.zeros(h * w, np.uint8)
    for label, pts in shapes:
        clipped = np.clip(np.asarray(pts), 0, [w, h])
        expected[MplPath(clipped).contains_points(centers)] = TAXONOMY.id_of(label)
    assert np.array_equal(mask.ravel(), expected)


def test_annotation_json_round_trip(tmp_path):
    ann = PolygonAnnotation([("ductile fracture", [(1.5, 2.0), (4.0, 2.0), (3.0, 6.0)])], 10, 12)
    p = tmp_path / "a.json"
    p.write_text(json.dumps(ann.to_json()))
    back = PolygonAnnotation.from_json(p)
    assert back == ann
    assert np.array_equal(rasterize(back), rasterize(ann))


def test_mask_png_round_trip(tmp_path):
    m = np.random.default_rng(0).integers(0, 7, (33, 41)).astype(np.uint8)
    save_mask(tmp_path / "m.png", m)
    assert np.array_equal(load_mask(tmp_path / "m.png"), m)
    assert colorize(m).shape == (33, 41, 3)


def _manifest(n_lab, n_unl, tags=("a",)):
    entries = [ManifestEntry(f"l{i:03d}", tags[i % len(tags)], True, f"images/l{i}.png", f"masks/l{i}.png")
               for i in range(n_lab)]
    entries += [ManifestEntry(f"u{i:03d}", tags[i % len(tags)], False, f"images/u{i}.png") for i in range(n_unl)]
    return DatasetManifest("test", entries)


def test_compute_ratio_values():
    assert compute_ratio(_manifest(32, 168)) == Fraction(21, 4)
    assert float(compute_ratio(_manifest(32, 168))) == 5.25
    assert compute_ratio(_manifest(5, 0)) == 0
    assert f"{float(compute_ratio(_manifest(46, 268))):.2f}" == "5.83"
    with pytest.raises(NoLabeledRecords):
        compute_ratio(_manifest(0, 3))


def test_split_sizes_and_disjointness():
    rep = split_dataset(_manifest(32, 168), "randomized", seed=3)
    assert (len(rep.train), len(rep.val), len(rep.test)) == (24, 8, 0)
    assert len(rep.unlabeled) == 168
    assert not set(rep.train) & set(rep.val)
    assert rep.ratio == 5.25


def test_single_stratum_matches_randomized_sizes():
    m = _manifest(32, 10)
    a, b = split_dataset(m, "stratified", 1), split_dataset(m, "randomized", 1)
    assert (len(a.train), len(a.val)) == (len(b.train), len(b.val))


def test_stratified_equal_strata():
    rep = split_dataset(_manifest(96, 0, tags=("a", "b", "c", "d")), "stratified", seed=0)
    for tag in "abcd":
        assert rep.counts[tag]["train"] == 18
        assert rep.counts[tag]["val"] == 6


def test_split_errors_and_determinism():
    with pytest.raises(InsufficientLabeled):
        split_dataset(_manifest(3, 5), "randomized", 0)
    with pytest.raises(InsufficientLabeled):
        split_dataset(_manifest(5, 0, tags=("a", "a", "a", "a", "b")), "stratified", 0)
    with pytest.raises(BadFractions):
        split_dataset(_manifest(8, 0), "randomized", 0, (0.8, 0.4))
    m = _manifest(20, 0, tags=("x", "y"))
    assert split_dataset(m, "stratified", 9) == split_dataset(m, "stratified", 9)


def test_manifest_json_round_trip(tmp_path):
    m = _manifest(4, 2)
    m.save(tmp_path / "manifest.json")
    assert DatasetManifest.load(tmp_path / "manifest.json") == m
