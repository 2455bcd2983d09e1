import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box

from noisyseg.geometry import make_polygon, rasterize_polygon
from noisyseg.ingest import (
    DatasetManifest,
    ManifestError,
    ManifestRecord,
    MaskRef,
    coverage_filter,
    filter_and_erode_fields,
    load_corpus,
    read_geojson,
    read_manifest,
    read_raster,
    resample_raster,
    slice_raster,
    split_dataset,
    write_corpus,
    write_manifest,
)
from noisyseg.records import InstanceAnnotation, LabelSet, Patch
from noisyseg.synthdata import ShapeWorldConfig, generate_shape_world, inject_misalignment

FIXTURES = Path(__file__).parent / "fixtures"

# which building polygons touch which 128 px tile of the fixture raster
TILE_MEMBERS = {
    "fx_r00000_c00000": [0, 1, 2],
    "fx_r00000_c00128": [1, 2],
    "fx_r00128_c00000": [2, 4],
    "fx_r00128_c00128": [2, 3],
}


# -- resampling --------------------------------------------------------------------


def test_constant_raster_stays_constant():
    out = resample_raster(np.full((64, 64, 3), 0.7), 0.1, 0.4)
    assert out.shape == (16, 16, 3)
    assert np.allclose(out, 0.7)
    up = resample_raster(np.full((16, 16), 0.2), 0.4, 0.1)
    assert up.shape == (64, 64) and np.allclose(up, 0.2)


def test_airs_style_resampling_dims():
    rng = np.random.default_rng(0)
    out = resample_raster(rng.random((512, 512, 3)), 0.075, 0.30)
    assert out.shape == (128, 128, 3)


def test_checkerboard_averages_to_mid_value():
    cb = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
    out = resample_raster(cb, 1.0, 2.0)
    assert out.shape == (16, 16)
    assert np.allclose(out, 0.5)


def test_area_weighting_non_integer_factor():
    # 3 -> 2 pixels: out0 = (a + b/2) / 1.5, out1 = (b/2 + c) / 1.5
    out = resample_raster(np.array([[1.0, 2.0, 4.0]]).repeat(3, axis=0), 1.0, 1.5)
    assert out.shape == (2, 2)
    assert out[0] == pytest.approx([(1 + 1) / 1.5, (1 + 4) / 1.5])


def test_bad_gsd():
    with pytest.raises(ValueError):
        resample_raster(np.zeros((4, 4)), 0, 1)


# -- slicing -----------------------------------------------------------------------


def test_slice_counts_and_membership_on_fixture():
    raster = read_raster(FIXTURES / "raster.png")
    polys, _ = read_geojson(FIXTURES / "buildings.geojson")
    assert raster.shape == (256, 256, 3) and len(polys) == 5
    tiles = slice_raster(raster, polys, 128, 128, prefix="fx")
    assert len(tiles) == 4
    got = {p.patch_id: [i.instance_id for i in l.instances] for p, l in tiles}
    assert got == TILE_MEMBERS
    for patch, labels in tiles:
        assert patch.image.shape == (128, 128, 3)
        assert patch.image.min() >= 0 and patch.image.max() <= 1


def test_slice_total_matches_brute_force_clip_count():
    raster = read_raster(FIXTURES / "raster.png")
    polys, _ = read_geojson(FIXTURES / "buildings.geojson")
    tiles = slice_raster(raster, polys, 128)
    full = [rasterize_polygon(p, (256, 256)) for p in polys]
    brute = sum(
        bool(m[r : r + 128, c : c + 128].any()) for m in full for r in (0, 128) for c in (0, 128)
    )
    assert sum(l.instance_count for _, l in tiles) == brute == 9
    # each clipped instance equals the window of the full-raster mask
    for patch, labels in tiles:
        r0, c0 = int(patch.patch_id[6:11]), int(patch.patch_id[13:18])
        for inst in labels.instances:
            assert np.array_equal(inst.mask, full[inst.instance_id][r0 : r0 + 128, c0 : c0 + 128])


def test_slice_drops_remainder_and_partitions():
    raster = np.random.default_rng(0).random((300, 280, 3))
    tiles = slice_raster(raster, [box(260, 10, 275, 40)], 128)
    assert len(tiles) == 4
    assert all(l.instance_count == 0 for _, l in tiles)  # polygon lies in the dropped columns
    cover = np.zeros((300, 280), dtype=int)
    for p, _ in tiles:
        r0, c0 = int(p.patch_id[6:11]), int(p.patch_id[13:18])
        cover[r0 : r0 + 128, c0 : c0 + 128] += 1
    assert cover[:256, :256].min() == 1 and cover.max() == 1
    assert cover[256:].sum() == 0 and cover[:, 256:].sum() == 0


def test_slice_with_geo_transform():
    gt = (1000.0, 0.5, 0.0, 2000.0, 0.0, -0.5)  # north-up, 0.5 m pixels
    poly = box(1000 + 5, 2000 - 10, 1000 + 10, 2000 - 5)  # pixel cols 10-20, rows 10-20
    tiles = slice_raster(np.zeros((64, 64, 3)), [poly], 32, gsd=0.5, geo_transform=gt)
    first = tiles[0][1]
    assert first.instance_count == 1
    assert first.instances[0].mask.sum() == 100
    assert tiles[1][0].geo_transform == (1000.0 + 32 * 0.5, 0.5, 0.0, 2000.0, 0.0, -0.5)


# -- coverage --------------------------------------------------------------------


def labels_with_area(n_pix, size=128):
    m = np.zeros(size * size, dtype=bool)
    m[:n_pix] = True
    return LabelSet("c", (size, size), [InstanceAnnotation(0, m.reshape(size, size))])


def test_coverage_boundary():
    patch = Patch("c", np.zeros((128, 128, 3)))
    assert not coverage_filter(patch, labels_with_area(1638))
    assert coverage_filter(patch, labels_with_area(1639))
    assert not coverage_filter(patch, LabelSet("c", (128, 128)))


@given(st.integers(0, 4096), st.floats(0, 1), st.floats(0, 1))
def test_coverage_monotone_in_threshold(n, t1, t2):
    t1, t2 = sorted((t1, t2))
    patch = Patch("c", np.zeros((64, 64, 3)))
    labels = labels_with_area(n, 64)
    if coverage_filter(patch, labels, t2):
        assert coverage_filter(patch, labels, t1)


# -- fields ----------------------------------------------------------------------


def test_field_filter_on_fixture():
    polys, crs = read_geojson(FIXTURES / "fields.geojson")
    assert crs == "EPSG:32611" and len(polys) == 10
    out = filter_and_erode_fields(polys, 500, 5, crs=crs)
    # hand-checked: 0 (30x30), 4 (26x20), 5 (10.5x60), 7 (L, arm width 20), 8 (right triangle, legs 40)
    r = 40 - 20 * math.sqrt(2)
    expected_areas = [400.0, 160.0, 25.0, 900.0, 800 * ((r - 5) / r) ** 2]
    assert len(out) == 5
    assert [p.area for p in out] == pytest.approx(expected_areas, rel=1e-9)
    assert out[0].bounds == (300_005.0, 4_000_005.0, 300_025.0, 4_000_025.0)


def test_small_field_dropped_and_large_kept():
    assert filter_and_erode_fields([box(0, 0, 20, 20)]) == []
    (kept,) = filter_and_erode_fields([box(0, 0, 30, 30)])
    assert kept.equals(box(5, 5, 25, 25))


def test_geographic_crs_rejected():
    with pytest.raises(ValueError, match="metric"):
        filter_and_erode_fields([box(0, 0, 1, 1)], crs="EPSG:4326")


# -- split ---------------------------------------------------------------------


def fake_manifest(n):
    return DatasetManifest(
        [ManifestRecord(f"p{i:05d}", f"images/p{i}.png", (), "train", 0) for i in range(n)]
    )


def counts(m):
    return {s: len(m.split(s)) for s in ("train", "val", "test")}


def test_split_counts():
    assert counts(split_dataset(fake_manifest(100), (0.8, 0.2), seed=0)) == {"train": 80, "val": 20, "test": 0}
    assert counts(split_dataset(fake_manifest(5681), (0.6, 0.2, 0.2), seed=1)) == {
        "train": 3409, "val": 1136, "test": 1136,
    }


def test_split_determinism_and_errors():
    a = split_dataset(fake_manifest(50), (0.6, 0.2, 0.2), seed=4)
    b = split_dataset(fake_manifest(50), (0.6, 0.2, 0.2), seed=4)
    c = split_dataset(fake_manifest(50), (0.6, 0.2, 0.2), seed=5)
    assert a == b and a != c
    assert [r.patch_id for r in a.records] == [r.patch_id for r in fake_manifest(50).records]
    with pytest.raises(ValueError):
        split_dataset(fake_manifest(2), (0.6, 0.2, 0.2))
    with pytest.raises(ValueError):
        split_dataset(fake_manifest(10), (0.6, 0.3, 0.2))


@given(st.integers(5, 300), st.integers(0, 100))
@settings(max_examples=30)
def test_split_partitions(n, seed):
    m = split_dataset(fake_manifest(n), (0.6, 0.2, 0.2), seed=seed)
    c = counts(m)
    assert sum(c.values()) == n
    assert c["train"] == math.floor(0.6 * n + 0.5)


# -- manifests on disk -----------------------------------------------------------


@pytest.fixture
def corpus():
    cfg = ShapeWorldConfig(image_size=32, shape_size=(5, 10), shapes_per_image=(1, 3), seed=2)
    return generate_shape_world(cfg, 4)


def test_manifest_round_trip(tmp_path, corpus):
    m = write_corpus(corpus, tmp_path / "c", splits="val")
    back = read_manifest(tmp_path / "c" / "manifest.jsonl")
    assert back == m
    loaded = load_corpus(back)
    for (p, l), (q, k) in zip(corpus, loaded):
        assert np.abs(p.image - q.image).max() <= 0.5 / 255 + 1e-6
        for a, b in zip(l.instances, k.instances):
            assert np.array_equal(a.mask, b.mask) and a.instance_id == b.instance_id


def test_mixed_provenance_round_trip(tmp_path, corpus):
    rng = np.random.default_rng(0)
    mixed = []
    for patch, labels in corpus:
        noisy = inject_misalignment(labels, 3, rng)
        insts = list(labels.instances[:1]) + list(noisy.instances[1:])
        mixed.append((patch, labels.with_instances(insts)))
    m = write_corpus(mixed, tmp_path / "mix")
    back = read_manifest(tmp_path / "mix" / "manifest.jsonl")
    assert back == m
    for rec, (_, labels) in zip(back.records, mixed):
        assert [x.provenance for x in rec.masks] == [i.provenance for i in labels.instances]
        assert [x.offset for x in rec.masks] == [i.applied_offset for i in labels.instances]


def test_missing_mask_named_in_error(tmp_path, corpus):
    write_corpus(corpus, tmp_path / "c")
    victim = tmp_path / "c" / "masks" / corpus[1][0].patch_id / "0.png"
    victim.unlink()
    with pytest.raises(ManifestError, match=f"masks/{corpus[1][0].patch_id}/0.png"):
        read_manifest(tmp_path / "c" / "manifest.jsonl")


def test_malformed_records(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"patch_id": "a"}\n')
    with pytest.raises(ManifestError, match="malformed"):
        read_manifest(p)
    p.write_text("not json\n")
    with pytest.raises(ManifestError, match="invalid JSON"):
        read_manifest(p)
    rec = {"patch_id": "a", "image": "a.png", "masks": [], "split": "train", "n_instances": 2}
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ManifestError, match="n_instances"):
        read_manifest(p, check_files=False)


@given(st.lists(st.tuples(st.sampled_from(["train", "val", "test"]), st.integers(0, 3)), max_size=8))
@settings(max_examples=25, deadline=None)
def test_manifest_write_read_property(tmp_path_factory, rows):
    d = tmp_path_factory.mktemp("m")
    recs = []
    for i, (split, k) in enumerate(rows):
        masks = tuple(MaskRef(f"m{i}_{j}.png", "noisy", j, (j, -j)) for j in range(k))
        recs.append(ManifestRecord(f"p{i}", f"p{i}.png", masks, split, k))
    m = DatasetManifest(recs, d)
    write_manifest(m, d / "m.jsonl")
    assert read_manifest(d / "m.jsonl", check_files=False) == m
