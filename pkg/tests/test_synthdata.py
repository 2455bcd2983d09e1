import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from noisyseg.geometry import GeometryError, centroid_point, iou, miou
from noisyseg.records import InstanceAnnotation, LabelSet
from noisyseg.synthdata import (
    ShapeWorldConfig,
    band_offsets,
    build_point_channel,
    generate_shape_world,
    inject_misalignment,
    sample_alpha,
    select_instances,
)

SMALL = ShapeWorldConfig(image_size=48, shape_size=(6, 14), shapes_per_image=(1, 5), seed=3)


def dot_labels(n_inst, size=64):
    """LabelSet of single-pixel instances at well-separated positions."""
    inst = []
    for k in range(n_inst):
        m = np.zeros((size, size), dtype=bool)
        m[(k * 7) % size, (k * 13) % size] = True
        inst.append(InstanceAnnotation(k, m))
    return LabelSet("dots", (size, size), inst)


def test_single_shape_config():
    cfg = ShapeWorldConfig(shapes_per_image=(1, 1), seed=1)
    for _, labels in generate_shape_world(cfg, 10):
        assert labels.instance_count == 1


def test_generation_is_deterministic_and_worker_independent():
    a = generate_shape_world(SMALL, 6)
    b = generate_shape_world(SMALL, 6, workers=2)
    for (pa, la), (pb, lb) in zip(a, b):
        assert pa.patch_id == pb.patch_id
        assert np.array_equal(pa.image, pb.image)
        assert len(la.instances) == len(lb.instances)
        for ia, ib in zip(la.instances, lb.instances):
            assert np.array_equal(ia.mask, ib.mask)


def test_generated_shapes_are_disjoint_and_brighter():
    for patch, labels in generate_shape_world(SMALL, 20):
        total = sum(inst.mask.astype(int) for inst in labels.instances)
        assert total.max() <= 1
        union = labels.union()
        if union.any() and (~union).any():
            assert patch.image[union].mean() > patch.image[~union].mean() + 0.1
        assert 0 <= patch.image.min() and patch.image.max() <= 1


def test_default_instance_count_distribution():
    cfg = ShapeWorldConfig(seed=0)
    counts = np.array([l.instance_count for _, l in generate_shape_world(cfg, 1000)])
    assert counts.min() == 1 and counts.max() == 8
    assert abs(counts.mean() - 4.5) <= 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        ShapeWorldConfig(shape_size=(20, 10))
    with pytest.raises(ValueError):
        ShapeWorldConfig(foreground_contrast=0.1, background_noise_level=0.2)
    with pytest.raises(ValueError):
        ShapeWorldConfig(shape_kinds=("circle",))


# -- misalignment ------------------------------------------------------------


def test_zero_shift_keeps_masks():
    _, labels = generate_shape_world(SMALL, 1)[0]
    out = inject_misalignment(labels, 0, np.random.default_rng(0))
    for a, b in zip(labels.instances, out.instances):
        assert np.array_equal(a.mask, b.mask)
        assert b.provenance == "noisy" and b.applied_offset == (0, 0)


def test_offsets_uniform_over_grid():
    rng = np.random.default_rng(0)
    counts = np.zeros((21, 21), dtype=int)
    labels = dot_labels(100)
    for _ in range(300):
        for inst in inject_misalignment(labels, 10, rng).instances:
            dx, dy = inst.applied_offset
            counts[dy + 10, dx + 10] += 1
    assert counts.sum() == 30_000
    assert stats.chisquare(counts.ravel()).pvalue > 1e-3


def test_pairs_receive_different_offsets():
    rng = np.random.default_rng(1)
    labels = dot_labels(2)
    same = 0
    trials = 40_000
    for _ in range(trials):
        a, b = inject_misalignment(labels, 10, rng).instances
        same += a.applied_offset == b.applied_offset
    p = 1 / 441
    sd = np.sqrt(trials * p * (1 - p))
    assert abs(same - trials * p) <= 4 * sd


@given(st.integers(0, 12), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_misalignment_preserves_count(s, seed):
    _, labels = generate_shape_world(SMALL, 1, start=seed % 50)[0]
    out = inject_misalignment(labels, s, np.random.default_rng(seed))
    assert out.instance_count == labels.instance_count
    assert [i.instance_id for i in out.instances] == [i.instance_id for i in labels.instances]


def test_shifted_corpus_loses_iou():
    rng = np.random.default_rng(2)
    data = generate_shape_world(SMALL, 30)
    pairs = [(inject_misalignment(l, 10, rng).union(), l.union()) for _, l in data]
    assert miou(pairs).miou < 0.9


def test_band_offsets_magnitudes():
    offs = band_offsets(5000, 5, 10, np.random.default_rng(0))
    assert np.abs(offs).min() == 5 and np.abs(offs).max() == 10
    assert (offs < 0).mean() == pytest.approx(0.5, abs=0.03)
    with pytest.raises(ValueError):
        band_offsets(1, 6, 5, np.random.default_rng(0))


# -- omission ----------------------------------------------------------------


def test_select_instance_counts():
    rng = np.random.default_rng(0)
    assert select_instances(dot_labels(10), 0.7, rng).instance_count == 7
    assert select_instances(dot_labels(3), 0.01, rng).instance_count == 1
    assert select_instances(dot_labels(10), 1.0, rng).instance_count == 10
    with pytest.raises(ValueError):
        select_instances(LabelSet("e", (4, 4)), 0.5, rng)
    with pytest.raises(ValueError):
        select_instances(dot_labels(3), 0.0, rng)


@given(st.integers(1, 12), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_selection_keeps_masks_bit_identical(a, alpha, seed):
    labels = dot_labels(a)
    sub = select_instances(labels, alpha, np.random.default_rng(seed))
    src = labels.by_id()
    assert len({i.instance_id for i in sub.instances}) == sub.instance_count
    for inst in sub.instances:
        assert inst is src[inst.instance_id]
    again = select_instances(labels, alpha, np.random.default_rng(seed))
    assert [i.instance_id for i in again.instances] == [i.instance_id for i in sub.instances]


def test_sample_alpha_modes():
    rng = np.random.default_rng(0)
    assert all(sample_alpha(0.5, rng) == 0.5 for _ in range(10))
    draws = np.array([sample_alpha("het", rng) for _ in range(10_000)])
    assert abs(draws.mean() - 0.5) <= 0.02
    assert stats.kstest(draws, "uniform").pvalue > 1e-3
    assert draws.min() > 0 and draws.max() <= 1
    for bad in (0, 1.5, -0.2):
        with pytest.raises(ValueError):
            sample_alpha(bad, rng)


# -- point channel -----------------------------------------------------------


def test_centroid_point_radius_zero():
    m = np.zeros((20, 20), dtype=bool)
    m[6:13, 6:13] = True
    p = build_point_channel(LabelSet("p", (20, 20), [InstanceAnnotation(4, m)]), "centroid", 0)
    assert p.channel.sum() == 1 and p.channel[9, 9]
    assert p.points == ((9, 9, 4),)


def test_random_interior_disk_radius_two():
    rng = np.random.default_rng(5)
    for patch, labels in generate_shape_world(SMALL, 10):
        p = build_point_channel(labels, "random-interior", 2, rng)
        assert len(p.points) == labels.instance_count
        for r, c, iid in p.points:
            assert labels.by_id()[iid].mask[r, c]
        set_pix = np.argwhere(p.channel)
        for r, c in set_pix:
            d2 = min((r - pr) ** 2 + (c - pc) ** 2 for pr, pc, _ in p.points)
            assert d2 <= 4
        assert p.channel.sum() <= 13 * len(p.points)


def test_two_instances_union_of_disks():
    a = np.zeros((30, 30), dtype=bool)
    a[2:9, 2:9] = True
    b = np.zeros((30, 30), dtype=bool)
    b[18:27, 18:27] = True
    labels = LabelSet("two", (30, 30), [InstanceAnnotation(7, a), InstanceAnnotation(9, b)])
    p = build_point_channel(labels, "centroid", 2)
    assert [pt[2] for pt in p.points] == [7, 9]
    assert p.channel.sum() == 26


def test_disk_clipped_at_border():
    m = np.zeros((10, 10), dtype=bool)
    m[0, 0] = True
    p = build_point_channel(LabelSet("c", (10, 10), [InstanceAnnotation(0, m)]), "centroid", 2)
    assert p.channel.sum() == 6  # quarter disk incl. axes: (0,0),(0,1),(0,2),(1,0),(2,0),(1,1)


def test_empty_instance_rejected():
    labels = LabelSet("e", (5, 5), [InstanceAnnotation(0, np.zeros((5, 5), bool))])
    with pytest.raises(GeometryError):
        build_point_channel(labels)
