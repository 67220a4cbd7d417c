import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from sindistill.gtd import rasterize_gtd
from sindistill.postproc import (Band, Cluster, cluster_band, kmeans, partition_bands, recognize, row_profile,
                                 transcribe)
from sindistill.scenegen import AnnotatedSlab, AnnotationSet, sin_to_codes


def disk_band(centers, radius=2.0, h=16, w=120, codes=None):
    rr, cc = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w), dtype=np.uint8)
    codes = codes or [1] * len(centers)
    for (r, c), k in zip(centers, codes):
        out[(rr - r) ** 2 + (cc - c) ** 2 <= radius ** 2] = k
    return out


def sin_annotation(sin, row, left=6.0, pitch=12.0):
    pts = np.array([[row, left + pitch * i] for i in range(9)])
    return AnnotatedSlab(pts, sin_to_codes(sin))


def test_row_profile_counts():
    assert row_profile(np.array([[0, 2, 0, 3, 0]])).tolist() == [2]
    assert not row_profile(np.zeros((4, 5), dtype=np.uint8)).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_row_profile_matches_scan(seed):
    o = np.random.default_rng(seed).integers(0, 12, (7, 9)) * (np.random.default_rng(seed + 1).random((7, 9)) < 0.3)
    expect = [sum(1 for v in row if v > 0) for row in o.tolist()]
    assert row_profile(o).tolist() == expect


def test_partition_runs():
    o = np.zeros((12, 4), dtype=np.uint8)
    o[[3, 4, 5, 9, 10], 0] = 1
    bands = partition_bands(row_profile(o), o)
    assert [(b.top, b.bottom) for b in bands] == [(3, 5), (9, 10)]
    assert bands[0].sub_map.shape == (3, 4)
    assert partition_bands(row_profile(np.zeros((5, 5))), np.zeros((5, 5))) == []


def test_three_slabs_give_three_bands():
    ann = AnnotationSet([sin_annotation("B12345678", r) for r in (10, 40, 70)])
    o = rasterize_gtd(ann, 96, 128)
    bands = partition_bands(row_profile(o), o)
    assert len(bands) == 3
    for b, r in zip(bands, (10, 40, 70)):
        assert b.top <= r <= b.bottom


def test_clusters_equal_components():
    centers = [(8, 6 + 12 * i) for i in range(9)]
    o = disk_band(centers)
    band = Band(0, o.shape[0] - 1, o)
    clusters = cluster_band(band, seed=0)
    comp, n = ndimage.label(o > 0)
    assert n == 9
    got = sorted(tuple(sorted(zip(c.rows.tolist(), c.cols.tolist()))) for c in clusters)
    want = sorted(tuple(sorted(zip(*np.nonzero(comp == j)))) for j in range(1, 10))
    assert got == want
    for c, ctr in zip(sorted(clusters, key=lambda c: c.centroid[1]), centers):
        assert c.centroid == pytest.approx(ctr)
        assert c.size == 13


def test_unequal_disks_still_separated():
    # irregular spacing gives disks of radius 2 to 5 side by side
    cols = [5.0, 13.0, 33.0, 53.0, 61.0, 81.0, 89.0, 97.0, 117.0]
    slab = AnnotatedSlab(np.array([[9.0, c] for c in cols]), [1] * 9)
    o = rasterize_gtd(AnnotationSet([slab]), 20, 124)
    clusters = cluster_band(Band(0, 19, o), seed=0)
    assert clusters is not None
    comp, _ = ndimage.label(o > 0)
    for c in clusters:
        assert len(np.unique(comp[c.rows, c.cols])) == 1


def test_eight_disks_rejected():
    o = disk_band([(8, 6 + 12 * i) for i in range(8)])
    assert cluster_band(Band(0, 15, o), seed=0) is None


def test_too_few_pixels_rejected():
    o = np.zeros((3, 20), dtype=np.uint8)
    o[1, :5] = 2
    assert cluster_band(Band(0, 2, o), seed=0) is None
    assert recognize(o) == []


def test_clustering_is_deterministic():
    o = disk_band([(8, 6 + 12 * i) for i in range(9)], radius=3)
    a = cluster_band(Band(0, 15, o), seed=3)
    b = cluster_band(Band(0, 15, o), seed=3)
    assert all(np.array_equal(x.rows, y.rows) and np.array_equal(x.cols, y.cols) for x, y in zip(a, b))


def test_kmeans_rejects_small_input():
    assert kmeans(np.zeros((5, 2)), 9, 0) is None


def test_majority_and_tie():
    assert Cluster(np.zeros(12), np.zeros(12), np.array([3] * 10 + [5] * 2)).majority() == 3
    assert Cluster(np.zeros(12), np.zeros(12), np.array([7] * 6 + [2] * 6)).majority() == 2


def test_transcribe_orders_by_column():
    codes = sin_to_codes("B12345678")
    clusters = [Cluster(np.array([5.0]), np.array([10.0 * (i + 1)]), np.array([k])) for i, k in enumerate(codes)]
    rec = transcribe(clusters[::-1])
    assert rec.text == "B12345678"
    cols = [c[1][1] for c in rec.clusters]
    assert cols == sorted(cols)


def test_recognize_gtd_two_slabs():
    ann = AnnotationSet([sin_annotation("B12345678", 12), sin_annotation("B90817263", 44)])
    recs = recognize(rasterize_gtd(ann, 64, 128), seed=0)
    assert [r.text for r in recs] == ["B12345678", "B90817263"]
    assert len(recs[0].to_json()["centroids"]) == 9


def test_stray_pixel_filtered():
    o = np.zeros((20, 20), dtype=np.uint8)
    o[4, 4] = 5
    assert recognize(o) == []


def test_min_cluster_px_filter():
    o = disk_band([(8, 6 + 12 * i) for i in range(9)], radius=1)  # 5-pixel plus shapes
    assert len(recognize(o)) == 1
    assert recognize(o, min_cluster_px=6) == []


def test_eight_distinct_disks_rejected():
    o = disk_band([(8, 6 + 12 * i) for i in range(8)], codes=list(range(1, 9)))
    assert cluster_band(Band(0, 15, o), seed=0) is None


def test_touching_clamped_disks_are_read():
    # two centers 4.2 px apart get the clamped radius 2 and touch diagonally
    cols = [6.0, 18.0, 30.0, 42.0, 46.2, 58.0, 70.0, 82.0, 94.0]
    slab = AnnotatedSlab(np.array([[8.0, c] for c in cols]), sin_to_codes("B12345678"))
    o = rasterize_gtd(AnnotationSet([slab]), 16, 104)
    assert ndimage.label(o > 0, structure=np.ones((3, 3)))[1] == 8
    assert [r.text for r in recognize(o)] == ["B12345678"]


def test_unequal_disks_read_exactly():
    cols = [5.0, 13.0, 33.0, 53.0, 61.0, 81.0, 89.0, 97.0, 117.0]
    slab = AnnotatedSlab(np.array([[9.0, c] for c in cols]), sin_to_codes("B12345678"))
    o = rasterize_gtd(AnnotationSet([slab]), 20, 124)
    assert [r.text for r in recognize(o)] == ["B12345678"]
