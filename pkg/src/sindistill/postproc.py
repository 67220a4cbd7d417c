"""Serial-number retrieval from a prediction map.

Rows containing any nonzero prediction are grouped into maximal runs
(bands); each band's nonzero pixels are split into nine clusters by Lloyd's
k-means and every cluster is transcribed by its most frequent class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .scenegen import CHARS_PER_SIN, codes_to_sin

MAX_ITER = 100
RESTARTS = 5


@dataclass
class Band:
    top: int
    bottom: int  # inclusive
    sub_map: np.ndarray

    @property
    def rows(self) -> range:
        return range(self.top, self.bottom + 1)


@dataclass
class Cluster:
    rows: np.ndarray  # absolute image rows of member pixels
    cols: np.ndarray
    codes: np.ndarray

    @property
    def centroid(self) -> tuple[float, float]:
        return float(self.rows.mean()), float(self.cols.mean())

    @property
    def size(self) -> int:
        return len(self.rows)

    def majority(self) -> int:
        counts = np.bincount(self.codes[self.codes > 0])
        return int(np.argmax(counts))  # ties go to the smaller code


@dataclass
class SinRecord:
    text: str
    clusters: list  # (class, (row, col), pixel_count), left to right
    band: tuple

    @property
    def centroids(self) -> list:
        return [c[1] for c in self.clusters]

    def to_json(self):
        return {"text": self.text, "band": [int(self.band[0]), int(self.band[1])],
                "centroids": [[float(r), float(c)] for r, c in self.centroids]}


def row_profile(pred) -> np.ndarray:
    """Number of nonzero predictions in every row."""
    return np.count_nonzero(np.asarray(pred) > 0, axis=1)


def partition_bands(profile, pred) -> list[Band]:
    """Maximal runs of consecutive rows with a positive count, top to bottom."""
    on = np.asarray(profile) > 0
    if not on.any():
        return []
    edges = np.diff(np.r_[0, on.astype(np.int8), 0])
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    pred = np.asarray(pred)
    return [Band(int(s), int(e), pred[s:e + 1]) for s, e in zip(starts, ends)]


def _lloyd(points, centers):
    """Lloyd iterations from ``centers``; (labels, sse) or None when a cluster empties."""
    labels = None
    for _ in range(MAX_ITER):
        new = kernels.kmeans_assign(points, centers)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=len(centers))
        if np.any(counts == 0):
            return None
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        centers = sums / counts[:, None]
    sse = float(((points - centers[labels]) ** 2).sum())
    return labels, sse


def _quantile_init(points, k):
    order = np.lexsort((points[:, 0], points[:, 1]))  # by column, then row
    n = len(points)
    picks = order[((np.arange(k) + 0.5) * n / k).astype(int)]
    return points[picks].copy()


def _gap_init(points, k):
    """Means of the k column runs left after cutting at the k-1 widest column gaps."""
    cols = np.unique(points[:, 1])
    if len(cols) < k:
        return None
    gaps = np.diff(cols)
    cut = np.sort(np.argsort(-gaps, kind="stable")[:k - 1])
    edges = np.r_[cols[0] - 1, cols[cut] + 0.5, cols[-1] + 1]
    seg = np.searchsorted(edges, points[:, 1]) - 1
    return np.array([points[seg == j].mean(axis=0) for j in range(k)])


def kmeans(points, k: int, seed: int, init=None):
    """Cluster labels for ``points`` (n, 2), or None when some cluster stays empty.

    If ``init`` centers are given and Lloyd converges from them with no empty
    cluster, that result is returned.  Otherwise Lloyd runs from two
    deterministic starts, the k column-quantile pixels and the means of the
    column runs between the widest gaps; the lower within-cluster sum of
    squares wins (the quantile start on ties).  Only if both starts lose a
    cluster does it restart from k distinct random pixels (seeded), up to
    RESTARTS times.
    """
    points = np.ascontiguousarray(points, dtype=float)
    if len(points) < k:
        return None
    if init is not None:
        first = _lloyd(points, np.array(init, dtype=float))
        if first is not None:
            return first[0]
    best = _lloyd(points, _quantile_init(points, k))
    g = _gap_init(points, k)
    if g is not None:
        alt = _lloyd(points, g)
        if alt is not None and (best is None or alt[1] < best[1]):
            best = alt
    rng = np.random.default_rng(seed)
    attempt = 0
    while best is None and attempt < RESTARTS:
        idx = rng.choice(len(points), size=k, replace=False)
        best = _lloyd(points, points[idx].copy())
        attempt += 1
    return None if best is None else best[0]


def _cores(sub_map):
    """Labelled one-pixel erosion of the nonzero support and the number of cores."""
    return ndimage.label(ndimage.binary_erosion(sub_map > 0))


def _core_init(comp, n, k, top):
    """Centroids of the k largest cores (ties to the upper-left), or None if fewer than k."""
    if n < k:
        return None
    sizes = ndimage.sum_labels(np.ones(comp.shape), comp, index=np.arange(1, n + 1))
    keep = np.sort(np.argsort(-sizes, kind="stable")[:k]) + 1
    ctr = np.array(ndimage.center_of_mass(np.ones(comp.shape), comp, keep))
    ctr[:, 0] += top
    return ctr


def _splits_a_blob(comp, rr, cc, codes, labels) -> bool:
    """True when two clusters share one eroded core and read the same class there.

    Eroding by one pixel first separates regions that merely touch, and a
    cut between differently labelled parts of a core is a boundary between
    two overlapping characters; what remains is a cut through one region.
    """
    ids = comp[rr, cc]
    inside = ids > 0
    seen = {}
    for key in np.unique(np.column_stack([ids[inside], labels[inside]]), axis=0):
        m = inside & (ids == key[0]) & (labels == key[1])
        cls = int(np.argmax(np.bincount(codes[m])))
        if cls in seen.setdefault(int(key[0]), set()):
            return True
        seen[int(key[0])].add(cls)
    return False


def cluster_band(band: Band, seed: int, k: int = CHARS_PER_SIN, min_cluster_px: int = 1,
                 reject_split: bool = True):
    """Nine clusters of the band's nonzero pixels, or None if the band is rejected.

    With ``reject_split`` a band whose clustering cuts one region in two is
    rejected: it holds fewer than nine separate characters.
    """
    rr, cc = np.nonzero(band.sub_map)
    if len(rr) < k:
        return None
    pts = np.column_stack([rr + band.top, cc]).astype(float)
    comp, n = _cores(band.sub_map)
    labels = kmeans(pts, k, seed, init=_core_init(comp, n, k, band.top))
    if labels is None:
        return None
    codes = band.sub_map[rr, cc]
    if reject_split and _splits_a_blob(comp, rr, cc, codes, labels):
        return None
    clusters = []
    for j in range(k):
        m = labels == j
        if m.sum() < max(1, min_cluster_px):
            return None
        clusters.append(Cluster(rows=rr[m] + band.top, cols=cc[m], codes=codes[m]))
    return clusters


def transcribe(clusters, band=None) -> SinRecord:
    """Modal class per cluster, read left to right by centroid column."""
    ordered = sorted(clusters, key=lambda c: (c.centroid[1], c.centroid[0]))
    items = [(c.majority(), c.centroid, c.size) for c in ordered]
    if band is None:
        rows = np.concatenate([c.rows for c in clusters])
        band = (int(rows.min()), int(rows.max()))
    return SinRecord(text=codes_to_sin(i[0] for i in items), clusters=items, band=band)


def recognize(pred, seed: int = 0, min_cluster_px: int = 1, reject_split: bool = True) -> list[SinRecord]:
    """All serial numbers readable from prediction map ``pred``, top to bottom."""
    pred = np.asarray(pred)
    records = []
    for band in partition_bands(row_profile(pred), pred):
        clusters = cluster_band(band, seed, min_cluster_px=min_cluster_px, reject_split=reject_split)
        if clusters is None:
            continue
        records.append(transcribe(clusters, (band.top, band.bottom)))
    return records
