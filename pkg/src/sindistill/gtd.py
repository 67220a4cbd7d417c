"""Weakly annotated ground truth: one circular region per clicked character center.

The radius of character i is a quarter of the distance to the nearest other
center of the same serial number, which keeps neighbouring regions apart.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .pgm import read_pgm, write_pgm
from .scenegen import NUM_CLASSES, AnnotationSet

R_MIN = 2.0
DEFAULT_RADIUS = 4.0


def char_radius(centers, i: int, r_min: float = R_MIN, default_radius: float = DEFAULT_RADIUS) -> float:
    """Quarter of the nearest-neighbour distance from center ``i``, clamped below at ``r_min``.

    A lone center gets ``default_radius``.  Duplicate centers are rejected.
    """
    pts = np.asarray(centers, dtype=float).reshape(-1, 2)
    if not 0 <= i < len(pts):
        raise IndexError(f"center index {i} out of range for {len(pts)} centers")
    if len(pts) == 1:
        return float(default_radius)
    d = np.hypot(pts[:, 0] - pts[i, 0], pts[:, 1] - pts[i, 1])
    d = np.delete(d, i)
    if np.any(d == 0):
        raise ValueError(f"center {i} duplicates another center")
    return max(float(d.min()) / 4.0, r_min)


def slab_radii(points, r_min: float = R_MIN, default_radius: float = DEFAULT_RADIUS) -> np.ndarray:
    return np.array([char_radius(points, i, r_min, default_radius) for i in range(len(points))])


def _rasterize(annotations: AnnotationSet, height: int, width: int, r_min, default_radius):
    codes = np.zeros((height, width), dtype=np.uint8)
    owner_r = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    index = 0
    for slab in annotations.slabs:
        pts = np.asarray(slab.points, dtype=float)
        for (r0, c0), cls, rad in zip(pts, slab.classes, slab_radii(pts, r_min, default_radius)):
            if not (0 <= r0 <= height - 1 and 0 <= c0 <= width - 1):
                raise ValueError(f"annotated point ({r0}, {c0}) lies outside a {height}x{width} image")
            if not 1 <= cls <= NUM_CLASSES:
                raise ValueError(f"class code {cls} outside 1..{NUM_CLASSES}")
            top, bot = max(0, math.ceil(r0 - rad)), min(height - 1, math.floor(r0 + rad))
            left, right = max(0, math.ceil(c0 - rad)), min(width - 1, math.floor(c0 + rad))
            rr, cc = np.mgrid[top:bot + 1, left:right + 1]
            inside = (rr - r0) ** 2 + (cc - c0) ** 2 <= rad * rad
            win_r = owner_r[top:bot + 1, left:right + 1]
            win_c = codes[top:bot + 1, left:right + 1]
            # overlaps: smaller radius wins, then the lower class code
            better = inside & ((rad < win_r) | ((rad == win_r) & (cls < win_c)))
            win_r[better] = rad
            win_c[better] = cls
            owner[top:bot + 1, left:right + 1][better] = index
            index += 1
    return codes, owner


def rasterize_gtd(annotations: AnnotationSet, height: int, width: int,
                  r_min: float = R_MIN, default_radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """Label map with class codes inside each character disk and 0 elsewhere.

    Radii are computed per serial number over its own nine centers.
    """
    codes, _ = _rasterize(annotations, height, width, r_min, default_radius)
    return codes


def region_areas(annotations: AnnotationSet, height: int, width: int,
                 r_min: float = R_MIN, default_radius: float = DEFAULT_RADIUS) -> list[list[int]]:
    """Pixel count of every character's region in the rasterized label map, per slab."""
    _, owner = _rasterize(annotations, height, width, r_min, default_radius)
    counts = np.bincount(owner[owner >= 0], minlength=sum(len(s.points) for s in annotations.slabs))
    out, k = [], 0
    for slab in annotations.slabs:
        out.append([int(c) for c in counts[k:k + len(slab.points)]])
        k += len(slab.points)
    return out


def write_gtd(path, label_map):
    write_pgm(path, np.asarray(label_map, dtype=np.uint8))


def read_gtd(path) -> np.ndarray:
    lm = read_pgm(path)
    if lm.max(initial=0) > NUM_CLASSES:
        raise ValueError(f"{path}: label value {lm.max()} outside 0..{NUM_CLASSES}")
    return lm


def gtd_path(scene_path) -> Path:
    p = Path(scene_path)
    return p.with_name(p.name[:-len(".pgm")] + ".gtd.pgm")
