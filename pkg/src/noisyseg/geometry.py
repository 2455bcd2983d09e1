"""Raster/vector primitives and segmentation metrics.

Masks are 2-D boolean numpy arrays indexed ``[row, col]``. Polygons are shapely
polygons whose coordinates are ``(x, y) = (col, row)`` in pixel space, so the
pixel ``(r, c)`` has its center at ``(c + 0.5, r + 0.5)``. Offsets are always
``(dx, dy)``: ``dx`` moves along columns, ``dy`` along rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.geometry.base import BaseGeometry


class GeometryError(ValueError):
    """Invalid geometric input (degenerate polygon, empty mask, shape mismatch)."""


@dataclass(frozen=True)
class Metrics:
    per_image_iou: list[float]
    miou: float
    n_images: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_images", len(self.per_image_iou))


def as_mask(m) -> np.ndarray:
    """Coerce to a boolean 2-D array, rejecting non-binary values."""
    a = np.asarray(m)
    if a.ndim != 2:
        raise GeometryError(f"mask must be 2-D, got shape {a.shape}")
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise GeometryError("mask values must be 0 or 1")
    return a.astype(bool)


def make_polygon(exterior, holes=None) -> Polygon:
    """Build a validated polygon.

    Rejects rings with fewer than three distinct vertices and self-intersecting
    rings. A closing vertex equal to the first is accepted but not required.
    """
    ext = [tuple(map(float, p)) for p in exterior]
    if len(set(ext)) < 3:
        raise GeometryError(f"polygon needs >= 3 distinct vertices, got {len(set(ext))}")
    inner = []
    for h in holes or ():
        ring = [tuple(map(float, p)) for p in h]
        if len(set(ring)) < 3:
            raise GeometryError("hole needs >= 3 distinct vertices")
        inner.append(ring)
    poly = Polygon(ext, inner)
    if not poly.is_valid:
        raise GeometryError(f"invalid polygon: {shapely.is_valid_reason(poly)}")
    return poly


def _check_polygon(poly) -> None:
    if not isinstance(poly, Polygon):
        raise GeometryError(f"expected a Polygon, got {type(poly).__name__}")
    if poly.is_empty or len(set(poly.exterior.coords)) < 3:
        raise GeometryError("polygon needs >= 3 distinct vertices")
    if not poly.is_valid:
        raise GeometryError(f"invalid polygon: {shapely.is_valid_reason(poly)}")


def rasterize_polygon(poly, dims: tuple[int, int]) -> np.ndarray:
    """Rasterize with the pixel-center rule: a pixel is set iff its center lies
    strictly inside the polygon.

    ``poly`` may also be a MultiPolygon or GeometryCollection (as produced by
    clipping); every polygonal part is rasterized into the same mask.
    """
    h, w = dims
    out = np.zeros((h, w), dtype=bool)
    if isinstance(poly, Polygon):
        _check_polygon(poly)
        parts = [poly]
    elif isinstance(poly, BaseGeometry):
        parts = [g for g in getattr(poly, "geoms", [poly]) if isinstance(g, Polygon) and not g.is_empty]
    else:
        raise GeometryError(f"cannot rasterize {type(poly).__name__}")
    for part in parts:
        minx, miny, maxx, maxy = part.bounds
        c0 = max(int(np.floor(minx - 0.5)), 0)
        c1 = min(int(np.ceil(maxx - 0.5)) + 1, w)
        r0 = max(int(np.floor(miny - 0.5)), 0)
        r1 = min(int(np.ceil(maxy - 0.5)) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
        out[r0:r1, c0:c1] |= shapely.contains_xy(part, cols, rows)
    return out


def translate_mask(m, dx: int, dy: int) -> np.ndarray:
    """Shift every set pixel by ``(dx, dy)``; pixels leaving the grid are dropped."""
    m = as_mask(m)
    if int(dx) != dx or int(dy) != dy:
        raise GeometryError("translation offsets must be integers")
    dx, dy = int(dx), int(dy)
    h, w = m.shape
    out = np.zeros_like(m)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[dst_r, dst_c] = m[src_r, src_c]
    return out


def erode_polygon(poly, distance: float, resolution: float = 1.0):
    """Offset ``poly`` inward by ``distance`` meters.

    ``resolution`` is the size of one coordinate unit in meters (1.0 for a
    metric CRS, the GSD for pixel coordinates). Mitred joins keep rectangles
    rectangular. Returns ``None`` when nothing survives; multi-part results
    are kept whole.
    """
    if distance < 0:
        raise GeometryError("erosion distance must be >= 0")
    if resolution <= 0:
        raise GeometryError("resolution must be positive")
    if distance == 0:
        return poly
    out = poly.buffer(-distance / resolution, join_style="mitre")
    if out.is_empty or out.area == 0:
        return None
    return out


def iou(a, b) -> float:
    """Intersection over union; two empty masks score 1.0."""
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def union_mask(masks) -> np.ndarray:
    """Union of a mask or a sequence of instance masks."""
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        return as_mask(masks)
    masks = [as_mask(m) for m in masks]
    if not masks:
        raise GeometryError("cannot take the union of zero masks without dimensions")
    out = np.zeros_like(masks[0])
    for m in masks:
        if m.shape != out.shape:
            raise GeometryError(f"instance shapes differ: {m.shape} vs {out.shape}")
        out |= m
    return out


def miou(pairs: Sequence) -> Metrics:
    """Per-image IoU averaged over images.

    Each pair is ``(predicted, true)``; either side may be a single mask or a
    list of instance masks, which are unioned per image first.
    """
    if len(pairs) == 0:
        raise GeometryError("miou needs at least one image")
    scores = [iou(union_mask(p), union_mask(t)) for p, t in pairs]
    return Metrics(per_image_iou=scores, miou=float(np.mean(scores)))


def centroid_point(m) -> tuple[int, int]:
    """Rounded centroid of the set pixels, snapped to the nearest set pixel
    (ties: smallest row, then smallest column) if it falls outside the mask."""
    m = as_mask(m)
    pts = np.argwhere(m)
    if len(pts) == 0:
        raise GeometryError("centroid of an empty mask")
    cr, cc = pts.mean(axis=0)
    r, c = int(np.floor(cr + 0.5)), int(np.floor(cc + 0.5))
    if m[r, c]:
        return r, c
    d2 = (pts[:, 0] - cr) ** 2 + (pts[:, 1] - cc) ** 2
    # argwhere is row-major, so argmin's first-hit rule is the tie-break
    k = int(np.argmin(d2))
    return int(pts[k, 0]), int(pts[k, 1])


def random_interior_point(m, rng: np.random.Generator) -> tuple[int, int]:
    """A set pixel drawn uniformly at random."""
    m = as_mask(m)
    pts = np.argwhere(m)
    if len(pts) == 0:
        raise GeometryError("interior point of an empty mask")
    r, c = pts[rng.integers(len(pts))]
    return int(r), int(c)


def disk_offsets(radius: int) -> np.ndarray:
    """Integer ``(dr, dc)`` offsets with ``dr**2 + dc**2 <= radius**2``."""
    k = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(k, k, indexing="ij")
    keep = dr**2 + dc**2 <= radius**2
    return np.stack([dr[keep], dc[keep]], axis=1)
