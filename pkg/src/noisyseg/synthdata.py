"""Synthetic shape-world corpus and the two label-noise injectors.

The shape world is a desk-scale stand-in for aerial building patches: a
textured background with disjoint bright polygons (rectangles, rotated
rectangles, L-shapes), each with its own true instance mask.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import ndimage

from noisyseg.geometry import (
    GeometryError,
    centroid_point,
    disk_offsets,
    make_polygon,
    random_interior_point,
    rasterize_polygon,
    translate_mask,
)
from noisyseg.records import InstanceAnnotation, LabelSet, Patch, PointPrompt

SHAPE_KINDS = ("rectangle", "rotated-rectangle", "L-shape")
POINT_STRATEGIES = ("centroid", "random-interior")

AlphaMode = Union[float, str]  # a fixed fraction in (0, 1], or "het"


@dataclass(frozen=True)
class ShapeWorldConfig:
    image_size: int = 128
    channels: int = 3
    shapes_per_image: tuple[int, int] = (1, 8)
    shape_size: tuple[int, int] = (10, 40)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    background_noise_level: float = 0.08
    foreground_contrast: float = 0.35
    seed: int = 0
    allow_overlap: bool = False
    max_attempts: int = 60

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        object.__setattr__(self, "shape_size", tuple(self.shape_size))
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image {self.shapes_per_image}")
        lo, hi = self.shape_size
        if not 2 <= lo <= hi or hi > self.image_size:
            raise ValueError(f"bad shape_size {self.shape_size}")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.channels not in (3, 4):
            raise ValueError("channels must be 3 or 4")
        if not self.shape_kinds or set(self.shape_kinds) - set(SHAPE_KINDS):
            raise ValueError(f"shape_kinds must be a nonempty subset of {SHAPE_KINDS}")
        if not 0 <= self.background_noise_level < 1 or not 0 < self.foreground_contrast <= 1:
            raise ValueError("noise level and contrast must lie in the unit interval")
        if self.foreground_contrast <= self.background_noise_level:
            raise ValueError("foreground_contrast must exceed background_noise_level")


def _shape_polygon(kind: str, size_x: float, size_y: float, rng: np.random.Generator):
    """Polygon vertices centered on the origin."""
    hx, hy = size_x / 2, size_y / 2
    if kind == "L-shape":
        fx, fy = rng.uniform(0.4, 0.65, 2)
        pts = [(-hx, -hy), (hx, -hy), (hx, -hy + fy * size_y),
               (-hx + fx * size_x, -hy + fy * size_y), (-hx + fx * size_x, hy), (-hx, hy)]
        quarter = rng.integers(4)
        ang = quarter * math.pi / 2
    else:
        pts = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
        ang = rng.uniform(0, math.pi) if kind == "rotated-rectangle" else 0.0
    c, s = math.cos(ang), math.sin(ang)
    return np.array([(c * x - s * y, s * x + c * y) for x, y in pts])


def _smooth_noise(rng, shape, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _make_patch(cfg: ShapeWorldConfig, index: int) -> tuple[Patch, LabelSet]:
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.image_size
    target = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
    occupied = np.zeros((n, n), dtype=bool)
    masks = []
    for _ in range(target):
        for _attempt in range(cfg.max_attempts):
            kind = cfg.shape_kinds[rng.integers(len(cfg.shape_kinds))]
            sx, sy = rng.uniform(cfg.shape_size[0], cfg.shape_size[1], 2)
            verts = _shape_polygon(kind, sx, sy, rng)
            lo, hi = verts.min(axis=0), verts.max(axis=0)
            if np.any(hi - lo > n - 2):
                continue
            cx = rng.uniform(1 - lo[0], n - 1 - hi[0])
            cy = rng.uniform(1 - lo[1], n - 1 - hi[1])
            m = rasterize_polygon(make_polygon(verts + (cx, cy)), (n, n))
            if m.sum() < 4:
                continue
            if not cfg.allow_overlap and (ndimage.binary_dilation(m) & occupied).any():
                continue
            occupied |= m
            masks.append(m)
            break

    channels = cfg.channels
    base = rng.uniform(0.25, 0.4, channels)
    img = np.empty((n, n, channels))
    for ch in range(channels):
        texture = 0.6 * _smooth_noise(rng, (n, n), 3.0) + 0.4 * rng.standard_normal((n, n))
        img[..., ch] = base[ch] + cfg.background_noise_level * texture
    for m in masks:
        tint = cfg.foreground_contrast * rng.uniform(0.8, 1.2, channels)
        shade = 0.5 * cfg.background_noise_level * rng.standard_normal((n, n))
        for ch in range(channels):
            img[..., ch][m] = base[ch] + tint[ch] + shade[m]
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    pid = f"synth-{cfg.seed}-{index:05d}"
    instances = [InstanceAnnotation(i, m, "true") for i, m in enumerate(masks)]
    return Patch(pid, img), LabelSet(pid, (n, n), instances)


def generate_shape_world(cfg: ShapeWorldConfig, n_patches: int, workers: int = 1, start: int = 0):
    """Generate ``n_patches`` (Patch, LabelSet) pairs.

    Patch ``i`` is seeded from ``(cfg.seed, start + i)`` alone, so output is
    identical for any worker count. Shapes that cannot be placed after
    ``cfg.max_attempts`` tries are skipped, never raising.
    """
    idx = range(start, start + n_patches)
    if workers > 1 and n_patches > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_make_patch, [cfg] * n_patches, idx, chunksize=8))
    return [_make_patch(cfg, i) for i in idx]


# -- misalignment ------------------------------------------------------------


def shift_instances(labels: LabelSet, offsets) -> LabelSet:
    """Translate instance ``k`` by ``offsets[k] = (dx, dy)``; provenance becomes noisy."""
    offsets = np.asarray(offsets, dtype=int).reshape(-1, 2)
    if len(offsets) != labels.instance_count:
        raise ValueError("need one offset per instance")
    out = [
        InstanceAnnotation(inst.instance_id, translate_mask(inst.mask, dx, dy), "noisy", (dx, dy))
        for inst, (dx, dy) in zip(labels.instances, offsets)
    ]
    return labels.with_instances(out)


def inject_misalignment(labels: LabelSet, shift_range: int, rng: np.random.Generator) -> LabelSet:
    """Shift each instance independently by integer (dx, dy) uniform on [-s, s]^2."""
    if shift_range < 0:
        raise ValueError("shift_range must be >= 0")
    offsets = rng.integers(-shift_range, shift_range + 1, size=(labels.instance_count, 2))
    return shift_instances(labels, offsets)


def band_offsets(n: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` offsets whose per-axis magnitudes are uniform integers in [lo, hi] with random sign."""
    if lo < 0 or lo > hi:
        raise ValueError(f"bad shift band ({lo}, {hi})")
    mag = rng.integers(lo, hi + 1, size=(n, 2))
    sign = rng.choice((-1, 1), size=(n, 2))
    return mag * sign


# -- omission ----------------------------------------------------------------


def n_selected(alpha: float, count: int) -> int:
    return min(max(math.floor(alpha * count + 0.5), 1), count)


def select_instances(labels: LabelSet, alpha: float, rng: np.random.Generator) -> LabelSet:
    """Keep ``clamp(round(alpha * A), 1, A)`` instances chosen without replacement.

    Surviving instances keep their masks bit-for-bit and their original order.
    """
    a = labels.instance_count
    if a == 0:
        raise ValueError(f"patch {labels.patch_id} has no instances to select from")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    keep = np.sort(rng.choice(a, size=n_selected(alpha, a), replace=False))
    return labels.with_instances(labels.instances[k] for k in keep)


def parse_alpha_mode(mode) -> AlphaMode:
    if isinstance(mode, str) and mode.lower() in ("het", "heterogeneous"):
        return "het"
    value = float(mode)
    if not 0 < value <= 1:
        raise ValueError(f"fixed alpha must lie in (0, 1], got {value}")
    return value


def sample_alpha(mode: AlphaMode, rng: np.random.Generator) -> float:
    """A fixed alpha, or a fresh uniform draw on (0, 1] for ``"het"``."""
    mode = parse_alpha_mode(mode)
    if mode == "het":
        return 1.0 - rng.random()
    return mode


# -- point prompts -----------------------------------------------------------


def render_points(points, shape, radius: int = 2) -> np.ndarray:
    """Draw each ``(row, col, ...)`` as a filled disk, clipped at the borders."""
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    offs = disk_offsets(radius)
    for p in points:
        rr = offs[:, 0] + p[0]
        cc = offs[:, 1] + p[1]
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[rr[ok], cc[ok]] = True
    return out


def build_point_channel(
    labels: LabelSet, strategy: str = "centroid", radius: int = 2, rng: np.random.Generator | None = None
) -> PointPrompt:
    """One prompt point per instance, rendered into a binary channel."""
    if strategy not in POINT_STRATEGIES:
        raise ValueError(f"unknown point strategy {strategy!r}")
    if strategy == "random-interior" and rng is None:
        raise ValueError("random-interior prompts need an rng")
    points = []
    for inst in labels.instances:
        if not inst.mask.any():
            raise GeometryError(f"instance {inst.instance_id} of {labels.patch_id} is empty")
        if strategy == "centroid":
            r, c = centroid_point(inst.mask)
        else:
            r, c = random_interior_point(inst.mask, rng)
        points.append((r, c, inst.instance_id))
    return PointPrompt(labels.patch_id, tuple(points), render_points(points, labels.shape, radius))
