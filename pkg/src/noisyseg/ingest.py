"""Raster/vector ingestion and the on-disk dataset manifest.

Manifest format (JSON Lines, one record per patch, UTF-8)::

    {"patch_id": ..., "image": "images/x.png",
     "masks": [{"path": "masks/x/0.png", "provenance": "true",
                "instance_id": 0, "offset": null}, ...],
     "split": "train", "n_instances": 1}

Paths are relative to the manifest's directory. Masks are 8-bit single
channel PNGs (0 background, 255 instance); images are 8-bit RGB or RGBA
PNGs holding values in [0, 1] scaled to 0..255.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import shapely
from PIL import Image
from shapely.geometry import Polygon, box, shape
from shapely.strtree import STRtree

from noisyseg.geometry import erode_polygon, make_polygon, rasterize_polygon
from noisyseg.records import PROVENANCES, InstanceAnnotation, LabelSet, Patch

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
GEOGRAPHIC_CRS = {
    "EPSG:4326", "EPSG:4269", "EPSG:4258", "OGC:CRS84", "CRS84",
    "URN:OGC:DEF:CRS:OGC:1.3:CRS84", "URN:OGC:DEF:CRS:EPSG::4326",
}


class ManifestError(ValueError):
    """Malformed manifest record or missing referenced file."""


# -- rasters ---------------------------------------------------------------------


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    f = n_in / n_out
    w = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * f, (o + 1) * f
        for i in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            w[o, i] = min(hi, i + 1) - max(lo, i)
    return w / w.sum(axis=1, keepdims=True)


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] += 1 - frac
    w[np.arange(n_out), hi] += frac
    return w


def resample_raster(raster, source_gsd: float, target_gsd: float) -> np.ndarray:
    """Resample to a new ground sample distance.

    Output dims are ``round(in_dims * source_gsd / target_gsd)``. Coarsening
    uses area-weighted averaging, refining uses bilinear interpolation.
    """
    if source_gsd <= 0 or target_gsd <= 0:
        raise ValueError("ground sample distances must be positive")
    a = np.asarray(raster, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
    h, w = a.shape[:2]
    ratio = source_gsd / target_gsd
    oh, ow = max(1, round(h * ratio)), max(1, round(w * ratio))
    weights = _area_weights if target_gsd >= source_gsd else _linear_weights
    rows = np.tensordot(weights(h, oh), a, axes=(1, 0))
    out = np.einsum("pj,ojc->opc", weights(w, ow), rows, optimize=True)
    return out[..., 0] if squeeze else out


def normalize_tile(tile) -> np.ndarray:
    """Per-channel min-max scaling to [0, 1]; constant channels map to 0."""
    t = np.asarray(tile, dtype=np.float64)
    lo = t.min(axis=(0, 1), keepdims=True)
    span = t.max(axis=(0, 1), keepdims=True) - lo
    return np.where(span > 0, (t - lo) / np.where(span > 0, span, 1), 0.0).astype(np.float32)


def pixel_polygons(polygons, geo_transform):
    """Map CRS polygons to raster pixel coordinates with a GDAL-order affine
    ``(x0, dx_col, dx_row, y0, dy_col, dy_row)``."""
    x0, a, b, y0, d, e = geo_transform
    det = a * e - b * d
    if det == 0:
        raise ValueError("geo_transform is singular")
    inv = [e / det, -b / det, -d / det, a / det, 0.0, 0.0]
    return [
        shapely.affinity.affine_transform(shapely.affinity.translate(p, -x0, -y0), inv)
        for p in polygons
    ]


def slice_raster(
    raster,
    polygons: Sequence[Polygon],
    tile: int,
    stride: Optional[int] = None,
    *,
    prefix: str = "tile",
    gsd: Optional[float] = None,
    geo_transform: Optional[tuple] = None,
    provenance: str = "true",
) -> list[tuple[Patch, LabelSet]]:
    """Cut ``raster`` (H x W x C) into ``tile`` x ``tile`` patches.

    Polygons are in raster pixel coordinates, or in CRS coordinates when
    ``geo_transform`` is given. Each polygon touching a tile is clipped to it
    and rasterized; its index in ``polygons`` becomes the instance id, so a
    polygon straddling tiles keeps one id. Right/bottom remainders that do not
    fill a tile are dropped.
    """
    stride = stride or tile
    img = np.asarray(raster)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    if tile > h or tile > w:
        raise ValueError(f"tile {tile} exceeds raster {h}x{w}")
    polys = pixel_polygons(polygons, geo_transform) if geo_transform else list(polygons)
    tree = STRtree(polys) if polys else None
    rows = range(0, h - tile + 1, stride)
    cols = range(0, w - tile + 1, stride)
    rem_h, rem_w = h - (rows[-1] + tile), w - (cols[-1] + tile)
    if rem_h or rem_w:
        log.info("slice_raster: dropping remainder of %d rows and %d cols", rem_h, rem_w)
    out = []
    for r0 in rows:
        for c0 in cols:
            pid = f"{prefix}_r{r0:05d}_c{c0:05d}"
            window = box(c0, r0, c0 + tile, r0 + tile)
            instances = []
            hits = sorted(tree.query(window)) if tree is not None else []
            for k in hits:
                clipped = polys[k].intersection(window)
                if clipped.is_empty:
                    continue
                local = shapely.affinity.translate(clipped, -c0, -r0)
                m = rasterize_polygon(local, (tile, tile))
                if m.any():
                    instances.append(InstanceAnnotation(int(k), m, provenance))
            gt = None
            if geo_transform:
                x0, a, b, y0, d, e = geo_transform
                gt = (x0 + c0 * a + r0 * b, a, b, y0 + c0 * d + r0 * e, d, e)
            patch_img = normalize_tile(img[r0 : r0 + tile, c0 : c0 + tile])
            if patch_img.shape[2] == 1:
                patch_img = np.repeat(patch_img, 3, axis=2)
            out.append((Patch(pid, patch_img, gsd, gt), LabelSet(pid, (tile, tile), instances)))
    return out


def coverage_filter(patch: Patch, labels: LabelSet, threshold: float = 0.10) -> bool:
    """Keep a patch iff its labelled area covers at least ``threshold`` of it."""
    h, w = labels.shape
    return np.count_nonzero(labels.union()) >= threshold * h * w


def is_metric_crs(crs: Optional[str]) -> bool:
    if crs is None:
        return True
    return crs.strip().upper() not in GEOGRAPHIC_CRS


def filter_and_erode_fields(
    polys, min_area: float = 500.0, erode: float = 5.0, crs: Optional[str] = None
) -> list:
    """Drop fields of area <= ``min_area`` m^2, erode the rest by ``erode`` m,
    and drop whatever erodes away."""
    if not is_metric_crs(crs):
        raise ValueError(f"field polygons must be in a metric CRS, got {crs}")
    out = []
    for p in polys:
        if p.area <= min_area:
            continue
        e = erode_polygon(p, erode)
        if e is not None:
            out.append(e)
    return out


# -- vectors and rasters on disk ---------------------------------------------------


def read_geojson(path) -> tuple[list[Polygon], Optional[str]]:
    """Polygons (MultiPolygons are split) and the declared CRS name, if any."""
    doc = json.loads(Path(path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    crs = (doc.get("crs") or {}).get("properties", {}).get("name")
    polys = []
    for feat in doc["features"]:
        geom = shape(feat["geometry"])
        parts = geom.geoms if geom.geom_type == "MultiPolygon" else [geom]
        for g in parts:
            if g.geom_type != "Polygon":
                raise ValueError(f"{path}: unsupported geometry {g.geom_type}")
            polys.append(make_polygon(g.exterior.coords, [h.coords for h in g.interiors]))
    return polys, crs


def write_geojson(path, polys, crs: Optional[str] = None) -> None:
    doc = {"type": "FeatureCollection", "features": []}
    if crs:
        doc["crs"] = {"type": "name", "properties": {"name": crs}}
    for i, p in enumerate(polys):
        doc["features"].append(
            {"type": "Feature", "properties": {"id": i}, "geometry": shapely.geometry.mapping(p)}
        )
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_raster(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def write_image(path, image) -> None:
    img = np.asarray(image)
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(q, mode="RGBA" if q.shape[2] == 4 else "RGB").save(path, optimize=False)


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, optimize=False)


def read_mask(path) -> np.ndarray:
    a = np.asarray(Image.open(path))
    if a.ndim != 2:
        raise ManifestError(f"{path}: mask must be single-channel")
    return a > 127


# -- manifest -------------------------------------------------------------------


@dataclass(frozen=True)
class MaskRef:
    path: str
    provenance: str
    instance_id: int
    offset: Optional[tuple[int, int]] = None

    def to_json(self) -> dict:
        return {"path": self.path, "provenance": self.provenance, "instance_id": self.instance_id,
                "offset": list(self.offset) if self.offset is not None else None}


@dataclass(frozen=True)
class ManifestRecord:
    patch_id: str
    image: str
    masks: tuple[MaskRef, ...]
    split: str
    n_instances: int

    def to_json(self) -> dict:
        return {"patch_id": self.patch_id, "image": self.image,
                "masks": [m.to_json() for m in self.masks],
                "split": self.split, "n_instances": self.n_instances}


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = field(default=Path("."), compare=False)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == name], self.root)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def __len__(self):
        return len(self.records)


def _parse_record(obj, where: str) -> ManifestRecord:
    try:
        masks = tuple(
            MaskRef(
                str(m["path"]),
                str(m["provenance"]),
                int(m["instance_id"]),
                tuple(int(v) for v in m["offset"]) if m.get("offset") is not None else None,
            )
            for m in obj["masks"]
        )
        rec = ManifestRecord(str(obj["patch_id"]), str(obj["image"]), masks, str(obj["split"]),
                             int(obj["n_instances"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: malformed record ({exc!r})") from exc
    if rec.split not in SPLITS:
        raise ManifestError(f"{where}: unknown split {rec.split!r}")
    if rec.n_instances != len(rec.masks):
        raise ManifestError(f"{where}: n_instances={rec.n_instances} but {len(rec.masks)} masks listed")
    for m in rec.masks:
        if m.provenance not in PROVENANCES:
            raise ManifestError(f"{where}: unknown provenance {m.provenance!r}")
        if m.offset is not None and len(m.offset) != 2:
            raise ManifestError(f"{where}: offset must be [dx, dy]")
    return rec


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{where}: invalid JSON ({exc.msg})") from exc
            records.append(_parse_record(obj, where))
    manifest = DatasetManifest(records, path.parent)
    if check_files:
        for rec in records:
            for rel in [rec.image] + [m.path for m in rec.masks]:
                if not manifest.resolve(rel).exists():
                    raise ManifestError(f"{path}: record {rec.patch_id} references missing file {rel}")
    return manifest


def split_dataset(manifest: DatasetManifest, ratios: Sequence[float], seed: int = 0) -> DatasetManifest:
    """Assign train/val[/test] tags by a seeded random permutation.

    Split sizes are ``floor(r * n + 0.5)`` for all but the last positive
    split, which takes the remainder. A zero ratio leaves that split unused.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) not in (2, 3) or any(r < 0 for r in ratios):
        raise ValueError("ratios must be 2 or 3 nonnegative fractions")
    if abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(manifest.records)
    active = [i for i, r in enumerate(ratios) if r > 0]
    counts = [0] * len(ratios)
    for i in active[:-1]:
        counts[i] = math.floor(ratios[i] * n + 0.5)
    counts[active[-1]] = n - sum(counts)
    for i in active:
        if counts[i] <= 0:
            raise ValueError(f"split {SPLITS[i]} would be empty ({n} records, ratios {ratios})")
    order = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype=object)
    start = 0
    for i, c in enumerate(counts):
        tags[order[start : start + c]] = SPLITS[i]
        start += c
    records = [replace(rec, split=str(tag)) for rec, tag in zip(manifest.records, tags)]
    return DatasetManifest(records, manifest.root)


# -- corpus <-> disk -----------------------------------------------------------------


def write_corpus(
    pairs,
    out_dir,
    splits="train",
    manifest_name: str = "manifest.jsonl",
    image_paths: Optional[dict] = None,
) -> DatasetManifest:
    """Write (Patch, LabelSet) pairs plus a manifest under ``out_dir``.

    ``splits`` is one tag for every record or a ``{patch_id: tag}`` mapping.
    ``image_paths`` maps patch ids to existing image files to reference
    instead of writing new copies.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for patch, labels in pairs:
        pid = patch.patch_id
        if image_paths and pid in image_paths:
            img_rel = os.path.relpath(image_paths[pid], out_dir)
        else:
            img_rel = f"images/{pid}.png"
            write_image(out_dir / img_rel, patch.image)
        mask_dir = out_dir / "masks" / pid
        mask_dir.mkdir(parents=True, exist_ok=True)
        refs = []
        for inst in labels.instances:
            rel = f"masks/{pid}/{inst.instance_id}.png"
            write_mask(out_dir / rel, inst.mask)
            refs.append(MaskRef(rel, inst.provenance, inst.instance_id, inst.applied_offset))
        tag = splits if isinstance(splits, str) else splits[pid]
        records.append(ManifestRecord(pid, img_rel, tuple(refs), tag, len(refs)))
    manifest = DatasetManifest(records, out_dir)
    write_manifest(manifest, out_dir / manifest_name)
    return manifest


def load_record(manifest: DatasetManifest, rec: ManifestRecord) -> tuple[Patch, LabelSet]:
    image = read_image(manifest.resolve(rec.image))
    instances = [
        InstanceAnnotation(m.instance_id, read_mask(manifest.resolve(m.path)), m.provenance, m.offset)
        for m in rec.masks
    ]
    return Patch(rec.patch_id, image), LabelSet(rec.patch_id, image.shape[:2], instances)


def load_corpus(manifest: DatasetManifest, split: Optional[str] = None) -> list[tuple[Patch, LabelSet]]:
    recs = manifest.records if split is None else manifest.split(split).records
    return [load_record(manifest, r) for r in recs]


def image_paths_of(manifest: DatasetManifest) -> dict:
    return {r.patch_id: manifest.resolve(r.image) for r in manifest.records}


def splits_of(manifest: DatasetManifest) -> dict:
    return {r.patch_id: r.split for r in manifest.records}
