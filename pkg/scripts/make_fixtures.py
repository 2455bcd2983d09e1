"""Regenerate the small ingestion fixtures under tests/fixtures/."""
from pathlib import Path

import numpy as np
from PIL import Image
from shapely.geometry import Polygon, box

from noisyseg.geometry import rasterize_polygon
from noisyseg.ingest import write_geojson

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"

# pixel coordinates on a 256 x 256 raster; tile membership is listed in test_ingest
BUILDINGS = [
    box(10, 10, 40, 40),
    box(100, 20, 160, 50),
    box(110, 110, 150, 150),
    Polygon([(150, 150), (250, 160), (200, 250)]),
    box(20, 200, 60, 240),
]

UTM_X, UTM_Y = 300_000.0, 4_000_000.0
FIELDS = [
    box(0, 0, 30, 30),
    box(100, 0, 120, 20),
    box(200, 0, 208, 100),
    box(300, 0, 325, 20),
    box(400, 0, 426, 20),
    box(500, 0, 510.5, 60),
    box(600, 0, 610, 60),
    Polygon([(700, 0), (760, 0), (760, 20), (720, 20), (720, 60), (700, 60)]),
    Polygon([(800, 0), (840, 0), (800, 40)]),
    box(900, 0, 905, 200),
]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:256, 0:256]
    img = np.stack([60 + xx // 8, 70 + yy // 8, 80 + (xx + yy) // 16], axis=-1).astype(float)
    for p in BUILDINGS:
        img[rasterize_polygon(p, (256, 256))] += 90
    Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(OUT / "raster.png")
    write_geojson(OUT / "buildings.geojson", BUILDINGS)
    fields = [
        Polygon([(x + UTM_X, y + UTM_Y) for x, y in p.exterior.coords]) for p in FIELDS
    ]
    write_geojson(OUT / "fields.geojson", fields, crs="EPSG:32611")


if __name__ == "__main__":
    main()
