"""Plain data records shared across modules."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from noisyseg.geometry import as_mask

PROVENANCES = ("true", "verified", "noisy", "corrected")


@dataclass(frozen=True)
class Patch:
    """One image tile: ``image`` is H x W x C float32 in [0, 1]."""

    patch_id: str
    image: np.ndarray
    source_gsd: Optional[float] = None
    geo_transform: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] not in (3, 4):
            raise ValueError(f"patch image must be H x W x 3|4, got {img.shape}")
        if img.size and (img.min() < 0 or img.max() > 1):
            raise ValueError("patch image values must lie in [0, 1]")
        object.__setattr__(self, "image", img)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass(frozen=True)
class InstanceAnnotation:
    instance_id: int
    mask: np.ndarray
    provenance: str = "true"
    applied_offset: Optional[tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "mask", as_mask(self.mask))
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "true" and self.applied_offset is not None:
            raise ValueError("true annotations carry no offset")
        if self.applied_offset is not None:
            dx, dy = self.applied_offset
            object.__setattr__(self, "applied_offset", (int(dx), int(dy)))


@dataclass(frozen=True)
class LabelSet:
    patch_id: str
    shape: tuple[int, int]
    instances: tuple[InstanceAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if inst.mask.shape != self.shape:
                raise ValueError(
                    f"instance {inst.instance_id} has shape {inst.mask.shape}, expected {self.shape}"
                )

    @property
    def instance_count(self) -> int:
        return len(self.instances)

    def union(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for inst in self.instances:
            out |= inst.mask
        return out

    def with_instances(self, instances) -> "LabelSet":
        return replace(self, instances=tuple(instances))

    def by_id(self) -> dict[int, InstanceAnnotation]:
        return {inst.instance_id: inst for inst in self.instances}


@dataclass(frozen=True)
class PointPrompt:
    patch_id: str
    points: tuple[tuple[int, int, int], ...]  # (row, col, instance_id)
    channel: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.channel.shape
