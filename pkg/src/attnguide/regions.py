"""Greedy grouping-region identification with circular masks.

The strongest uncovered activation seeds a disk of radius ``r``; the next
seed is the strongest activation not covered by any earlier disk, and so on
until ``n_regions`` disks exist or nothing uncovered is left with positive
value. Cells remain available to every disk that covers them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .core import Coord, centroid_of
from .errors import ValidationError


@lru_cache(maxsize=None)
def disk_offsets(radius: float) -> np.ndarray:
    """Integer offsets ``(di, dj)`` with ``di**2 + dj**2 <= radius**2``, row-major."""
    k = int(np.floor(radius))
    di, dj = np.mgrid[-k:k + 1, -k:k + 1]
    keep = di * di + dj * dj <= radius * radius
    out = np.stack([di[keep], dj[keep]], axis=1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=4096)
def _members(center, radius, height, width):
    pos = disk_offsets(radius) + np.asarray(center)
    ok = (pos[:, 0] >= 0) & (pos[:, 0] < height) & (pos[:, 1] >= 0) & (pos[:, 1] < width)
    out = pos[ok]
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CircularMask:
    center: tuple
    radius: float

    def contains(self, i, j) -> bool:
        di, dj = i - self.center[0], j - self.center[1]
        return di * di + dj * dj <= self.radius * self.radius

    def full_disk(self) -> np.ndarray:
        """All disk positions, including ones outside the map (row-major)."""
        return disk_offsets(float(self.radius)) + np.asarray(self.center)

    def members(self, height: int, width: int) -> np.ndarray:
        """In-bounds member cells as an ``(n, 2)`` int array (read-only)."""
        return _members(tuple(int(c) for c in self.center), float(self.radius), height, width)

    def coverage(self, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=bool)
        m = self.members(height, width)
        mask[m[:, 0], m[:, 1]] = True
        return mask


@dataclass(frozen=True)
class GroupingRegion:
    """Cells of a map under one circular mask, clipped to the map."""

    mask: CircularMask
    coords: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @classmethod
    def from_map(cls, values: np.ndarray, mask: CircularMask) -> "GroupingRegion":
        coords = mask.members(*values.shape)
        return cls(mask, coords, values[coords[:, 0], coords[:, 1]])

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def mass(self) -> float:
        return float(self.values.sum())

    @cached_property
    def centroid(self) -> Coord:
        return Coord(*centroid_of(self.coords, self.values))

    @property
    def cells(self) -> list:
        return [((int(i), int(j)), float(v)) for (i, j), v in zip(self.coords, self.values)]

    def disk_vector(self, full_map: np.ndarray) -> np.ndarray:
        """Values over the full disk in fixed offset order, zero where clipped."""
        pos = self.mask.full_disk()
        h, w = full_map.shape
        ok = (pos[:, 0] >= 0) & (pos[:, 0] < h) & (pos[:, 1] >= 0) & (pos[:, 1] < w)
        vec = np.zeros(len(pos))
        vec[ok] = full_map[pos[ok, 0], pos[ok, 1]]
        return vec


@dataclass(frozen=True)
class RegionConfig:
    """Region count and radius; ``radius_end`` turns the radius into a linear schedule."""

    n_regions: int = 3
    radius: float = 5.0
    radius_end: float | None = None

    def __post_init__(self):
        if int(self.n_regions) != self.n_regions or self.n_regions < 1:
            raise ValidationError(f"n_regions must be an integer >= 1, got {self.n_regions}")
        if not self.radius > 0 or not np.isfinite(self.radius):
            raise ValidationError(f"radius must be positive, got {self.radius}")
        if self.radius_end is not None and (not self.radius_end > 0 or not np.isfinite(self.radius_end)):
            raise ValidationError(f"radius_end must be positive, got {self.radius_end}")

    def at(self, step: int = 0, total_opt_steps: int = 25) -> "RegionConfig":
        """Fixed-radius config for ``step`` of the optimization window."""
        if self.radius_end is None:
            return self
        r = radius_schedule(min(step, total_opt_steps - 1), total_opt_steps,
                            self.radius, self.radius_end)
        return RegionConfig(self.n_regions, r)


DEFAULT_REGION_CONFIGS = {
    "object": RegionConfig(3, 5.0),
    "animal": RegionConfig(2, 2.0, 8.0),
    "attribute": RegionConfig(3, 6.0),
}


def radius_schedule(step_index: int, total_opt_steps: int, r_start: float, r_end: float) -> float:
    """Radius growing linearly from ``r_start`` at step 0 to ``r_end`` at the last step."""
    if total_opt_steps < 1:
        raise ValidationError("total_opt_steps must be >= 1")
    if not 0 <= step_index < total_opt_steps:
        raise ValidationError(f"step {step_index} outside [0, {total_opt_steps})")
    if not (r_start > 0 and r_end > 0):
        raise ValidationError("radii must be positive")
    if total_opt_steps == 1:
        return float(r_start)
    return r_start + (r_end - r_start) * step_index / (total_opt_steps - 1)


def place_masks(values: np.ndarray, cfg: RegionConfig) -> list[CircularMask]:
    """Greedy mask placement only (no region construction)."""
    v = np.asarray(values, dtype=np.float64)
    height, width = v.shape
    covered = np.zeros(v.shape, dtype=bool)
    masks = []
    for _ in range(cfg.n_regions):
        # covered cells are excluded from the search; -1 sits below any valid value
        search = np.where(covered, -1.0, v)
        flat = int(np.argmax(search))
        if search.flat[flat] <= 0:
            break
        mask = CircularMask(divmod(flat, width), float(cfg.radius))
        masks.append(mask)
        covered |= mask.coverage(height, width)
    return masks


def identify_regions(amap, cfg: RegionConfig) -> list[GroupingRegion]:
    """Up to ``cfg.n_regions`` grouping regions of a map, strongest first.

    A scheduled config uses its starting radius; resolve it with
    :meth:`RegionConfig.at` first to pick a different step.
    An all-zero map yields an empty list.
    """
    if not isinstance(cfg, RegionConfig):
        raise ValidationError("cfg must be a RegionConfig")
    v = np.asarray(getattr(amap, "values", amap), dtype=np.float64)
    if v.ndim != 2:
        raise ValidationError("map must be 2-D")
    return [GroupingRegion.from_map(v, m) for m in place_masks(v, cfg)]
