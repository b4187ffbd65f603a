"""Network geometry: AP/BS grids, device drops, and wrap-around distances.

All placement happens inside a square service area.  Distances use a
toroidal (wrap-around) metric so that the square behaves like a patch of
an infinite deployment with no boundary effects.
"""

from dataclasses import dataclass
from enum import Enum
import math

import numpy as np


class NotPerfectSquare(ValueError):
    """Raised when a grid placement is requested with a non-square count."""


class TooManyGroups(ValueError):
    """Raised when the clustered drop has more groups than cells."""


@dataclass(frozen=True)
class Area:
    """Square service area with side length in meters."""

    side_m: float

    def __post_init__(self):
        if self.side_m <= 0:
            raise ValueError(f"area side must be positive, got {self.side_m}")


class DistributionMode(Enum):
    """How devices are dropped over the area.

    PER_CELL confines the devices of group g to cell g's square;
    UNIFORM spreads all devices uniformly over the whole area.
    """

    PER_CELL = 1
    UNIFORM = 2


@dataclass(frozen=True)
class NetworkGeometry:
    """Positions of APs, BSs, and devices plus the device-to-group map.

    Device positions are ordered by group: group g occupies the contiguous
    index block given by ``devices_in_group(g)``.
    """

    area: Area
    ap_positions: np.ndarray      # (L, 2)
    bs_positions: np.ndarray      # (cells, 2)
    device_positions: np.ndarray  # (K, 2)
    group_of_device: np.ndarray   # (K,) int
    cells: int

    def __post_init__(self):
        side = self.area.side_m
        for name in ("ap_positions", "bs_positions", "device_positions"):
            pts = getattr(self, name)
            if pts.size and (np.any(pts < 0) or np.any(pts >= side)):
                raise ValueError(f"{name} contains points outside the area")

    @property
    def n_aps(self):
        return len(self.ap_positions)

    @property
    def n_devices(self):
        return len(self.device_positions)

    @property
    def n_groups(self):
        return int(self.group_of_device.max()) + 1 if self.n_devices else 0

    def devices_in_group(self, g):
        return np.flatnonzero(self.group_of_device == g)


def _isqrt_exact(count):
    root = math.isqrt(count)
    if root * root != count:
        raise NotPerfectSquare(f"{count} is not a perfect square")
    return root


def grid_points(count, area):
    """Cell-centered uniform sqrt(count) x sqrt(count) grid, row-major order.

    Point i sits at the center of cell i, where cell i spans
    ``[ix*w, (ix+1)*w) x [iy*w, (iy+1)*w)`` with ``ix = i % m``,
    ``iy = i // m``, ``m = sqrt(count)`` and ``w = side/m``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    m = _isqrt_exact(count)
    step = area.side_m / m
    centers = (np.arange(m) + 0.5) * step
    ix, iy = np.arange(count) % m, np.arange(count) // m
    return np.column_stack((centers[ix], centers[iy]))


def place_aps_grid(count, area):
    """Deterministic AP placement on a cell-centered square grid."""
    return grid_points(count, area)


def cell_origin(cell, cells, area):
    """Lower-left corner of the given cell in the cells-grid layout."""
    m = _isqrt_exact(cells)
    step = area.side_m / m
    return np.array([(cell % m) * step, (cell // m) * step])


def place_devices(mode, group_sizes, area, cells, rng):
    """Drop devices for each group; returns (positions, group_of_device).

    PER_CELL requires one cell per group and draws group g uniformly inside
    cell g's square.  UNIFORM draws every device uniformly over the area.
    Reproducible from the supplied generator.
    """
    group_sizes = list(group_sizes)
    n_groups = len(group_sizes)
    if mode == DistributionMode.PER_CELL and n_groups > cells:
        raise TooManyGroups(f"{n_groups} groups need {n_groups} cells, have {cells}")

    positions = []
    for g, size in enumerate(group_sizes):
        draw = rng.random((size, 2))
        if mode == DistributionMode.PER_CELL:
            m = _isqrt_exact(cells)
            origin = cell_origin(g, cells, area)
            positions.append(origin + draw * (area.side_m / m))
        else:
            positions.append(draw * area.side_m)
    group_of_device = np.repeat(np.arange(n_groups), group_sizes)
    return np.vstack(positions), group_of_device


_SHIFTS = np.array([(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)], dtype=float)


def wrap_displacement(a, b, area):
    """Shortest displacement vector from a to (a translated copy of) b."""
    diffs = np.asarray(b) + _SHIFTS * area.side_m - np.asarray(a)
    return diffs[np.argmin(np.einsum("ij,ij->i", diffs, diffs))]


def wrap_distance(a, b, area):
    """Minimum distance between a and b over the 9 translated copies of b."""
    return float(np.linalg.norm(wrap_displacement(a, b, area)))


def wrap_bearing(a, b, area):
    """Angle (radians, from the +x axis) of the shortest path from a to b."""
    d = wrap_displacement(a, b, area)
    return float(np.arctan2(d[1], d[0]))


def wrap_distances(points_a, points_b, area):
    """Pairwise wrap distances, shape (len(points_a), len(points_b))."""
    pa = np.asarray(points_a)[:, None, None, :]
    pb = np.asarray(points_b)[None, :, None, :] + (_SHIFTS * area.side_m)[None, None, :, :]
    return np.sqrt(((pb - pa) ** 2).sum(-1)).min(-1)
