"""Fixed-budget voxelisation of painted point clouds.

Every non-empty voxel carries exactly ``max_points`` slots. Over-full voxels
keep a seeded uniform sample without replacement; under-full voxels are padded
by repeating their own members, which leaves any max-pool over slots unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import PointCloud

OUT_OF_RANGE = None


@dataclass
class VoxelConfig:
    size: tuple = (0.2, 0.2, 8.0)
    range_min: tuple = (-20.0, -20.0, -2.0)
    range_max: tuple = (20.0, 20.0, 6.0)
    max_points: int = 16
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(float(s) for s in self.size)
        self.range_min = tuple(float(s) for s in self.range_min)
        self.range_max = tuple(float(s) for s in self.range_max)
        if min(self.size) <= 0:
            raise ConfigError(f"voxel sizes must be positive, got {self.size}")
        if any(hi <= lo for lo, hi in zip(self.range_min, self.range_max)):
            raise ConfigError("voxel range max must exceed min on every axis")
        if self.max_points < 1:
            raise ConfigError("max_points must be >= 1")

    def to_dict(self) -> dict:
        return {"size": list(self.size), "range_min": list(self.range_min),
                "range_max": list(self.range_max), "max_points": self.max_points,
                "seed": self.seed}


@dataclass
class VoxelBatch:
    """E non-empty voxels with M slots of ``3 + 2m`` features each.

    ``point_index[i, j]`` is the source point of slot j in voxel i and
    ``point_voxel[k]`` maps source point k to its voxel (-1 when out of range).
    """

    coords: np.ndarray
    features: np.ndarray
    counts: np.ndarray
    pad_mask: np.ndarray
    point_index: np.ndarray
    point_voxel: np.ndarray
    m: int

    @property
    def e(self) -> int:
        return self.coords.shape[0]

    @property
    def max_points(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    @property
    def xyz(self) -> np.ndarray:
        return self.features[..., :3]

    @property
    def p2d(self) -> np.ndarray:
        return self.features[..., 3:3 + self.m]

    @property
    def p3d(self) -> np.ndarray:
        return self.features[..., 3 + self.m:]


def voxel_indices(xyz: np.ndarray, cfg: VoxelConfig):
    """Integer voxel indices and an in-range flag per point (upper bound exclusive)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(cfg.range_min)
    hi = np.asarray(cfg.range_max)
    in_range = np.all((xyz >= lo) & (xyz < hi), axis=1)
    idx = np.floor((xyz - lo) / np.asarray(cfg.size)).astype(np.int64)
    # floor rounding can put a point just under the max bound into the next cell
    grid = np.ceil((hi - lo) / np.asarray(cfg.size)).astype(np.int64)
    idx = np.minimum(idx, grid - 1)
    return idx, in_range


def voxel_index(point, cfg: VoxelConfig):
    """Voxel index triple of one point, or None when it lies outside the range."""
    idx, ok = voxel_indices(np.asarray(point, dtype=np.float64).reshape(1, 3), cfg)
    if not ok[0]:
        return OUT_OF_RANGE
    return tuple(int(i) for i in idx[0])


def voxelize(points, p2d: np.ndarray, p3d: np.ndarray, cfg: VoxelConfig) -> VoxelBatch:
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    n = xyz.shape[0]
    p2d = np.asarray(p2d)
    p3d = np.asarray(p3d)
    if p2d.shape[1] != p3d.shape[1]:
        raise ConfigError(f"2D scores have m={p2d.shape[1]} but 3D scores have m={p3d.shape[1]}")
    if p2d.shape[0] != n or p3d.shape[0] != n:
        raise ConfigError("score row counts must equal the point count")
    m = p2d.shape[1]
    big_m = cfg.max_points

    idx, in_range = voxel_indices(xyz, cfg)
    members = np.flatnonzero(in_range)
    # lexicographic (ix, iy, iz) order, stable in point index
    order = np.lexsort((idx[members, 2], idx[members, 1], idx[members, 0]))
    members = members[order]
    keys = idx[members]
    if members.size:
        new = np.ones(members.size, dtype=bool)
        new[1:] = np.any(keys[1:] != keys[:-1], axis=1)
        starts = np.flatnonzero(new)
    else:
        starts = np.zeros(0, dtype=np.int64)
    counts = np.diff(np.append(starts, members.size))
    e = starts.size

    point_voxel = np.full(n, -1, dtype=np.int64)
    point_voxel[members] = np.repeat(np.arange(e), counts)

    rng = np.random.default_rng(cfg.seed)
    slots = np.empty((e, big_m), dtype=np.int64)
    pad_mask = np.zeros((e, big_m), dtype=bool)
    full = counts >= big_m
    for i in np.flatnonzero(full):
        grp = members[starts[i]:starts[i] + counts[i]]
        if counts[i] == big_m:
            slots[i] = grp
        else:
            slots[i] = np.sort(rng.choice(grp, size=big_m, replace=False))
    under = np.flatnonzero(~full)
    if under.size:
        c = counts[under]
        col = np.arange(big_m)[None, :]
        # real members first, then uniformly drawn repeats
        pick = np.floor(rng.random((under.size, big_m)) * c[:, None]).astype(np.int64)
        local = np.where(col < c[:, None], col, pick)
        slots[under] = members[starts[under][:, None] + local]
        pad_mask[under] = col >= c[:, None]

    feats = np.concatenate([xyz, p2d, p3d], axis=1).astype(np.float32)
    return VoxelBatch(
        coords=keys[starts].astype(np.int32) if e else np.zeros((0, 3), dtype=np.int32),
        features=feats[slots] if e else np.zeros((0, big_m, 3 + 2 * m), dtype=np.float32),
        counts=counts.astype(np.int64),
        pad_mask=pad_mask,
        point_index=slots,
        point_voxel=point_voxel,
        m=m,
    )
