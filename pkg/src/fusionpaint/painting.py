"""Semantic painting of LiDAR points from a 2D mask and from 3D boxes.

Scores are plain ``n x m`` float32 arrays whose rows are one-hot class
vectors; class 0 is background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .geometry import CameraCalib, PointCloud, project


@dataclass
class SemanticMask:
    """Per-pixel argmax class indices, ``data[v, u]``."""

    data: np.ndarray
    classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ConfigError("mask data must be 2-D (height x width)")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.classes):
            raise ConfigError(f"mask holds class indices outside [0, {self.classes})")
        self.data = self.data.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class Box3D:
    center: tuple
    size: tuple  # length (along heading), width, height
    yaw: float
    class_id: int

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.yaw = float(self.yaw)
        self.class_id = int(self.class_id)
        if len(self.center) != 3 or len(self.size) != 3:
            raise ConfigError("box center and size need three components")
        if min(self.size) <= 0:
            raise ConfigError(f"box sizes must be positive, got {self.size}")
        if self.class_id < 1:
            raise ConfigError("box class_id must be >= 1 (0 is background)")

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size),
                "yaw": self.yaw, "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        try:
            return cls(d["center"], d["size"], d["yaw"], d["class_id"])
        except KeyError as exc:
            raise ConfigError(f"box entry missing field {exc.args[0]!r}") from None


def one_hot(labels, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], m), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _xyz(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def paint_2d(points, mask: SemanticMask, calib: CameraCalib) -> np.ndarray:
    """One-hot of the mask class under each point's pixel; background when unprojectable."""
    if mask.width != calib.width or mask.height != calib.height:
        raise ConfigError(
            f"mask is {mask.width}x{mask.height} but calibration expects {calib.width}x{calib.height}")
    proj = project(points, calib)
    labels = np.zeros(proj.valid.shape[0], dtype=np.int64)
    labels[proj.valid] = mask.data[proj.v[proj.valid], proj.u[proj.valid]]
    return one_hot(labels, mask.classes)


def _to_box_frame(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    d = xyz - np.asarray(box.center)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    # rotate by -yaw about z
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)


def points_in_box(points, box: Box3D) -> np.ndarray:
    """Vectorised containment test, boundary inclusive."""
    local = _to_box_frame(_xyz(points), box)
    half = np.asarray(box.size) / 2.0
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(point, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(point, dtype=np.float64).reshape(1, 3), box)[0])


def box_labels(points, boxes: Sequence[Box3D]) -> np.ndarray:
    """Class index per point; overlaps go to the nearest box centre, then the lowest box index."""
    xyz = _xyz(points)
    n = xyz.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    best = np.full(n, np.inf)
    for box in boxes:
        inside = points_in_box(xyz, box)
        dist = np.linalg.norm(xyz - np.asarray(box.center), axis=1)
        # strict < keeps the earlier box on exact distance ties
        take = inside & (dist < best)
        labels[take] = box.class_id
        best[take] = dist[take]
    return labels


def paint_3d(points, boxes: Sequence[Box3D], m: int) -> np.ndarray:
    for box in boxes:
        if box.class_id >= m:
            raise ConfigError(f"box class_id {box.class_id} is not below class count {m}")
    return one_hot(box_labels(points, boxes), m)


def corrupt_scores(scores: np.ndarray, p: float, seed: int) -> np.ndarray:
    """Flip each foreground one-hot row to a different foreground class with probability p.

    Background rows are never touched. With a single foreground class there is
    nothing to flip to and the input is returned unchanged.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"flip probability must lie in [0, 1], got {p}")
    scores = np.asarray(scores)
    n, m = scores.shape
    labels = scores.argmax(axis=1)
    rng = np.random.default_rng(seed)
    draw = rng.random(n)
    offset = rng.integers(1, max(m - 1, 2), size=n)
    out = scores.copy()
    if m < 3:
        return out
    flip = (labels > 0) & (draw < p)
    new = (labels[flip] - 1 + offset[flip]) % (m - 1) + 1
    out[flip] = 0
    out[np.flatnonzero(flip), new] = 1
    return out
