"""Pinhole camera model and LiDAR-to-image projection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class PointCloud:
    """N LiDAR points in the sensor frame, with optional reflectance."""

    xyz: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.xyz.shape[0]:
                raise ConfigError("intensity length does not match point count")

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    def subset(self, index) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[index]
        return PointCloud(self.xyz[index], inten)


@dataclass
class CameraCalib:
    """Intrinsics (fx, fy, cx, cy), a 4x4 LiDAR-to-camera transform and image size.

    Camera frame convention: x right, y down, z forward (optical axis).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        self.validate()

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not np.all(np.isfinite(self.extrinsic)):
            raise ConfigError("extrinsic contains non-finite values")
        rot = self.extrinsic[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-6 or np.linalg.det(rot) <= 0:
            raise ConfigError("extrinsic rotation block is not a proper rotation")
        if not np.allclose(self.extrinsic[3], [0, 0, 0, 1]):
            raise ConfigError("extrinsic bottom row must be (0, 0, 0, 1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    def camera_center(self) -> np.ndarray:
        """Camera optical centre expressed in the LiDAR frame."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "extrinsic": [float(v) for v in self.extrinsic.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraCalib":
        try:
            ext = np.asarray(d["extrinsic"], dtype=np.float64)
            if ext.size != 16:
                raise ConfigError(f"extrinsic must have 16 numbers, got {ext.size}")
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]), ext.reshape(4, 4))
        except KeyError as exc:
            raise ConfigError(f"calibration missing field {exc.args[0]!r}") from None


@dataclass
class PixelProjection:
    valid: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray


def look_at_extrinsic(position, yaw: float = 0.0) -> np.ndarray:
    """LiDAR-to-camera transform for a level camera at `position` facing azimuth `yaw`.

    LiDAR frame is x forward, y left, z up.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    forward = np.array([c, s, 0.0])
    left = np.array([-s, c, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    # rows are the camera axes (x right, y down, z forward) written in LiDAR coordinates
    rot = np.stack([-left, -up, forward])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
    return ext


def _xyz(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def transform_to_camera(points, calib: CameraCalib) -> np.ndarray:
    """Apply the extrinsic to every point; returns n x 3 camera-frame coordinates."""
    xyz = _xyz(points)
    finite = np.isfinite(xyz).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DataError(f"point {bad} has a non-finite coordinate: {xyz[bad].tolist()}")
    return xyz @ calib.rotation.T + calib.translation


def project(points, calib: CameraCalib) -> PixelProjection:
    """Pinhole projection with floor quantisation; z <= 0 is never valid."""
    cam = transform_to_camera(points, calib)
    z = cam[:, 2]
    front = z > 0
    u = np.full(z.shape, -1, dtype=np.int64)
    v = np.full(z.shape, -1, dtype=np.int64)
    zf = z[front]
    uf = np.floor(calib.fx * cam[front, 0] / zf + calib.cx)
    vf = np.floor(calib.fy * cam[front, 1] / zf + calib.cy)
    inside = (uf >= 0) & (uf < calib.width) & (vf >= 0) & (vf < calib.height)
    # clip before the integer cast so far-off-axis points cannot overflow
    u[front] = np.clip(uf, -1, calib.width).astype(np.int64)
    v[front] = np.clip(vf, -1, calib.height).astype(np.int64)
    valid = np.zeros(z.shape, dtype=bool)
    valid[front] = inside
    u[~valid] = -1
    v[~valid] = -1
    return PixelProjection(valid=valid, u=u, v=v, depth=z)
