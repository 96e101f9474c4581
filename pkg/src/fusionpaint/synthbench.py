"""Deterministic synthetic driving scenes with the two complementary label errors.

A scene is a flat ground plane plus box-shaped obstacles seen by one LiDAR and
one forward camera. The camera mask is rendered with correct occlusion, then
dilated to imitate blurry segmentation boundaries. Because painting projects
labels without a depth test, ground behind an object inherits the object's
class (frustum bleed). The 3D labels have exact boundaries but random class
confusion.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import fileio
from .errors import ConfigError, DataError, GenerationError
from .geometry import CameraCalib, PointCloud, look_at_extrinsic
from .painting import Box3D, SemanticMask, box_labels, corrupt_scores, paint_2d, paint_3d, points_in_box

CLASS_NAMES = ("background", "car", "truck", "bus", "trailer", "construction_vehicle",
               "pedestrian", "motorcycle", "bicycle", "traffic_cone", "barrier")

# nominal (length, width, height) in metres, classes 1..10
CLASS_SIZES = (
    (4.5, 1.9, 1.7), (7.0, 2.5, 3.0), (11.0, 2.9, 3.4), (9.0, 2.5, 3.6), (6.0, 2.8, 3.0),
    (0.7, 0.7, 1.8), (2.1, 0.8, 1.5), (1.8, 0.6, 1.3), (0.4, 0.4, 0.9), (0.5, 2.5, 1.0),
)

GROUND_NOISE = 0.02
MAX_TRIES = 1000


def default_calib(sensor_origin=(0.0, 0.0, 1.8)) -> CameraCalib:
    """Level forward camera, 400x160 px, about 106 degrees horizontal field of view."""
    return CameraCalib(fx=150.0, fy=150.0, cx=200.0, cy=56.0, width=400, height=160,
                       extrinsic=look_at_extrinsic(sensor_origin, 0.0))


@dataclass
class SceneSpec:
    seed: int = 0
    num_boxes: tuple = (3, 8)
    class_sizes: tuple = CLASS_SIZES
    size_jitter: float = 0.1
    ground_density: float = 1.0
    surface_density: float = 12.0
    sensor_origin: tuple = (0.0, 0.0, 1.8)
    scene_range: tuple = (-20.0, 20.0, -20.0, 20.0)
    placement_radius: tuple = (5.0, 19.0)
    placement_azimuth_deg: tuple = (-65.0, 65.0)
    calib: Optional[CameraCalib] = None
    bleed_radius: int = 4
    confusion_p: float = 0.2

    def __post_init__(self):
        self.num_boxes = tuple(int(v) for v in self.num_boxes)
        self.class_sizes = tuple(tuple(float(x) for x in s) for s in self.class_sizes)
        self.sensor_origin = tuple(float(v) for v in self.sensor_origin)
        self.scene_range = tuple(float(v) for v in self.scene_range)
        self.placement_radius = tuple(float(v) for v in self.placement_radius)
        self.placement_azimuth_deg = tuple(float(v) for v in self.placement_azimuth_deg)
        if isinstance(self.calib, dict):
            self.calib = CameraCalib.from_dict(self.calib)
        if self.calib is None:
            self.calib = default_calib(self.sensor_origin)
        if self.bleed_radius < 0:
            raise ConfigError(f"bleed_radius must be >= 0, got {self.bleed_radius}")
        if not 0.0 <= self.confusion_p <= 1.0:
            raise ConfigError(f"confusion_p must lie in [0, 1], got {self.confusion_p}")
        if self.ground_density <= 0 or self.surface_density <= 0:
            raise ConfigError("point densities must be positive")
        if len(self.num_boxes) != 2 or self.num_boxes[0] < 0 or self.num_boxes[1] < self.num_boxes[0]:
            raise ConfigError(f"num_boxes must be a (min, max) range, got {self.num_boxes}")
        if any(min(s) <= 0 for s in self.class_sizes):
            raise ConfigError("class sizes must be positive")

    @property
    def m(self) -> int:
        return len(self.class_sizes) + 1

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["calib"] = self.calib.to_dict()
        d["num_boxes"] = list(self.num_boxes)
        d["class_sizes"] = [list(s) for s in self.class_sizes]
        for key in ("sensor_origin", "scene_range", "placement_radius", "placement_azimuth_deg"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown scene field(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scene spec: {exc}") from None


@dataclass
class Scene:
    points: PointCloud
    true_labels: np.ndarray
    boxes: List[Box3D]
    mask_clean: SemanticMask
    mask_corrupt: SemanticMask
    calib: CameraCalib
    seed: int = 0

    @property
    def m(self) -> int:
        return self.mask_clean.classes


def bleed_mask(mask: SemanticMask, r: int) -> SemanticMask:
    """Grow every foreground region by a (2r+1)^2 square.

    Each pixel takes the lowest foreground class whose grown region covers it,
    or 0 when none does. Foreground stays foreground, background only shrinks.
    """
    if r < 0:
        raise ConfigError(f"dilation radius must be >= 0, got {r}")
    data = mask.data.astype(np.int64)
    if r == 0:
        return SemanticMask(data.copy(), mask.classes)
    # rank classes so that a max filter selects the lowest foreground index
    rank = np.where(data > 0, mask.classes - data, 0)
    grown = ndimage.maximum_filter(rank, size=2 * r + 1, mode="constant", cval=0)
    out = np.where(grown > 0, mask.classes - grown, 0)
    return SemanticMask(out, mask.classes)


def render_mask(boxes: Sequence[Box3D], calib: CameraCalib, m: int, return_depth: bool = False):
    """Nearest-surface class for the ray through each pixel centre (0 where no box is hit)."""
    vv, uu = np.mgrid[0:calib.height, 0:calib.width]
    d_cam = np.stack([(uu.ravel() + 0.5 - calib.cx) / calib.fx,
                      (vv.ravel() + 0.5 - calib.cy) / calib.fy,
                      np.ones(uu.size)], axis=1)
    d_lidar = d_cam @ calib.rotation  # R^T applied to row vectors
    origin = calib.camera_center()
    depth = np.full(uu.size, np.inf)
    cls = np.zeros(uu.size, dtype=np.int64)
    for box in boxes:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        o = rot @ (origin - np.asarray(box.center))
        d = d_lidar @ rot.T
        half = np.asarray(box.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        parallel = d == 0
        outside = np.abs(o) > half
        tmin = np.where(parallel, -np.inf, tmin)
        tmax = np.where(parallel, np.where(outside[None, :], -np.inf, np.inf), tmax)
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        hit = (near <= far) & (far > 0)
        t = np.where(near > 0, near, 0.0)
        closer = hit & (t < depth)
        depth[closer] = t[closer]
        cls[closer] = box.class_id
    mask = SemanticMask(cls.reshape(calib.height, calib.width), m)
    if return_depth:
        return mask, depth.reshape(calib.height, calib.width)
    return mask


def bev_corners(center, size, yaw) -> np.ndarray:
    """Four ground-plane corners of a box footprint."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = size[0] / 2, size[1] / 2
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    return local @ np.array([[c, s], [-s, c]]) + np.asarray(center[:2])


def footprints_overlap(a: np.ndarray, b: np.ndarray, gap: float = 0.0) -> bool:
    """Separating-axis test for two convex quads, treating them as `gap` apart if touching closer."""
    for quad in (a, b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]]) / np.hypot(edge[0], edge[1])
            pa, pb = a @ axis, b @ axis
            if pa.max() + gap < pb.min() or pb.max() + gap < pa.min():
                return False
    return True


def _place_boxes(spec: SceneSpec, rng: np.random.Generator) -> List[Box3D]:
    lo, hi = spec.num_boxes
    count = int(rng.integers(lo, hi + 1))
    xmin, xmax, ymin, ymax = spec.scene_range
    az0, az1 = (math.radians(a) for a in spec.placement_azimuth_deg)
    r0, r1 = spec.placement_radius
    placed: List[Box3D] = []
    quads: List[np.ndarray] = []
    for k in range(count):
        class_id = int(rng.integers(1, spec.m))
        base = np.asarray(spec.class_sizes[class_id - 1])
        size = base * (1 + spec.size_jitter * rng.uniform(-1, 1, size=3))
        yaw = float(rng.uniform(-math.pi, math.pi))
        for _ in range(MAX_TRIES):
            rad = rng.uniform(r0, r1)
            az = rng.uniform(az0, az1)
            x, y = rad * math.cos(az), rad * math.sin(az)
            quad = bev_corners((x, y), size, yaw)
            if quad[:, 0].min() < xmin or quad[:, 0].max() > xmax or quad[:, 1].min() < ymin or quad[:, 1].max() > ymax:
                continue
            if not any(footprints_overlap(quad, q, gap=0.3) for q in quads):
                break
        else:
            raise GenerationError(
                f"could not place box {k + 1} of {count} without overlap after {MAX_TRIES} tries (seed {spec.seed})")
        placed.append(Box3D((x, y, size[2] / 2), tuple(size), yaw, class_id))
        quads.append(quad)
    return placed


def _surface_points(box: Box3D, density: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the four sides and the top of a box (no bottom face)."""
    l, w, h = box.size
    # keep samples a hair inside the faces so containment is robust to rounding
    hl, hw, hh = 0.999 * l / 2, 0.999 * w / 2, 0.999 * h / 2
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    n = max(1, int(round(areas.sum() * density)))
    face = rng.choice(5, size=n, p=areas / areas.sum())
    a = rng.uniform(-1, 1, size=n)
    b = rng.uniform(-1, 1, size=n)
    local = np.empty((n, 3))
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    sides_x = face < 2
    sides_y = (face >= 2) & (face < 4)
    top = face == 4
    local[sides_x] = np.stack([sign[sides_x] * hl, a[sides_x] * hw, b[sides_x] * hh], axis=1)
    local[sides_y] = np.stack([a[sides_y] * hl, sign[sides_y] * hw, b[sides_y] * hh], axis=1)
    local[top] = np.stack([a[top] * hl, b[top] * hw, np.full(top.sum(), hh)], axis=1)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    return world


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    boxes = _place_boxes(spec, rng)

    xmin, xmax, ymin, ymax = spec.scene_range
    n_ground = int(round((xmax - xmin) * (ymax - ymin) * spec.ground_density))
    ground = np.stack([rng.uniform(xmin, xmax, n_ground), rng.uniform(ymin, ymax, n_ground),
                       rng.normal(0.0, GROUND_NOISE, n_ground)], axis=1)
    keep = np.ones(n_ground, dtype=bool)
    for box in boxes:
        # nothing is seen under an obstacle
        footprint = Box3D((box.center[0], box.center[1], 0.0),
                          (box.size[0] + 0.1, box.size[1] + 0.1, 1.0), box.yaw, box.class_id)
        keep &= ~points_in_box(ground, footprint)
    parts = [ground[keep]]
    for box in boxes:
        parts.append(_surface_points(box, spec.surface_density, rng))
    xyz = np.concatenate(parts, axis=0)
    labels = box_labels(xyz, boxes)

    m = spec.m
    mask_clean = render_mask(boxes, spec.calib, m)
    mask_corrupt = bleed_mask(mask_clean, spec.bleed_radius)
    return Scene(PointCloud(xyz), labels, boxes, mask_clean, mask_corrupt, spec.calib, spec.seed)


def benchmark_specs(num_scenes: int = 40, seed: int = 7, bleed_radius: int = 4, confusion_p: float = 0.2,
                    **overrides) -> List[SceneSpec]:
    """Scene specs for the default benchmark; scene i uses seed + i."""
    return [SceneSpec(seed=seed + i, bleed_radius=bleed_radius, confusion_p=confusion_p, **overrides)
            for i in range(num_scenes)]


SCENE_FILES = {
    "points": "points.bin", "labels": "labels.bin", "boxes": "boxes.json", "calib": "calib.json",
    "mask_clean": "mask_clean.pgm", "mask_corrupt": "mask_corrupt.pgm", "p2d": "p2d.fpsc", "p3d": "p3d.fpsc",
}


def paint_scene(scene: Scene, confusion_p: float):
    """2D painting from the corrupted mask and confused 3D painting from the true boxes."""
    p2d = paint_2d(scene.points, scene.mask_corrupt, scene.calib)
    p3d = corrupt_scores(paint_3d(scene.points, scene.boxes, scene.m), confusion_p, seed=scene.seed)
    return p2d, p3d


def write_scene(scene_dir, scene: Scene, p2d, p3d):
    scene_dir = Path(scene_dir)
    fileio.write_points(scene_dir / SCENE_FILES["points"], scene.points)
    fileio.write_labels(scene_dir / SCENE_FILES["labels"], scene.true_labels)
    fileio.write_boxes(scene_dir / SCENE_FILES["boxes"], scene.boxes)
    fileio.write_calib(scene_dir / SCENE_FILES["calib"], scene.calib)
    fileio.write_mask(scene_dir / SCENE_FILES["mask_clean"], scene.mask_clean)
    fileio.write_mask(scene_dir / SCENE_FILES["mask_corrupt"], scene.mask_corrupt)
    fileio.write_scores(scene_dir / SCENE_FILES["p2d"], p2d)
    fileio.write_scores(scene_dir / SCENE_FILES["p3d"], p3d)


def build_dataset(specs: Sequence[SceneSpec], out_dir, split=(0.8, 0.2)) -> dict:
    """Generate, paint and write every scene; returns the manifest (also written to disk).

    The first round(train * n) scenes form the training split, the rest validation.
    """
    if len(split) != 2 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be two non-negative numbers summing to 1, got {split}")
    if not specs:
        raise ConfigError("no scene specs given")
    ms = {s.m for s in specs}
    if len(ms) != 1:
        raise ConfigError("all scenes must share one class count")
    out_dir = Path(out_dir)
    n_train = int(round(split[0] * len(specs)))
    entries = []
    for i, spec in enumerate(specs):
        scene = generate_scene(spec)
        p2d, p3d = paint_scene(scene, spec.confusion_p)
        rel = f"scenes/{i:04d}"
        write_scene(out_dir / rel, scene, p2d, p3d)
        entries.append({
            "id": f"{i:04d}", "seed": spec.seed, "split": "train" if i < n_train else "val",
            "dir": rel, "num_points": int(scene.points.n), "num_boxes": len(scene.boxes),
            "files": {k: f"{rel}/{v}" for k, v in SCENE_FILES.items()},
            "spec": spec.to_dict(),
        })
    manifest = {
        "format": "fusionpaint-dataset/1",
        "m": specs[0].m,
        "class_names": list(CLASS_NAMES) if specs[0].m == len(CLASS_NAMES) else None,
        "split": {"train": split[0], "val": split[1]},
        "scenes": entries,
        "train": [e["id"] for e in entries if e["split"] == "train"],
        "val": [e["id"] for e in entries if e["split"] == "val"],
    }
    fileio.dump_json(out_dir / "manifest.json", manifest)
    return manifest


@dataclass
class SceneData:
    """One scene as read back from a dataset directory."""

    id: str
    seed: int
    points: PointCloud
    labels: np.ndarray
    p2d: np.ndarray
    p3d: np.ndarray
    boxes: List[Box3D]
    calib: CameraCalib


@dataclass
class Dataset:
    root: Path
    manifest: dict
    scenes: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return int(self.manifest["m"])

    def ids(self, split: str) -> List[str]:
        if split not in ("train", "val", "all"):
            raise ConfigError(f"unknown split {split!r}")
        if split == "all":
            return [e["id"] for e in self.manifest["scenes"]]
        return list(self.manifest[split])

    def scene(self, scene_id: str) -> SceneData:
        if scene_id not in self.scenes:
            entry = next((e for e in self.manifest["scenes"] if e["id"] == scene_id), None)
            if entry is None:
                raise DataError(f"{self.root}: scene {scene_id!r} not in manifest")
            f = {k: self.root / v for k, v in entry["files"].items()}
            points = fileio.read_points(f["points"])
            data = SceneData(entry["id"], int(entry["seed"]), points, fileio.read_labels(f["labels"]),
                             fileio.read_scores(f["p2d"]), fileio.read_scores(f["p3d"]),
                             fileio.read_boxes(f["boxes"]), fileio.read_calib(f["calib"]))
            for name in ("labels", "p2d", "p3d"):
                arr = getattr(data, name)
                if arr.shape[0] != points.n:
                    raise DataError(f"{f[name]}: has {arr.shape[0]} rows but the scene has {points.n} points")
            if data.p2d.shape[1] != self.m or data.p3d.shape[1] != self.m:
                raise DataError(f"{f['p2d']}: class count disagrees with manifest m={self.m}")
            self.scenes[scene_id] = data
        return self.scenes[scene_id]

    def split(self, split: str) -> List[SceneData]:
        return [self.scene(i) for i in self.ids(split)]


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = fileio.load_json(root / "manifest.json")
    for key in ("m", "scenes", "train", "val"):
        if key not in manifest:
            raise DataError(f"{root / 'manifest.json'}: missing key {key!r}")
    return Dataset(root, manifest)
