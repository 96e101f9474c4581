"""Centre-distance detection AP (nuScenes style) and a clustering proxy detector."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.sparse import coo_matrix

from .errors import ConfigError, DataError

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


@dataclass
class Detection:
    bev_center: tuple
    class_id: int
    score: float
    sample: int = 0  # detections only match ground truth of the same sample (scene)

    def __post_init__(self):
        self.bev_center = (float(self.bev_center[0]), float(self.bev_center[1]))
        self.class_id = int(self.class_id)
        self.score = float(self.score)
        self.sample = int(self.sample)
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ConfigError(f"detection score must be finite in [0, 1], got {self.score}")


@dataclass
class APConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    recall_points: int = 101

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ConfigError("AP thresholds must be positive")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError("AP thresholds must be sorted ascending")
        if self.recall_points < 2:
            raise ConfigError("need at least two recall sample points")


def cluster_detections(xyz: np.ndarray, class_probs: np.ndarray, min_pts: int = 5,
                       radius: float = 1.0, sample: int = 0) -> List[Detection]:
    """Single-linkage BEV clusters of same-argmax points, one Detection per large cluster."""
    if radius <= 0:
        raise ConfigError(f"cluster radius must be positive, got {radius}")
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    probs = np.asarray(class_probs, dtype=np.float64)
    labels = probs.argmax(axis=1)
    dets = []
    for cls in range(1, probs.shape[1]):
        idx = np.flatnonzero(labels == cls)
        if idx.size < max(min_pts, 1):
            continue
        bev = xyz[idx, :2]
        pairs = cKDTree(bev).query_pairs(radius, output_type="ndarray")
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(idx.size, idx.size))
        n_comp, comp = connected_components(graph, directed=False)
        for k in range(n_comp):
            members = idx[comp == k]
            if members.size < min_pts:
                continue
            center = xyz[members, :2].mean(axis=0)
            dets.append(Detection(tuple(center), cls, float(probs[members, cls].mean()), sample))
    # canonical order: by class then position, so outputs do not depend on component numbering
    dets.sort(key=lambda d: (d.class_id, d.bev_center))
    return dets


def _gt_items(gts):
    """Normalise ground truth entries to (x, y, class_id, sample)."""
    for g in gts:
        center, k = g[0], g[1]
        sample = g[2] if len(g) > 2 else 0
        yield float(center[0]), float(center[1]), int(k), int(sample)


def _gt_arrays(gts, class_id):
    rows = [(x, y, s) for x, y, k, s in _gt_items(gts) if k == class_id]
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def precision_recall(dets: Sequence[Detection], gts, class_id: int, threshold: float):
    """Greedy matching in descending score order (stable on ties); returns (precision, recall) arrays."""
    if threshold <= 0:
        raise ConfigError(f"matching threshold must be positive, got {threshold}")
    gt = _gt_arrays(gts, class_id)
    mine = [d for d in dets if d.class_id == class_id]
    order = sorted(range(len(mine)), key=lambda i: -mine[i].score)
    taken = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(mine))
    for rank, i in enumerate(order):
        if not len(gt):
            break
        dist = np.hypot(gt[:, 0] - mine[i].bev_center[0], gt[:, 1] - mine[i].bev_center[1])
        dist[taken | (gt[:, 2] != mine[i].sample)] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= threshold:
            taken[j] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    n = np.arange(1, len(mine) + 1)
    precision = ctp / n
    recall = ctp / len(gt) if len(gt) else np.zeros_like(ctp)
    return precision, recall


def average_precision(dets: Sequence[Detection], gts, class_id: int, threshold: float,
                      recall_points: int = 101) -> float:
    """Interpolated AP: mean over recall levels k/(R-1) of the best precision at recall >= level."""
    precision, recall = precision_recall(dets, gts, class_id, threshold)
    if not len(_gt_arrays(gts, class_id)) or not len(precision):
        return 0.0
    steps = recall_points - 1
    total = []
    for k in range(recall_points):
        reach = precision[recall >= k / steps]
        total.append(float(reach.max()) if reach.size else 0.0)
    # exactly rounded sum, so hand-computable cases reproduce to the last bit
    return math.fsum(total) / recall_points


def ap_report(dets: Sequence[Detection], gts, cfg: Optional[APConfig] = None) -> dict:
    """AP table over every foreground class present in the ground truth and every threshold.

    ``map`` is None when there is no ground truth at all (undefined, not zero).
    """
    cfg = cfg or APConfig()
    classes = sorted({k for _, _, k, _ in _gt_items(gts) if k > 0})
    table = {c: {t: average_precision(dets, gts, c, t, cfg.recall_points) for t in cfg.thresholds}
             for c in classes}
    if not classes:
        return {"per_class": {}, "per_threshold": {}, "map": None}
    per_class = {str(c): float(np.mean([table[c][t] for t in cfg.thresholds])) for c in classes}
    per_threshold = {f"{t:g}": float(np.mean([table[c][t] for c in classes])) for t in cfg.thresholds}
    m_ap = float(np.mean([table[c][t] for c in classes for t in cfg.thresholds]))
    return {"per_class": per_class, "per_threshold": per_threshold, "map": m_ap}


def mean_ap(dets: Sequence[Detection], gts, cfg: Optional[APConfig] = None) -> Optional[float]:
    return ap_report(dets, gts, cfg)["map"]


def write_detections(path, dets: Sequence[Detection]):
    """One JSON object per line: center, class_id, score, sample."""
    path = Path(path)
    lines = [json.dumps({"center": list(d.bev_center), "class_id": d.class_id, "score": d.score,
                         "sample": d.sample}) + "\n" for d in dets]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(lines))
    except OSError as exc:
        raise DataError(f"{path}: cannot write ({exc.strerror})") from None


def read_detections(path) -> List[Detection]:
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            if raw.strip():
                try:
                    d = json.loads(raw)
                    out.append(Detection(d["center"], d["class_id"], d["score"], d.get("sample", 0)))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}: bad detection record at byte offset {offset} ({exc})") from None
            offset += len(raw)
    return out
