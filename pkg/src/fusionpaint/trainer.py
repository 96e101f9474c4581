"""Training and evaluation of the fusion network on a synthetic dataset.

The training signal is per-point cross-entropy of the classifier head against
the true point labels; padded slots never enter the loss or the metrics.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import fileio
from .errors import ConfigError, ShapeError, TrainingError
from .evalmetrics import APConfig, Detection, ap_report, cluster_detections, write_detections
from .fusion import (head_logits, MODALITIES, FusionParams, Packed, check_modality, forward, init_params, loss_on, pack,
                     painted_records)
from .neuralcore import AdamW, Tape, lr_schedule
from .synthbench import Dataset, SceneData
from .voxelgrid import VoxelBatch, VoxelConfig, voxelize

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "split", "loss", "accuracy", "macro_f1", "mean_sigma_clean", "mean_sigma_bleed")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    max_lr: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    seed: int = 7
    modality: str = "fused-attention"
    c1: int = 64
    c2: int = 128
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    out_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.voxel, dict):
            self.voxel = VoxelConfig(**self.voxel)
        self.modality = check_modality(self.modality)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.max_lr < 0:
            raise ConfigError("learning rate must be non-negative")


@dataclass
class PreparedScene:
    """A scene voxelised once, with per-voxel bleed flags for gate diagnostics."""

    id: str
    data: SceneData
    batch: VoxelBatch
    bleed_voxel: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.data.labels


def prepare_scene(scene: SceneData, voxel: VoxelConfig) -> PreparedScene:
    cfg = VoxelConfig(voxel.size, voxel.range_min, voxel.range_max, voxel.max_points, voxel.seed + scene.seed)
    batch = voxelize(scene.points, scene.p2d, scene.p3d, cfg)
    # background points painted as foreground by the 2D source
    bleed_point = (scene.labels == 0) & (scene.p2d.argmax(axis=1) != 0)
    slot_bleed = bleed_point[batch.point_index] & ~batch.pad_mask
    return PreparedScene(scene.id, scene, batch, slot_bleed.any(axis=1))


def classification_metrics(y_true, y_pred, m: int) -> dict:
    """Per-class precision/recall/F1 plus accuracy and macro-F1.

    Macro-F1 averages over the classes that occur in either the truth or the
    predictions; a class with no predictions has precision 0.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.bincount(y_true * m + y_pred, minlength=m * m).reshape(m, m)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    present = (support > 0) | (predicted > 0)
    per_class = {str(c): {"precision": float(precision[c]), "recall": float(recall[c]), "f1": float(f1[c]),
                          "support": int(support[c])} for c in range(m) if present[c]}
    return {
        "per_class": per_class,
        "macro_f1": float(f1[present].mean()) if present.any() else 0.0,
        "accuracy": float(tp.sum() / max(1, y_true.size)),
        "confusion": conf,
    }


def _sigma_stats(sigma: np.ndarray, bleed: np.ndarray):
    clean = float(sigma[~bleed].mean()) if (~bleed).any() else float("nan")
    dirty = float(sigma[bleed].mean()) if bleed.any() else float("nan")
    return clean, dirty


def evaluate(params: FusionParams, scenes: Sequence[PreparedScene], modality: str) -> dict:
    """Eval-mode metrics over the true (non-padded) point slots of `scenes`."""
    modality = check_modality(modality)
    if not scenes:
        raise ConfigError("no scenes to evaluate")
    if scenes[0].batch.m != params.m:
        raise ShapeError(f"network predicts {params.m} classes but the data has m={scenes[0].batch.m}")
    ys, preds, losses, weights, sigmas, bleeds = [], [], [], [], [], []
    for sc in scenes:
        packed = pack([sc.batch], [sc.labels], dtype=params.mlp_l[0].weight.dtype)
        tape, loss, logits, sigma = loss_on(packed, params, modality, training=False)
        ys.append(packed.labels)
        preds.append(logits.argmax(axis=1))
        losses.append(float(loss.value))
        weights.append(packed.n_rows)
        sigmas.append(sigma)
        bleeds.append(sc.bleed_voxel)
    out = classification_metrics(np.concatenate(ys), np.concatenate(preds), params.m)
    out["loss"] = float(np.average(losses, weights=weights))
    out["mean_sigma_clean"], out["mean_sigma_bleed"] = _sigma_stats(np.concatenate(sigmas), np.concatenate(bleeds))
    return out


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], r["split"]] + [_fmt(r[c]) for c in CSV_COLUMNS[2:]])
    return buf.getvalue()


@dataclass
class TrainResult:
    params: FusionParams
    best_params: FusionParams
    rows: List[dict]
    best_epoch: int


def _dump_bad_batch(out_dir, step, ids, packed: Packed):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"bad_batch_{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, scene_ids=np.array(ids), xyz=packed.xyz, p2d=packed.p2d, p3d=packed.p3d,
             labels=packed.labels)
    return path


def train(cfg: TrainConfig, dataset: Dataset, params: Optional[FusionParams] = None,
          prepared: Optional[Dict[str, List[PreparedScene]]] = None) -> TrainResult:
    """Train one modality arm; writes metrics.csv and checkpoints when cfg.out_dir is set."""
    if prepared is None:
        prepared = prepare_dataset(dataset, cfg.voxel)
    train_set, val_set = prepared["train"], prepared["val"]
    if not train_set:
        raise ConfigError("dataset has no training scenes")
    m = dataset.m
    if params is None:
        params = init_params(m, cfg.c1, cfg.c2, seed=cfg.seed)
    elif params.m != m:
        raise ShapeError(f"network predicts {params.m} classes but the dataset has m={m}")
    opt = AdamW(lr=cfg.max_lr, weight_decay=cfg.weight_decay)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    weights = params.tensors()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    rows: List[dict] = []
    best_f1, best_epoch, best = -1.0, 0, params.copy()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, counts, ys, preds, sigmas, bleeds = [], [], [], [], [], []
        for b in range(steps_per_epoch):
            chosen = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            packed = pack([s.batch for s in chosen], [s.labels for s in chosen])
            tape, loss, logits, sigma = loss_on(packed, params, cfg.modality, training=True)
            value = float(loss.value)
            if not math.isfinite(value):
                ids = [s.id for s in chosen]
                dump = _dump_bad_batch(out_dir, step, ids, packed)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (scenes {ids}); dump: {dump}")
            grads = tape.backward(loss)
            opt.step(weights, grads, lr_schedule(step, total, cfg.max_lr, cfg.warmup_frac))
            step += 1
            losses.append(value)
            counts.append(packed.n_rows)
            ys.append(packed.labels)
            preds.append(logits.argmax(axis=1))
            sigmas.append(sigma)
            bleeds.append(np.concatenate([s.bleed_voxel for s in chosen]))
        tr = classification_metrics(np.concatenate(ys), np.concatenate(preds), m)
        clean, dirty = _sigma_stats(np.concatenate(sigmas), np.concatenate(bleeds))
        rows.append({"epoch": epoch, "split": "train", "loss": float(np.average(losses, weights=counts)),
                     "accuracy": tr["accuracy"], "macro_f1": tr["macro_f1"],
                     "mean_sigma_clean": clean, "mean_sigma_bleed": dirty})
        if val_set:
            ev = evaluate(params, val_set, cfg.modality)
            rows.append({"epoch": epoch, "split": "val", "loss": ev["loss"], "accuracy": ev["accuracy"],
                         "macro_f1": ev["macro_f1"], "mean_sigma_clean": ev["mean_sigma_clean"],
                         "mean_sigma_bleed": ev["mean_sigma_bleed"]})
            if ev["macro_f1"] > best_f1:
                best_f1, best_epoch, best = ev["macro_f1"], epoch, params.copy()
        log.info("%s epoch %d: train loss %.4f", cfg.modality, epoch, rows[-1 - bool(val_set)]["loss"])
        if out_dir is not None:
            (out_dir).mkdir(parents=True, exist_ok=True)
            (out_dir / "metrics.csv").write_text(metrics_csv(rows))
            if best_epoch == epoch:
                fileio.write_checkpoint(out_dir / "best.fpnn", best.state())
    if out_dir is not None:
        fileio.write_checkpoint(out_dir / "last.fpnn", params.state())
    if not val_set:
        best, best_epoch = params.copy(), cfg.epochs
    return TrainResult(params, best, rows, best_epoch)


def prepare_dataset(dataset: Dataset, voxel: VoxelConfig) -> Dict[str, List[PreparedScene]]:
    return {split: [prepare_scene(s, voxel) for s in dataset.split(split)] for split in ("train", "val")}


def load_params(path) -> FusionParams:
    """Rebuild a network from an FPNN checkpoint, inferring m, C1 and C2 from tensor shapes."""
    arrays = fileio.read_checkpoint(path)
    try:
        c1 = arrays["mlp_l.0.weight"].shape[0]
        c2 = arrays["mlp_g.0.weight"].shape[0]
        m = arrays["head.1.weight"].shape[0]
        hidden = arrays["head.0.weight"].shape[0]
    except KeyError as exc:
        raise ShapeError(f"{path}: checkpoint lacks tensor {exc.args[0]!r}") from None
    params = init_params(m, c1, c2, seed=0, hidden=hidden)
    try:
        params.load_state(arrays)
    except ConfigError as exc:
        raise ShapeError(f"{path}: {exc}") from None
    return params


# --- proxy detection ------------------------------------------------------

def point_probabilities(params: FusionParams, scene: PreparedScene, modality: str):
    """Class probabilities for every in-range point of a scene, via its voxel's gate value.

    Returns (xyz of in-range points, probabilities).
    """
    modality = check_modality(modality)
    packed = pack([scene.batch], dtype=params.mlp_l[0].weight.dtype)
    _, sigma = forward(Tape(), packed, params, modality, training=False)
    p2d, p3d = scene.data.p2d, scene.data.p3d
    if modality == "2d-only":
        p3d = np.zeros_like(p3d)
    elif modality == "3d-only":
        p2d = np.zeros_like(p2d)
    rec = painted_records(scene.data.points.xyz, p2d, p3d, scene.batch, sigma)
    logits = head_logits(rec, params)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    return rec[:, :3].astype(np.float64), probs


def detect(params: FusionParams, scenes: Sequence[PreparedScene], modality: str, min_pts: int = 5,
           radius: float = 1.0):
    """Cluster detections and box ground truth over scenes, tagged with the scene index."""
    dets: List[Detection] = []
    gts = []
    for k, sc in enumerate(scenes):
        xyz, probs = point_probabilities(params, sc, modality)
        dets.extend(cluster_detections(xyz, probs, min_pts=min_pts, radius=radius, sample=k))
        gts.extend(((b.center[0], b.center[1]), b.class_id, k) for b in sc.data.boxes)
    return dets, gts


# --- four-arm benchmark -----------------------------------------------------

@dataclass
class BenchmarkResult:
    arms: Dict[str, dict]
    summary: dict


def evaluate_arm(params: FusionParams, scenes: Sequence[PreparedScene], arm: str, out_dir=None,
                 ap_cfg: Optional[APConfig] = None, min_pts: int = 5, radius: float = 1.0) -> dict:
    """Point metrics, proxy detections and AP report of one arm; files go to `out_dir` when given."""
    arm = check_modality(arm)
    ev = evaluate(params, scenes, arm)
    ev.pop("confusion")
    dets, gts = detect(params, scenes, arm, min_pts, radius)
    report = ap_report(dets, gts, ap_cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_detections(out_dir / "detections.jsonl", dets)
        fileio.dump_json(out_dir / "ap_report.json", report)
        fileio.dump_json(out_dir / "eval.json", ev)
    return {"eval": ev, "ap": report}


def summarize(results: Dict[str, dict]) -> dict:
    return {arm: {"macro_f1": r["eval"]["macro_f1"], "accuracy": r["eval"]["accuracy"],
                  "map": r["ap"]["map"], "mean_sigma_clean": r["eval"]["mean_sigma_clean"],
                  "mean_sigma_bleed": r["eval"]["mean_sigma_bleed"]} for arm, r in results.items()}


def write_summary(out_dir, results: Dict[str, dict]) -> dict:
    """summary.json, summary.csv and the combined ap_report.json for a set of evaluated arms."""
    out_dir = Path(out_dir)
    summary = summarize(results)
    fileio.dump_json(out_dir / "summary.json", summary)
    fileio.dump_json(out_dir / "ap_report.json", {arm: r["ap"] for arm, r in results.items()})
    lines = ["arm,macro_f1,accuracy,map,mean_sigma_clean,mean_sigma_bleed"]
    for arm, row in summary.items():
        lines.append(",".join([arm] + [_fmt(row[k]) for k in ("macro_f1", "accuracy", "map",
                                                                 "mean_sigma_clean", "mean_sigma_bleed")]))
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    return summary


def run_benchmark(dataset: Dataset, out_dir, cfg: Optional[TrainConfig] = None,
                  arms: Sequence[str] = MODALITIES, ap_cfg: Optional[APConfig] = None,
                  min_pts: int = 5, radius: float = 1.0) -> BenchmarkResult:
    """Train and evaluate every modality arm with identical settings.

    Per arm, `out_dir/<arm>/` receives metrics.csv, last.fpnn/best.fpnn,
    detections.jsonl, eval.json and ap_report.json; `out_dir/summary.json`
    compares arms. Evaluation uses the parameters after the final epoch.
    """
    base = cfg or TrainConfig()
    out_dir = Path(out_dir)
    prepared = prepare_dataset(dataset, base.voxel)
    if not prepared["val"]:
        raise ConfigError("benchmark needs a validation split")
    results = {}
    for arm in arms:
        arm = check_modality(arm)
        arm_cfg = replace(base, modality=arm, out_dir=str(out_dir / arm))
        res = train(arm_cfg, dataset, prepared=prepared)
        results[arm] = evaluate_arm(res.params, prepared["val"], arm, out_dir / arm, ap_cfg, min_pts, radius)
        results[arm]["train"] = res
        log.info("%s: val macro-F1 %.4f, mAP %s", arm, results[arm]["eval"]["macro_f1"], results[arm]["ap"]["map"])
    summary = write_summary(out_dir, results)
    return BenchmarkResult(results, summary)
