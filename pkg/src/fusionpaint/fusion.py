"""Adaptive attention fusion of 2D- and 3D-painted labels.

Per voxel a PointNet-style local feature (shared MLP + max over slots) is
concatenated with a per-cloud global feature (MLP + max over voxels) and mapped
to a single gate value sigma. The 2D labels of the voxel's points are scaled by
sigma and the 3D labels by 1 - sigma. A small per-point classifier head stands
in for a downstream detector so the fused labels can be trained end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .neuralcore import DenseLayer, Tape, Tensor, dense_layer, mlp_forward, sigmoid
from .voxelgrid import VoxelBatch

MODALITIES = ("2d-only", "3d-only", "fused-fixed-half", "fused-attention")
_PINNED_SIGMA = {"2d-only": 1.0, "3d-only": 0.0, "fused-fixed-half": 0.5}


def check_modality(modality: str) -> str:
    key = modality.lower()
    if key not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}; expected one of {', '.join(MODALITIES)}")
    return key


@dataclass
class FusionParams:
    mlp_l: List[DenseLayer]
    mlp_g: List[DenseLayer]
    mlp_att: List[DenseLayer]
    head: List[DenseLayer]
    m: int
    c1: int
    c2: int
    # fixed multiplier applied to xyz before mlp_l and the head (not trained);
    # 1 leaves coordinates as metres, init_params picks 1 / XYZ_EXTENT
    xyz_scale: np.ndarray = field(default_factory=lambda: np.ones(1))

    def groups(self):
        return (("mlp_l", self.mlp_l), ("mlp_g", self.mlp_g),
                ("mlp_att", self.mlp_att), ("head", self.head))

    def tensors(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name (the same names the tape reports gradients under)."""
        out = {}
        for prefix, layers in self.groups():
            for i, layer in enumerate(layers):
                out.update(layer.tensors(f"{prefix}.{i}"))
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, layers in self.groups():
            for i, layer in enumerate(layers):
                out.update(layer.buffers(f"{prefix}.{i}"))
        out["input.xyz_scale"] = self.xyz_scale
        return out

    def state(self) -> Dict[str, np.ndarray]:
        return {**self.tensors(), **self.buffers()}

    def load_state(self, arrays: Dict[str, np.ndarray]):
        own = self.state()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ConfigError(f"checkpoint tensors do not match network (missing={missing}, unexpected={extra})")
        for name, arr in own.items():
            src = np.asarray(arrays[name])
            if src.shape != arr.shape:
                raise ConfigError(f"tensor {name} has shape {src.shape}, expected {arr.shape}")
            arr[...] = src

    def astype(self, dtype) -> "FusionParams":
        clone = init_params(self.m, self.c1, self.c2, seed=0, dtype=dtype, hidden=self.mlp_att[0].out_dim)
        clone.load_state(self.state())
        return clone

    def copy(self) -> "FusionParams":
        return self.astype(self.mlp_l[0].weight.dtype)


XYZ_EXTENT = 20.0  # metres; half-width of the default voxel range


def init_params(m: int = 11, c1: int = 64, c2: int = 128, seed: int = 0, dtype=np.float32,
                hidden: int = 64) -> FusionParams:
    """He-initialised network. The gate's output layer starts at zero, so sigma = 0.5 everywhere.

    Coordinates enter the network divided by XYZ_EXTENT so they share the 0..1
    range of the label channels.
    """
    rng = np.random.default_rng(seed)
    width = 3 + 2 * m
    params = FusionParams(
        mlp_l=[dense_layer(width, c1, rng, dtype=dtype)],
        mlp_g=[dense_layer(c1, c2, rng, dtype=dtype)],
        mlp_att=[dense_layer(c1 + c2, hidden, rng, dtype=dtype),
                 dense_layer(hidden, 1, rng, norm=False, activation=False, dtype=dtype, zero=True)],
        head=[dense_layer(width, hidden, rng, dtype=dtype),
              dense_layer(hidden, m, rng, norm=False, activation=False, dtype=dtype)],
        m=m, c1=c1, c2=c2, xyz_scale=np.full(1, 1.0 / XYZ_EXTENT, dtype),
    )
    return params


@dataclass
class Packed:
    """Non-padded point slots of one or more clouds, flattened to rows.

    Rows of a voxel are contiguous, as are voxels of a cloud, so both
    max-pools are segment reductions.
    """

    xyz: np.ndarray
    p2d: np.ndarray
    p3d: np.ndarray
    row_voxel: np.ndarray
    row_starts: np.ndarray
    voxel_sample: np.ndarray
    voxel_starts: np.ndarray
    labels: Optional[np.ndarray] = None
    point_index: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.p2d.shape[1]

    @property
    def n_rows(self) -> int:
        return self.xyz.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.row_starts.shape[0]


def pack(batches: Sequence[VoxelBatch], labels: Optional[Sequence[np.ndarray]] = None,
         dtype=np.float32, keep_pads: bool = False) -> Packed:
    """Flatten voxel batches (one per cloud) into rows; pads are dropped unless `keep_pads`.

    `labels`, when given, holds per-point class indices for each cloud and is
    gathered onto the rows.
    """
    feats, row_voxel, voxel_sample, lab, pidx = [], [], [], [], []
    offset = 0
    for s, batch in enumerate(batches):
        if batch.e == 0:
            raise ContractError(f"cloud {s} has no non-empty voxels")
        keep = np.ones_like(batch.pad_mask) if keep_pads else ~batch.pad_mask
        vox, slot = np.nonzero(keep)
        feats.append(batch.features[vox, slot])
        row_voxel.append(vox + offset)
        voxel_sample.append(np.full(batch.e, s, dtype=np.int64))
        src = batch.point_index[vox, slot]
        pidx.append(src)
        if labels is not None:
            lab.append(np.asarray(labels[s], dtype=np.int64)[src])
        offset += batch.e
    f = np.concatenate(feats).astype(dtype, copy=False)
    m = batches[0].m
    row_voxel = np.concatenate(row_voxel)
    voxel_sample = np.concatenate(voxel_sample)
    return Packed(
        xyz=f[:, :3], p2d=f[:, 3:3 + m], p3d=f[:, 3 + m:],
        row_voxel=row_voxel,
        row_starts=np.flatnonzero(np.r_[True, row_voxel[1:] != row_voxel[:-1]]),
        voxel_sample=voxel_sample,
        voxel_starts=np.flatnonzero(np.r_[True, voxel_sample[1:] != voxel_sample[:-1]]),
        labels=np.concatenate(lab) if labels is not None else None,
        point_index=np.concatenate(pidx),
    )


def _check_width(params: FusionParams, width: int):
    expected = params.mlp_l[0].in_dim
    if width != expected:
        raise ConfigError(f"feature width {width} does not match network input width {expected}")


def _gate_tensor(tape: Tape, packed: Packed, params: FusionParams, training: bool, update_stats: bool) -> Tensor:
    feats = tape.constant(np.concatenate([packed.xyz * params.xyz_scale, packed.p2d, packed.p3d], axis=1))
    per_slot = mlp_forward(params.mlp_l, feats, tape, "mlp_l", training, update_stats)
    local = tape.segment_max(per_slot, packed.row_starts)
    per_voxel = mlp_forward(params.mlp_g, local, tape, "mlp_g", training, update_stats)
    glob = tape.segment_max(per_voxel, packed.voxel_starts)
    v_gl = tape.concat([local, tape.gather_rows(glob, packed.voxel_sample)], axis=1)
    logit = mlp_forward(params.mlp_att, v_gl, tape, "mlp_att", training, update_stats)
    return tape.sigmoid(logit)


def forward(tape: Tape, packed: Packed, params: FusionParams, modality: str = "fused-attention",
            training: bool = False, update_stats: bool = True):
    """Full network on packed rows. Returns (logits tensor R x m, sigma array E)."""
    modality = check_modality(modality)
    _check_width(params, 3 + 2 * packed.m)
    p2d, p3d = packed.p2d, packed.p3d
    if modality == "2d-only":
        p3d = np.zeros_like(p3d)
    elif modality == "3d-only":
        p2d = np.zeros_like(p2d)

    if modality == "fused-attention":
        gate = _gate_tensor(tape, packed, params, training, update_stats)
        sigma = gate.value[:, 0]
        row_gate = tape.gather_rows(gate, packed.row_voxel)
        scaled_2d = tape.mul(tape.constant(p2d), row_gate)
        scaled_3d = tape.mul(tape.constant(p3d), tape.one_minus(row_gate))
        head_in = tape.concat([tape.constant(packed.xyz * params.xyz_scale), scaled_2d, scaled_3d], axis=1)
    else:
        s = _PINNED_SIGMA[modality]
        sigma = np.full(packed.n_voxels, s, dtype=p2d.dtype)
        head_in = tape.constant(np.concatenate([packed.xyz * params.xyz_scale, s * p2d, (1 - s) * p3d], axis=1)
                                .astype(p2d.dtype, copy=False))
    logits = mlp_forward(params.head, head_in, tape, "head", training, update_stats)
    return logits, sigma


def loss_on(packed: Packed, params: FusionParams, modality: str = "fused-attention",
            training: bool = True, update_stats: bool = True, tape: Optional[Tape] = None):
    """Cross-entropy of the head against packed labels. Returns (tape, loss tensor, logits, sigma)."""
    if packed.labels is None:
        raise ContractError("packed rows carry no labels")
    tape = Tape() if tape is None else tape
    logits, sigma = forward(tape, packed, params, modality, training, update_stats)
    loss = tape.cross_entropy(logits, packed.labels)
    return tape, loss, logits.value, sigma


# --- dense, per-operation API ---------------------------------------------

@dataclass
class FusedBatch:
    attention: np.ndarray
    scaled_2d: np.ndarray
    scaled_3d: np.ndarray
    fused: np.ndarray


def _scaled_rows(features: np.ndarray, params: FusionParams) -> np.ndarray:
    """Flatten e x M x C slots to rows in the network dtype, xyz multiplied by xyz_scale."""
    rows = features.reshape(-1, features.shape[-1]).astype(params.mlp_l[0].weight.dtype)
    rows[:, :3] *= params.xyz_scale
    return rows


def local_feature(batch: VoxelBatch, params: FusionParams) -> np.ndarray:
    """Per-voxel max over slots of mlp_l (eval-mode batch-norm); shape e x C1."""
    _check_width(params, batch.channels)
    e, big_m, c = batch.features.shape
    rows = _scaled_rows(batch.features, params)
    per_slot = mlp_forward(params.mlp_l, rows)
    return per_slot.reshape(e, big_m, -1).max(axis=1)


def global_feature(local: np.ndarray, params: FusionParams, voxel_sample: Optional[np.ndarray] = None) -> np.ndarray:
    """Max over voxels of mlp_g(local). One C2 vector, or one row per cloud when
    `voxel_sample` assigns voxels to clouds (maxima never cross clouds)."""
    local = np.asarray(local)
    if local.shape[0] < 1:
        raise ContractError("global feature of an empty voxel set")
    per_voxel = mlp_forward(params.mlp_g, local)
    if voxel_sample is None:
        return per_voxel.max(axis=0)
    voxel_sample = np.asarray(voxel_sample)
    return np.stack([per_voxel[voxel_sample == s].max(axis=0) for s in np.unique(voxel_sample)])


def attention_scores(local: np.ndarray, glob: np.ndarray, params: FusionParams) -> np.ndarray:
    local = np.asarray(local)
    glob = np.asarray(glob).reshape(1, -1)
    v_gl = np.concatenate([local, np.repeat(glob, local.shape[0], axis=0)], axis=1)
    return sigmoid(mlp_forward(params.mlp_att, v_gl))[:, 0]


def gate_labels(batch: VoxelBatch, scores) -> FusedBatch:
    scores = np.asarray(scores).reshape(-1)
    if scores.shape[0] != batch.e:
        raise ConfigError(f"got {scores.shape[0]} attention scores for {batch.e} voxels")
    s = scores[:, None, None]
    scaled_2d = (batch.p2d * s).astype(np.float32)
    scaled_3d = (batch.p3d * (1 - s)).astype(np.float32)
    fused = np.concatenate([batch.xyz, scaled_2d, scaled_3d], axis=2)
    return FusedBatch(scores, scaled_2d, scaled_3d, fused)


def fuse(batch: VoxelBatch, params: FusionParams) -> FusedBatch:
    """Gate one cloud's voxels with the learned attention (eval mode)."""
    local = local_feature(batch, params)
    glob = global_feature(local, params)
    return gate_labels(batch, attention_scores(local, glob, params))


def classify_points(fused: FusedBatch, params: FusionParams) -> np.ndarray:
    """Per-slot class logits, e x M x m."""
    f = fused.fused
    if f.shape[2] != params.head[0].in_dim:
        raise ConfigError(f"fused width {f.shape[2]} does not match head input width {params.head[0].in_dim}")
    e, big_m, c = f.shape
    return mlp_forward(params.head, _scaled_rows(f, params)).reshape(e, big_m, -1)


def head_logits(records: np.ndarray, params: FusionParams) -> np.ndarray:
    """Head logits for flat (3 + 2m) painted records, e.g. the output of painted_records."""
    records = np.asarray(records)
    if records.ndim != 2 or records.shape[1] != params.head[0].in_dim:
        raise ConfigError(f"records need shape (n, {params.head[0].in_dim}), got {records.shape}")
    return mlp_forward(params.head, _scaled_rows(records, params))


def painted_records(points_xyz: np.ndarray, p2d: np.ndarray, p3d: np.ndarray, batch: VoxelBatch,
                    sigma) -> np.ndarray:
    """(3 + 2m) records for every in-range point, each scaled by its voxel's sigma.

    Points dropped by per-voxel sampling still get their voxel's gate value.
    """
    sigma = np.asarray(sigma).reshape(-1)
    if sigma.shape[0] != batch.e:
        raise ConfigError("sigma does not correspond to the voxel batch")
    xyz = np.asarray(points_xyz, dtype=np.float64).reshape(-1, 3)
    inside = np.flatnonzero(batch.point_voxel >= 0)
    s = sigma[batch.point_voxel[inside]][:, None]
    if not np.all(np.isfinite(s)):
        raise DataError("a point was left without a gate value")
    rec = np.concatenate([xyz[inside], p2d[inside] * s, p3d[inside] * (1 - s)], axis=1)
    return rec.astype(np.float32)


def export_painted_cloud(path, points_xyz, p2d, p3d, batch: VoxelBatch, fused: FusedBatch) -> np.ndarray:
    """Write the fused painting of every in-range point as an FPPT file."""
    from .fileio import write_painted

    rec = painted_records(points_xyz, p2d, p3d, batch, fused.attention)
    write_painted(path, rec, batch.m)
    return rec
