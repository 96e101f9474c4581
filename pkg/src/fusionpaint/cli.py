"""Command-line entry point: ``fusionpaint <command> [options]``.

Every command takes its parameters from a JSON file (``--config``) plus the
override flags ``--seed``, ``--out`` and ``--modality``. Outputs are written
only under ``--out``. Exit codes: 0 ok, 2 configuration, 3 scene generation,
4 malformed data, 5 shape mismatch between checkpoint and data.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import fileio
from .errors import ConfigError, FusionPaintError, ShapeError
from .evalmetrics import APConfig
from .fusion import MODALITIES, check_modality, forward, fuse, pack, painted_records
from .geometry import PointCloud
from .neuralcore import Tape
from .painting import corrupt_scores, paint_2d, paint_3d
from .synthbench import SCENE_FILES, SceneSpec, build_dataset, load_dataset
from .trainer import (TrainConfig, evaluate_arm, load_params, prepare_dataset, prepare_scene,
                      run_benchmark, train, write_summary)
from .voxelgrid import VoxelBatch, VoxelConfig

log = logging.getLogger("fusionpaint")


# --- configuration ---------------------------------------------------------

def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        cfg = fileio.load_json(p)
    except FusionPaintError as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return cfg


def _check_keys(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


def _build(cls, section: dict, where: str):
    _check_keys(section, {f.name for f in fields(cls)}, where)
    try:
        return cls(**section)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _existing(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing required field {what!r}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what}: path {p} does not exist")
    return p


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(cfg: dict, args) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    if getattr(args, "modality", None):
        section["modality"] = args.modality
    if "voxel" in section and isinstance(section["voxel"], dict):
        section["voxel"] = _build(VoxelConfig, section["voxel"], "train.voxel")
    return _build(TrainConfig, section, "train")


def _voxel_config(cfg: dict) -> VoxelConfig:
    return _build(VoxelConfig, cfg.get("voxel", {}), "voxel")


# --- commands ----------------------------------------------------------------

SYNTH_KEYS = {"num_scenes", "seed", "split", "scene"}


def cmd_synth(args) -> int:
    cfg = _read_config(args.config)
    _check_keys(cfg, SYNTH_KEYS, "synth config")
    n = cfg.get("num_scenes", 40)
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"num_scenes: must be a positive integer, got {n!r}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 7)
    scene = dict(cfg.get("scene", {}))
    _check_keys(scene, {f.name for f in fields(SceneSpec)} - {"seed"}, "scene")
    specs = [SceneSpec.from_dict({**scene, "seed": seed + i}) for i in range(n)]
    manifest = build_dataset(specs, _out_dir(args), tuple(cfg.get("split", (0.8, 0.2))))
    print(f"wrote {len(manifest['scenes'])} scenes to {args.out}")
    return 0


def cmd_paint(args) -> int:
    cfg = _read_config(args.config)
    _check_keys(cfg, {"m", "confusion_p", "mask"}, "paint config")
    scene_dir = _existing(args.scene, "--scene")
    m = int(cfg.get("m", 11))
    modes = {"2d": ("2d",), "3d": ("3d",), "both": ("2d", "3d")}[args.mode]
    needed = [SCENE_FILES["points"], SCENE_FILES["calib"]]
    if "2d" in modes:
        needed.append(cfg.get("mask", SCENE_FILES["mask_corrupt"]))
    if "3d" in modes:
        needed.append(SCENE_FILES["boxes"])
    for name in needed:
        _existing(scene_dir / name, name)
    out = _out_dir(args)
    cloud: PointCloud = fileio.read_points(scene_dir / SCENE_FILES["points"])
    calib = fileio.read_calib(scene_dir / SCENE_FILES["calib"])
    if "2d" in modes:
        mask = fileio.read_mask(scene_dir / cfg.get("mask", SCENE_FILES["mask_corrupt"]), m)
        fileio.write_scores(out / SCENE_FILES["p2d"], paint_2d(cloud, mask, calib))
    if "3d" in modes:
        boxes = fileio.read_boxes(scene_dir / SCENE_FILES["boxes"])
        p3d = paint_3d(cloud, boxes, m)
        p = float(cfg.get("confusion_p", 0.0))
        if p > 0:
            p3d = corrupt_scores(p3d, p, seed=args.seed if args.seed is not None else 0)
        fileio.write_scores(out / SCENE_FILES["p3d"], p3d)
    print(f"painted {cloud.n} points ({args.mode}) into {out}")
    return 0


def _load_checked(path, m: int):
    params = load_params(path)
    if params.m != m:
        raise ShapeError(f"{path}: checkpoint predicts {params.m} classes but the dataset has m={m}")
    return params


def _scenes(cfg: dict, dataset, voxel: VoxelConfig):
    split = cfg.get("split", "val")
    return [prepare_scene(s, voxel) for s in dataset.split(split)]


def cmd_fuse(args) -> int:
    """Fused voxels (FPVX, features = enhanced voxels) and per-voxel sigma (FPSC, e x 1) per scene."""
    cfg = _read_config(args.config)
    _check_keys(cfg, {"dataset", "checkpoint", "split", "voxel"}, "fuse config")
    dataset = load_dataset(_existing(cfg.get("dataset"), "dataset"))
    params = _load_checked(_existing(cfg.get("checkpoint"), "checkpoint"), dataset.m)
    out = _out_dir(args)
    scenes = _scenes(cfg, dataset, _voxel_config(cfg))
    for sc in scenes:
        fused = fuse(sc.batch, params)
        b = sc.batch
        vb = VoxelBatch(b.coords, fused.fused.astype(np.float32), b.counts, b.pad_mask, b.point_index,
                        b.point_voxel, b.m)
        fileio.write_voxels(out / f"{sc.id}.fpvx", vb)
        fileio.write_scores(out / f"{sc.id}.sigma.fpsc", fused.attention.reshape(-1, 1))
    print(f"fused {len(scenes)} scenes into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    _check_keys(cfg, {"dataset", "train"}, "train config")
    dataset = load_dataset(_existing(cfg.get("dataset"), "dataset"))
    tcfg = _train_config(cfg, args)
    tcfg.out_dir = str(_out_dir(args))
    res = train(tcfg, dataset)
    last_val = [r for r in res.rows if r["split"] == "val"]
    msg = f"trained {tcfg.modality} for {tcfg.epochs} epochs"
    if last_val:
        msg += f"; final val macro-F1 {last_val[-1]['macro_f1']:.4f} (best epoch {res.best_epoch})"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    """Evaluate given checkpoints, or train and evaluate every arm when none are given."""
    cfg = _read_config(args.config)
    _check_keys(cfg, {"dataset", "train", "ap", "detector", "checkpoints"}, "eval config")
    dataset = load_dataset(_existing(cfg.get("dataset"), "dataset"))
    ap_cfg = _build(APConfig, cfg.get("ap", {}), "ap")
    det = cfg.get("detector", {})
    _check_keys(det, {"min_pts", "radius"}, "detector")
    min_pts, radius = int(det.get("min_pts", 5)), float(det.get("radius", 1.0))
    out = _out_dir(args)
    checkpoints = cfg.get("checkpoints")
    if checkpoints is None:
        tcfg = _train_config({"train": {k: v for k, v in cfg.get("train", {}).items() if k != "modality"}},
                             argparse.Namespace(seed=args.seed, modality=None))
        arms = [check_modality(args.modality)] if args.modality else list(MODALITIES)
        res = run_benchmark(dataset, out, tcfg, arms, ap_cfg, min_pts, radius)
        summary = res.summary
    else:
        _check_keys(checkpoints, MODALITIES, "checkpoints")
        if args.modality:
            checkpoints = {check_modality(args.modality): checkpoints.get(check_modality(args.modality))}
        paths = {arm: _existing(p, f"checkpoints.{arm}") for arm, p in checkpoints.items()}
        voxel = _train_config(cfg, argparse.Namespace(seed=args.seed, modality=None)).voxel
        val = prepare_dataset(dataset, voxel)["val"]
        if not val:
            raise ConfigError("dataset has no validation scenes")
        results = {arm: evaluate_arm(_load_checked(p, dataset.m), val, arm, out / arm, ap_cfg, min_pts, radius)
                   for arm, p in paths.items()}
        summary = write_summary(out, results)
    for arm, row in summary.items():
        m_ap = "n/a" if row["map"] is None else f"{row['map']:.4f}"
        print(f"{arm:18s} macro-F1 {row['macro_f1']:.4f}  accuracy {row['accuracy']:.4f}  mAP {m_ap}")
    return 0


def cmd_export(args) -> int:
    """Painted clouds (FPPT) with each point's labels scaled by its voxel's gate value."""
    cfg = _read_config(args.config)
    _check_keys(cfg, {"dataset", "checkpoint", "split", "voxel"}, "export config")
    dataset = load_dataset(_existing(cfg.get("dataset"), "dataset"))
    params = _load_checked(_existing(cfg.get("checkpoint"), "checkpoint"), dataset.m)
    modality = check_modality(args.modality or "fused-attention")
    out = _out_dir(args)
    scenes = _scenes(cfg, dataset, _voxel_config(cfg))
    for sc in scenes:
        _, sigma = forward(Tape(), pack([sc.batch], dtype=params.mlp_l[0].weight.dtype), params, modality)
        p2d, p3d = sc.data.p2d, sc.data.p3d
        rec = painted_records(sc.data.points.xyz, p2d, p3d, sc.batch, sigma)
        fileio.write_painted(out / f"{sc.id}.fppt", rec, dataset.m)
    print(f"exported {len(scenes)} painted clouds to {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "paint": cmd_paint, "fuse": cmd_fuse, "train": cmd_train,
            "eval": cmd_eval, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionpaint", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, modality=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory")
        if modality:
            p.add_argument("--modality", choices=MODALITIES, help="modality arm")
        return p

    add("synth", "generate a synthetic dataset")
    p = add("paint", "paint one scene's points from its mask and/or boxes")
    p.add_argument("--scene", required=True, help="scene directory with points.bin and calib.json")
    p.add_argument("--mode", choices=("2d", "3d", "both"), default="both")
    add("fuse", "write fused voxels and gate values with a trained checkpoint")
    add("train", "train one modality arm", modality=True)
    add("eval", "evaluate checkpoints or run the four-arm benchmark", modality=True)
    add("export", "write gated painted clouds", modality=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, which matches the config exit code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FusionPaintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
