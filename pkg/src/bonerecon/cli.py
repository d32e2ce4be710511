"""Stage-oriented command line: gen, render, train-teacher, train-seg,
train-student, reconstruct, evaluate.

Each stage reads the resolved configuration, writes its outputs plus a
hashed manifest under the output root (--out or $BONERECON_OUT), and
echoes the fully-resolved config next to them. Exit codes: 0 success,
1 stage failure, 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import fileio, isosurface, metrics, models, training
from .config import RunConfig, load_config, make_config
from .geometry import make_geometry
from .phantom import BONE_CLASSES, generate_scene, mesh_oracle
from .training import SceneBundle, build_bundle, derive_seed

SPLITS = ("labeled", "val", "test", "unlabeled")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bonerecon",
        description="Occupancy-field bone reconstruction from biplanar projections",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "render", "train-teacher", "train-seg", "train-student",
                 "reconstruct", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", default=None,
                       choices=("desk", "paper", "overfit"))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--resolution", type=int, default=None,
                       help="override the reconstruction grid resolution")
        p.add_argument("--out", default=None, help="output root directory")
        if name == "reconstruct":
            p.add_argument("--scene", default=None,
                           help="scene id to reconstruct (default: test split)")
        if name == "evaluate":
            p.add_argument("--dump-vertex-distances", action="store_true")
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.preset:
            raise ValueError("give either --config or --preset, not both")
    else:
        cfg = make_config(args.preset or "desk")
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.dataset.base_seed = args.seed
    if args.resolution is not None:
        cfg.recon_resolution = args.resolution
    return cfg


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("BONERECON_OUT") or "out"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _views(cfg: RunConfig) -> dict:
    views = {}
    for angle in cfg.geometry.angles_deg:
        g = make_geometry(angle, det_px=cfg.geometry.det_px,
                          source_to_axis=cfg.geometry.source_to_axis,
                          source_to_detector=cfg.geometry.source_to_detector,
                          det_extent=cfg.geometry.det_extent)
        views[g.view] = g
    return views


def _scene_ids(out: Path, split: str) -> list[str]:
    return sorted(p.stem for p in (out / "scenes").glob(f"{split}*.json"))


def _load_bundle(out: Path, cfg: RunConfig, scene_id: str, *, images=False,
                 volume=False, meshes=False) -> SceneBundle:
    scene, views = fileio.load_scene(out / "scenes" / f"{scene_id}.json")
    bundle = SceneBundle(scene=scene, views=views)
    if images:
        for name in views:
            bundle.images[name] = fileio.load_image(out / "renders" / scene_id / f"{name}.img")
    if volume:
        bundle.volume = fileio.load_volume(out / "renders" / scene_id / "ct.vol")
    if meshes:
        bundle.meshes = {cls: mesh_oracle(scene, cls, cfg.sample_mesh_resolution)
                         for cls in BONE_CLASSES}
    return bundle


def cmd_gen(cfg: RunConfig, out: Path, args) -> None:
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(exist_ok=True)
    views = _views(cfg)
    counts = {"labeled": cfg.dataset.labeled_train, "val": cfg.dataset.val,
              "test": cfg.dataset.test, "unlabeled": cfg.dataset.unlabeled}
    outputs = []
    seeds = {}
    for split in SPLITS:
        for i in range(counts[split]):
            seed = derive_seed(cfg.dataset.base_seed, split, i)
            scene = generate_scene(seed, cfg.phantom)
            path = scenes_dir / f"{split}{i:03d}.json"
            fileio.save_scene(scene, views, path)
            outputs.append(path)
            seeds[f"{split}{i:03d}"] = seed
    fileio.write_manifest(out, "gen", [], outputs, seeds=seeds)


def cmd_render(cfg: RunConfig, out: Path, args) -> None:
    outputs = []
    for split in SPLITS:
        for scene_id in _scene_ids(out, split):
            scene, views = fileio.load_scene(out / "scenes" / f"{scene_id}.json")
            rdir = out / "renders" / scene_id
            rdir.mkdir(parents=True, exist_ok=True)
            bundle = build_bundle(
                scene, views, ct_resolution=cfg.model.ct_resolution,
                labeled=False, drr_step=cfg.drr.step,
                photons_n0=cfg.drr.photons_n0, sigma_e=cfg.drr.sigma_e,
            )
            for name, img in bundle.images.items():
                fileio.save_image(img, rdir / f"{name}.img")
                outputs += [rdir / f"{name}.img", rdir / f"{name}.img.json"]
            for name, mask in bundle.masks.items():
                from .drr import DOMAIN_MASK, ProjectionImage
                fileio.save_image(
                    ProjectionImage(values=mask, geometry=views[name],
                                    domain=DOMAIN_MASK),
                    rdir / f"{name}_mask.img",
                )
                outputs += [rdir / f"{name}_mask.img", rdir / f"{name}_mask.img.json"]
            fileio.save_volume(bundle.volume, rdir / "ct.vol")
            outputs += [rdir / "ct.vol", rdir / "ct.vol.json"]
    fileio.write_manifest(out, "render", [], outputs)


def cmd_train_teacher(cfg: RunConfig, out: Path, args) -> None:
    bundles = [
        _load_bundle(out, cfg, scene_id, volume=True)
        for scene_id in _scene_ids(out, "labeled")
    ]
    log_path = out / "teacher_log.jsonl"
    log_path.unlink(missing_ok=True)
    net, _ = training.train_teacher(
        bundles, cfg.teacher_schedule, ct_resolution=cfg.model.ct_resolution,
        n_points=cfg.teacher_points, seed=cfg.seed,
        base_width=cfg.model.teacher_base, log_path=log_path,
    )
    net.save(out / "teacher.ckpt")
    fileio.write_manifest(out, "train-teacher", [],
                          [out / "teacher.ckpt", out / "teacher.ckpt.json"],
                          seeds={"train": cfg.seed})


def cmd_train_seg(cfg: RunConfig, out: Path, args) -> None:
    from .drr import to_network_input

    pairs = []
    for scene_id in _scene_ids(out, "labeled"):
        scene, views = fileio.load_scene(out / "scenes" / f"{scene_id}.json")
        for name in views:
            img = fileio.load_image(out / "renders" / scene_id / f"{name}.img")
            mask = fileio.load_image(out / "renders" / scene_id / f"{name}_mask.img")
            pairs.append((to_network_input(img, scene.log_norm_max), mask.values))
    log_path = out / "seg_log.jsonl"
    log_path.unlink(missing_ok=True)
    net, _ = training.train_segmenter(
        pairs, cfg.seg_schedule, image_size=cfg.geometry.det_px, seed=cfg.seed,
        base_width=cfg.model.seg_base, log_path=log_path,
    )
    net.save(out / "segnet.ckpt")
    fileio.write_manifest(out, "train-seg", [],
                          [out / "segnet.ckpt", out / "segnet.ckpt.json"],
                          seeds={"train": cfg.seed})


def cmd_train_student(cfg: RunConfig, out: Path, args) -> None:
    teacher = models.TeacherNet.load(out / "teacher.ckpt")
    seg = models.SegNet.load(out / "segnet.ckpt")
    labeled = [
        _load_bundle(out, cfg, sid, images=True, meshes=True)
        for sid in _scene_ids(out, "labeled")
    ]
    unlabeled = [
        _load_bundle(out, cfg, sid, images=True, volume=True)
        for sid in _scene_ids(out, "unlabeled")
    ]
    log_path = out / "student_log.jsonl"
    log_path.unlink(missing_ok=True)
    net, _ = training.train_student(
        labeled, unlabeled, teacher, seg, cfg.student_schedule, cfg.loss,
        counts=cfg.points, image_size=cfg.geometry.det_px,
        base_width=cfg.model.student_base, w_m=cfg.model.w_m,
        threshold=cfg.model.seg_threshold, seed=cfg.seed, log_path=log_path,
    )
    net.save(out / "student.ckpt")
    fileio.write_manifest(out, "train-student", [],
                          [out / "student.ckpt", out / "student.ckpt.json"],
                          seeds={"train": cfg.seed})


def cmd_reconstruct(cfg: RunConfig, out: Path, args) -> None:
    student = models.StudentNet.load(out / "student.ckpt")
    seg = models.SegNet.load(out / "segnet.ckpt")
    scene_ids = [args.scene] if args.scene else _scene_ids(out, "test")
    if not scene_ids:
        scene_ids = _scene_ids(out, "labeled")[:1]
    outputs = []
    for scene_id in scene_ids:
        bundle = _load_bundle(out, cfg, scene_id, images=True)
        t0 = time.perf_counter()
        meshes = isosurface.reconstruct_all(
            student, bundle.images, seg, resolution=cfg.recon_resolution,
            chunk=cfg.recon_chunk,
        )
        elapsed = time.perf_counter() - t0
        rdir = out / "recon" / scene_id
        rdir.mkdir(parents=True, exist_ok=True)
        for cls, mesh in meshes:
            for ext in (".obj", ".ply"):
                path = rdir / f"bone_{cls}{ext}"
                if mesh.empty:
                    path.unlink(missing_ok=True)
                else:
                    fileio.save_mesh(mesh, path)
                    outputs.append(path)
        print(f"{scene_id}: reconstructed 4 classes at R={cfg.recon_resolution} "
              f"in {elapsed:.1f} s")
    fileio.write_manifest(out, "reconstruct", [], outputs)


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> None:
    rows = []
    outputs = []
    for rdir in sorted((out / "recon").glob("*")):
        scene_id = rdir.name
        scene, _ = fileio.load_scene(out / "scenes" / f"{scene_id}.json")
        for cls in BONE_CLASSES:
            path = rdir / f"bone_{cls}.obj"
            row = {"scene": scene_id, "bone": cls,
                   "assd_mm": float("nan"), "hd_mm": float("nan"),
                   "dsc_pct": 0.0}
            if path.exists():
                pred = fileio.load_mesh(path)
                gt = mesh_oracle(scene, cls, cfg.metrics.oracle_mesh_resolution)
                p_cloud = metrics.sample_surface_points(
                    pred, cfg.metrics.n_points, seed=derive_seed(scene.seed, cls, "p"))
                g_cloud = metrics.sample_surface_points(
                    gt, cfg.metrics.n_points, seed=derive_seed(scene.seed, cls, "g"))
                assd, hd = metrics.surface_distance(p_cloud, g_cloud,
                                                    mm_per_unit=scene.mm_per_unit)
                row["assd_mm"] = assd
                row["hd_mm"] = hd
                row["dsc_pct"] = metrics.dsc(pred, gt, cfg.metrics.dsc_resolution)
                if args.dump_vertex_distances:
                    d = metrics.per_vertex_distances(pred, g_cloud,
                                                     mm_per_unit=scene.mm_per_unit)
                    dump = rdir / f"bone_{cls}_vertex_mm.csv"
                    np.savetxt(dump, d, fmt="%.6g", header="distance_mm")
                    outputs.append(dump)
            rows.append(row)
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["scene", "bone", "assd_mm",
                                               "hd_mm", "dsc_pct"])
        writer.writeheader()
        writer.writerows(rows)
    outputs.append(csv_path)
    fileio.write_manifest(out, "evaluate", [], outputs)


_COMMANDS = {
    "gen": cmd_gen,
    "render": cmd_render,
    "train-teacher": cmd_train_teacher,
    "train-seg": cmd_train_seg,
    "train-student": cmd_train_student,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        json.dump({"error": str(exc), "stage": args.command,
                   "kind": "invalid-config"}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    out = _out_dir(args)
    try:
        cfg.to_json(out / "config.json")
        _COMMANDS[args.command](cfg, out, args)
    except Exception as exc:
        json.dump({"error": str(exc), "stage": args.command,
                   "kind": type(exc).__name__}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
