"""Command-line entry point: synth / train / extract / render / eval / ablate."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("roomsdf")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_DATA = 4
EXIT_RUNTIME = 5


class MissingInputError(FileNotFoundError):
    pass


def _write_resolved_config(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, **payload}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(snap, indent=2, sort_keys=True, default=str) + "\n")


def _load_yaml_config(path) -> dict:
    import yaml

    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError("config file must contain a mapping")
    return data


def _build_train_config(args, file_cfg: dict):
    from .fields import ArchConfig
    from .losses import LossWeights
    from .trainer import TrainConfig

    base = TrainConfig.desk() if args.desk_scale else TrainConfig()
    cfg = base.to_dict()

    sections = {k: dict(file_cfg.get(k, {})) for k in ("model", "sampler", "losses", "train")}
    arch = dict(cfg["arch"])
    arch.update(sections["model"])
    cfg["arch"] = arch
    for key in ("n_coarse", "n_fine"):
        if key in sections["sampler"]:
            cfg[key] = sections["sampler"][key]
    weights = dict(cfg["loss_weights"])
    for key, val in sections["losses"].items():
        if key in weights:
            weights[key] = val
        elif key == "plane_loss_reduction":
            cfg["plane_loss_reduction"] = val
    cfg["loss_weights"] = weights
    cfg.update(sections["train"])

    overrides = {"iterations": args.iterations, "rays_per_batch": args.rays,
                 "learning_rate": args.lr, "ablation": args.ablation,
                 "seed": args.seed, "dtype": args.dtype}
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val

    cfg["arch"] = ArchConfig.from_dict(cfg["arch"])
    cfg["loss_weights"] = LossWeights(**cfg["loss_weights"])
    cfg["adam_betas"] = tuple(cfg["adam_betas"])
    return TrainConfig(**cfg)


def _load_scene_arg(args):
    from .scenes import load_scene

    scene_dir = Path(args.scene)
    if not scene_dir.exists():
        raise MissingInputError(f"scene directory not found: {scene_dir}")
    return load_scene(scene_dir, margin=getattr(args, "margin", None),
                      stride=getattr(args, "stride", 1) or 1,
                      semantic_remap=getattr(args, "semantic_remap", None))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .scenes import SyntheticRoomSpec, generate_synthetic_room

    spec = SyntheticRoomSpec(
        extents=tuple(args.extents),
        wall_yaw=math.radians(args.wall_yaw_deg),
        n_views=args.n_views,
        image_size=args.image_size,
        texture_seed=args.seed,
        label_noise_rate=args.label_noise,
        depth_sparsity=args.depth_sparsity,
    )
    out = Path(args.out)
    dataset = generate_synthetic_room(spec, out_dir=out)
    _write_resolved_config(out, "synth", {"spec": spec.to_dict(), "seed": args.seed,
                                          "norm_margin": dataset.meta["norm_margin"]})
    print(f"wrote {len(dataset)} views to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    dataset = _load_scene_arg(args)
    config = _build_train_config(args, _load_yaml_config(args.config))
    if config.needs_semantics() and not dataset.has_semantics:
        raise ValueError(f"ablation {config.ablation!r} requires semantics, "
                         f"but the scene has none")
    out = Path(args.out)
    _write_resolved_config(out, "train", {"scene": str(args.scene),
                                          "config": config.to_dict(),
                                          "config_hash": config.config_hash()})
    result = train(dataset, config, workdir=out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"final total loss: {result.final_report.total:.5f}")
    return EXIT_OK


def _load_checkpoint_arg(args):
    from .fields import load_checkpoint

    path = Path(args.checkpoint)
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_extract(args) -> int:
    from .extraction import cull_to_observed, extract_mesh
    from .meshio import write_ply

    params, meta = _load_checkpoint_arg(args)
    lo, hi = args.bounds[:3], args.bounds[3:]
    mesh = extract_mesh(params, resolution=args.resolution, bounds=(lo, hi),
                        norm_transform=meta["norm_transform"])
    if mesh.empty:
        log.warning("extracted mesh is empty (no zero crossing)")
    if args.cull != "none":
        dataset = _load_scene_arg(args)
        mesh = cull_to_observed(mesh, dataset, mode=args.cull)
    out = Path(args.out)
    write_ply(mesh, out, binary=not args.ascii)
    _write_resolved_config(out.parent, "extract", {
        "checkpoint": str(args.checkpoint), "resolution": args.resolution,
        "bounds": list(args.bounds), "cull": args.cull,
        "vertices": len(mesh.vertices), "faces": len(mesh.faces)})
    print(f"mesh: {out} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces)")
    return EXIT_OK


def cmd_render(args) -> int:
    import torch

    from . import fileio
    from .renderer import RenderConfig, render_view
    from .scenes import class_to_file_labels

    params, meta = _load_checkpoint_arg(args)
    dataset = _load_scene_arg(args)
    norm_scale = dataset.norm_transform.scale
    cfg = RenderConfig(n_coarse=args.n_coarse, n_fine=args.n_fine, stratified=False)
    out = Path(args.out)
    view_ids = args.views if args.views else list(range(len(dataset)))
    gen = torch.Generator().manual_seed(args.seed)
    for vid in view_ids:
        view = dataset.views[vid]
        res = render_view(params, view.camera, cfg, generator=gen)
        name = view.name or f"{vid:06d}"
        fileio.write_color_png(out / "color" / f"{name}.png", res["color"])
        h, w = view.camera.height, view.camera.width
        jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        uv = np.stack([ii.reshape(-1) + 0.5, jj.reshape(-1) + 0.5], axis=-1)
        ray_scale = view.camera.pixel_ray_scale(uv).reshape(h, w)
        z_depth_m = res["depth"] / (norm_scale * ray_scale)
        fileio.write_depth_png(out / "depth" / f"{name}.png", z_depth_m)
        if "labels" in res:
            fileio.write_label_png(out / "label" / f"{name}.png",
                                   class_to_file_labels(res["labels"]))
        log.info("rendered view %s", name)
    _write_resolved_config(out, "render", {"checkpoint": str(args.checkpoint),
                                           "scene": str(args.scene),
                                           "views": view_ids, "seed": args.seed})
    print(f"rendered {len(view_ids)} views into {out}")
    return EXIT_OK


def _geometry_metrics(pred_mesh, dataset, args):
    from .evaluation import reconstruction_metrics, sample_points
    from .extraction import cull_to_observed

    if args.cull != "none":
        pred_mesh = cull_to_observed(pred_mesh, dataset, mode=args.cull)
    if pred_mesh.empty:
        raise ValueError("predicted mesh is empty after culling")
    if dataset.gt_mesh is None:
        raise MissingInputError("scene has no gt_mesh.ply; cannot evaluate geometry")
    gt_mesh_m = dataset.norm_transform.invert_mesh(dataset.gt_mesh)
    p = sample_points(pred_mesh, args.n_points, seed=args.seed)
    g = sample_points(gt_mesh_m, args.n_points, seed=args.seed + 1)
    return reconstruction_metrics(p, g, tau=args.tau)


def cmd_eval(args) -> int:
    from . import fileio
    from .evaluation import semantic_iou
    from .meshio import read_ply

    dataset = _load_scene_arg(args)
    report = {}
    if args.pred:
        pred_path = Path(args.pred)
        if not pred_path.exists():
            raise MissingInputError(f"predicted mesh not found: {pred_path}")
        metrics = _geometry_metrics(read_ply(pred_path), dataset, args)
        report["geometry"] = metrics.to_dict()
        print("    Acc    Comp    Prec  Recall  F-score")
        print(metrics.row())

    if args.pred_labels:
        label_dir = Path(args.pred_labels)
        if not label_dir.is_dir():
            raise MissingInputError(f"label directory not found: {label_dir}")
        gt_sub = "gt/semantic_exact" if args.gt_labels == "exact" else "semantic"
        scene_dir = Path(args.scene)
        gt_files = sorted((scene_dir / gt_sub).glob("*.png"))
        pred_files = sorted(label_dir.glob("*.png"))
        if len(gt_files) == 0:
            raise MissingInputError(f"no ground-truth labels under {scene_dir / gt_sub}")
        if len(gt_files) != len(pred_files):
            raise ValueError(f"label count mismatch: {len(pred_files)} predicted "
                             f"vs {len(gt_files)} ground truth")
        iou = semantic_iou([fileio.read_label_png(p) for p in pred_files],
                           [fileio.read_label_png(p) for p in gt_files])
        report["semantics"] = iou.to_dict()
        print("   IoU_f   IoU_w   IoU_m")
        print(f"{iou.iou_floor:8.4f}{iou.iou_wall:8.4f}{iou.iou_mean:8.4f}")

    if not report:
        raise ValueError("nothing to evaluate: pass --pred and/or --pred-labels")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_resolved_config(out, "eval", {"scene": str(args.scene),
                                         "pred": str(args.pred),
                                         "pred_labels": str(args.pred_labels),
                                         "tau": args.tau, "cull": args.cull,
                                         "n_points": args.n_points, "seed": args.seed})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .extraction import cull_to_observed, extract_mesh
    from .losses import ABLATIONS
    from .trainer import train

    dataset = _load_scene_arg(args)
    out = Path(args.out)
    rows = {}
    for name in ABLATIONS:
        run_args = argparse.Namespace(**vars(args))
        run_args.ablation = name
        config = _build_train_config(run_args, _load_yaml_config(args.config))
        workdir = out / name
        log.info("ablation %s: training %d iterations", name, config.iterations)
        result = train(dataset, config, workdir=workdir)
        mesh = extract_mesh(result.params, resolution=args.resolution,
                            norm_transform=dataset.norm_transform)
        mesh = cull_to_observed(mesh, dataset, mode="tsdf_refuse")
        metrics = _geometry_metrics_from_mesh(mesh, dataset, args)
        rows[name] = metrics
    print(f"{'config':<12}    Acc    Comp    Prec  Recall  F-score")
    for name, m in rows.items():
        print(f"{name:<12}{m.row()}")
    report = {name: m.to_dict() for name, m in rows.items()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablate_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_resolved_config(out, "ablate", {"scene": str(args.scene),
                                           "iterations": args.iterations,
                                           "seed": args.seed})
    return EXIT_OK


def _geometry_metrics_from_mesh(mesh, dataset, args):
    from .evaluation import reconstruction_metrics, sample_points

    if mesh.empty:
        raise ValueError("mesh is empty after culling")
    gt_mesh_m = dataset.norm_transform.invert_mesh(dataset.gt_mesh)
    p = sample_points(mesh, args.n_points, seed=args.seed)
    g = sample_points(gt_mesh_m, args.n_points, seed=args.seed + 1)
    return reconstruction_metrics(p, g, tau=args.tau)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomsdf",
                                description="Indoor SDF reconstruction with planar priors")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic room scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-views", type=int, default=40)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--extents", type=float, nargs=3, default=(1.1, 0.9, 0.65))
    sp.add_argument("--wall-yaw-deg", type=float, default=0.0)
    sp.add_argument("--label-noise", type=float, default=0.0)
    sp.add_argument("--depth-sparsity", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="optimize a field on a scene")
    tp.add_argument("--scene", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None, help="YAML config file")
    tp.add_argument("--ablation", default=None,
                    choices=["volsdf", "volsdf_d", "volsdf_d_g", "volsdf_d_s", "ours"])
    tp.add_argument("--iterations", type=int, default=None)
    tp.add_argument("--rays", type=int, default=None)
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--dtype", default=None, choices=["float32", "float64"])
    tp.add_argument("--desk-scale", action="store_true")
    tp.add_argument("--margin", type=float, default=None)
    tp.add_argument("--stride", type=int, default=1)
    tp.add_argument("--semantic-remap", default=None)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("extract", help="extract a mesh from a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--resolution", type=int, default=256)
    ep.add_argument("--bounds", type=float, nargs=6,
                    default=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0))
    ep.add_argument("--cull", default="none",
                    choices=["none", "visibility", "tsdf_refuse"])
    ep.add_argument("--scene", default=None, help="required when culling")
    ep.add_argument("--margin", type=float, default=None)
    ep.add_argument("--ascii", action="store_true")
    ep.set_defaults(func=cmd_extract)

    rp = sub.add_parser("render", help="render views from a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--scene", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--views", type=int, nargs="*", default=None)
    rp.add_argument("--n-coarse", type=int, default=64)
    rp.add_argument("--n-fine", type=int, default=64)
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--margin", type=float, default=None)
    rp.set_defaults(func=cmd_render)

    vp = sub.add_parser("eval", help="evaluate a mesh and/or label maps")
    vp.add_argument("--scene", required=True)
    vp.add_argument("--pred", default=None, help="predicted mesh (PLY, meters)")
    vp.add_argument("--pred-labels", default=None, help="directory of label PNGs")
    vp.add_argument("--gt-labels", default="exact", choices=["exact", "input"])
    vp.add_argument("--out", required=True)
    vp.add_argument("--tau", type=float, default=0.05)
    vp.add_argument("--n-points", type=int, default=200000)
    vp.add_argument("--cull", default="none",
                    choices=["none", "visibility", "tsdf_refuse"])
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--margin", type=float, default=None)
    vp.set_defaults(func=cmd_eval)

    ap = sub.add_parser("ablate", help="run the ablation ladder end to end")
    ap.add_argument("--scene", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--iterations", type=int, default=None)
    ap.add_argument("--rays", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--dtype", default=None, choices=["float32", "float64"])
    ap.add_argument("--desk-scale", action="store_true")
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--tau", type=float, default=0.05)
    ap.add_argument("--n-points", type=int, default=20000)
    ap.add_argument("--margin", type=float, default=None)
    ap.add_argument("--stride", type=int, default=1)
    ap.add_argument("--semantic-remap", default=None)
    ap.set_defaults(func=cmd_ablate)

    return p


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingInputError as exc:
        log.error("%s", exc)
        return EXIT_MISSING_INPUT
    except (ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_BAD_DATA
    except RuntimeError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
