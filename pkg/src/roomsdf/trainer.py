"""Optimization loop: ray batching, parameter updates, loss logging,
checkpoints and the ablation configurations."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import FLOOR, WALL, UNLABELED
from .fields import ArchConfig, FieldParams, init_geometric, save_checkpoint
from .losses import (ABLATIONS, LossReport, LossWeights, depth_loss, eikonal_loss,
                     floor_normal_loss, geo_loss, joint_loss, photometric_loss,
                     semantic_ce_loss, total_loss, wall_normal_loss)
from .renderer import RayBatch, RenderConfig, ray_sphere_bounds, render_batch
from .scenes import SceneDataset, file_labels_to_class

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report: LossReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50000
    rays_per_batch: int = 1024
    learning_rate: float = 5e-4
    adam_betas: tuple = (0.9, 0.999)
    ablation: str = "ours"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    n_coarse: int = 64
    n_fine: int = 64
    eikonal_uniform: int = 1024
    plane_loss_reduction: str = "sum"
    seed: int = 0
    checkpoint_interval: int = 5000
    log_interval: int = 100
    dtype: str = "float32"
    deterministic: bool = False
    desk_scale: bool = False
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.iterations <= 0 or self.rays_per_batch <= 0:
            raise ValueError("iterations and rays_per_batch must be positive")
        # learning_rate 0 is allowed so a step can be run as a exact no-op
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.plane_loss_reduction not in ("sum", "mean"):
            raise ValueError("plane_loss_reduction must be 'sum' or 'mean'")

    @staticmethod
    def desk(**overrides) -> "TrainConfig":
        """Preset sized for a couple of CPU cores: small networks, 32+32
        samples, 10k iterations, per-ray mean for the planar terms."""
        base = dict(iterations=10000, rays_per_batch=192, n_coarse=32, n_fine=32,
                    plane_loss_reduction="mean", desk_scale=True,
                    arch=ArchConfig.desk())
        base.update(overrides)
        return TrainConfig(**base)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def render_config(self) -> RenderConfig:
        needs_sem = "sem" in ABLATIONS[self.ablation] or "joint" in ABLATIONS[self.ablation]
        return RenderConfig(n_coarse=self.n_coarse, n_fine=self.n_fine,
                            with_semantics=needs_sem)

    def needs_depth(self) -> bool:
        return "depth" in ABLATIONS[self.ablation]

    def needs_semantics(self) -> bool:
        terms = ABLATIONS[self.ablation]
        return "sem" in terms or "joint" in terms or "geo" in terms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = self.loss_weights.to_dict()
        d["arch"] = self.arch.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sample_train_batch(dataset: SceneDataset, generator: torch.Generator,
                       batch_size: int, dtype=torch.float32,
                       need_depth: bool = True, need_semantics: bool = True,
                       near_min: float = 0.05) -> RayBatch:
    """Uniform (view, pixel) sampling with ground truth attached.

    gt depth is converted from z-depth meters to normalized ray distance;
    rays from views without a semantic map are marked unlabeled."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n_views = len(dataset)
    view_ids = torch.randint(n_views, (batch_size,), generator=generator).numpy()
    scale = dataset.norm_transform.scale

    origins = np.empty((batch_size, 3))
    dirs = np.empty((batch_size, 3))
    colors = np.empty((batch_size, 3))
    depths = np.full(batch_size, np.nan)
    classes = np.full(batch_size, UNLABELED, dtype=np.int8)
    refs = np.empty((batch_size, 3))

    for vid in np.unique(view_ids):
        sel = np.flatnonzero(view_ids == vid)
        view = dataset.views[vid]
        h, w = view.camera.height, view.camera.width
        flat = torch.randint(h * w, (len(sel),), generator=generator).numpy()
        py, px = np.divmod(flat, w)
        uv = np.stack([px + 0.5, py + 0.5], axis=-1)
        o, d = view.camera.rays(uv)
        origins[sel] = o
        dirs[sel] = d
        colors[sel] = view.color[py, px]
        refs[sel] = np.stack([np.full(len(sel), vid), uv[:, 0], uv[:, 1]], axis=-1)
        if need_depth and view.depth is not None:
            z = view.depth[py, px]
            ray_scale = view.camera.pixel_ray_scale(uv)
            depths[sel] = np.where(z > 0, z * scale * ray_scale, np.nan)
        if need_semantics and view.semantics is not None:
            classes[sel] = file_labels_to_class(view.semantics[py, px])

    o_t = torch.as_tensor(origins, dtype=dtype)
    d_t = torch.as_tensor(dirs, dtype=dtype)
    d_t = d_t / d_t.norm(dim=-1, keepdim=True)
    near, far = ray_sphere_bounds(o_t, d_t, near_min=near_min)
    return RayBatch(origins=o_t, directions=d_t, near=near, far=far,
                    pixel_refs=refs,
                    class_mask=torch.as_tensor(classes),
                    gt_color=torch.as_tensor(colors, dtype=dtype),
                    gt_depth=torch.as_tensor(depths, dtype=dtype))


def train_step(params: FieldParams, batch: RayBatch, config: TrainConfig,
               optimizer: torch.optim.Optimizer,
               generator: Optional[torch.Generator] = None):
    """One render + loss + Adam update. Returns the LossReport.

    Raises TrainingDiverged (with the term breakdown) on a non-finite loss
    instead of silently skipping the step."""
    terms_active = ABLATIONS[config.ablation]
    out = render_batch(params, batch, config.render_config(), generator)

    report = LossReport(n_rays=len(batch))
    terms = {}

    terms["img"] = photometric_loss(out.color, batch.gt_color)
    report.l_img = float(terms["img"].detach())

    surf = out.surface_x[out.hit_mask] if out.hit_mask.any() else None
    terms["eik"] = eikonal_loss(params, surf, config.eikonal_uniform, generator)
    report.l_eik = float(terms["eik"].detach())

    if "depth" in terms_active and batch.gt_depth is not None:
        valid = torch.isfinite(batch.gt_depth)
        report.n_depth = int(valid.sum())
        terms["depth"] = depth_loss(out.depth, torch.nan_to_num(batch.gt_depth), valid)
        report.l_depth = float(terms["depth"].detach())

    want_planes = "geo" in terms_active or "joint" in terms_active
    if want_planes:
        is_floor = batch.class_mask == FLOOR
        is_wall = batch.class_mask == WALL
        f_vals, f_ok = floor_normal_loss(out.surface_n[is_floor])
        w_vals, w_ok = wall_normal_loss(out.surface_n[is_wall], params.wall_normal())
        f_vals, w_vals = f_vals[f_ok], w_vals[w_ok]
        report.n_floor = int(f_ok.sum())
        report.n_wall = int(w_ok.sum())
        report.l_floor = float(f_vals.detach().sum())
        report.l_wall = float(w_vals.detach().sum())
        if "geo" in terms_active:
            terms["geo"] = geo_loss(f_vals, w_vals, config.plane_loss_reduction)
            report.l_geo = float(terms["geo"].detach())
        if "joint" in terms_active:
            p_f = out.sem_probs[is_floor, FLOOR][f_ok]
            p_w = out.sem_probs[is_wall, WALL][w_ok]
            terms["joint"] = joint_loss(f_vals, w_vals, p_f, p_w,
                                        config.plane_loss_reduction)
            report.l_joint = float(terms["joint"].detach())

    if "sem" in terms_active and out.sem_probs is not None:
        labeled = batch.class_mask != UNLABELED
        if labeled.any():
            terms["sem"] = semantic_ce_loss(out.sem_probs[labeled],
                                            batch.class_mask[labeled].long())
            report.l_sem = float(terms["sem"].detach())

    total = total_loss(terms, config.loss_weights, config.ablation)
    report.total = float(total.detach())
    if not math.isfinite(report.total):
        raise TrainingDiverged(
            f"non-finite loss at a training step: {report.to_dict()}", report)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return report


@dataclass
class TrainResult:
    params: FieldParams
    checkpoint_path: Optional[Path]
    log_path: Optional[Path]
    final_report: LossReport
    running_averages: dict


def train(dataset: SceneDataset, config: TrainConfig,
          workdir=None) -> TrainResult:
    """Run the full optimization; writes periodic checkpoints and a JSONL
    loss log (one record per log interval) when workdir is given."""
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    if config.needs_depth() and not dataset.has_depth:
        log.warning("ablation %s uses depth but the dataset has none", config.ablation)
    if config.needs_semantics() and not dataset.has_semantics:
        raise ValueError(f"ablation {config.ablation!r} requires semantic maps")

    dtype = config.torch_dtype
    params = init_geometric(config.seed, config.arch, dtype=dtype)
    optimizer = torch.optim.Adam(params.parameters(), lr=config.learning_rate,
                                 betas=tuple(config.adam_betas))
    batch_gen = torch.Generator().manual_seed(config.seed ^ 0xB47C4)
    render_gen = torch.Generator().manual_seed(config.seed ^ 0x5A3D1)

    workdir = Path(workdir) if workdir is not None else None
    log_fh = None
    ckpt_path = log_path = None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "train_config.json").write_text(
            json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        ckpt_path = workdir / "checkpoint.pt"
        log_path = workdir / "loss_log.jsonl"
        log_fh = open(log_path, "w")

    running: dict = {}
    report = LossReport()
    t0 = time.time()
    try:
        for it in range(1, config.iterations + 1):
            batch = sample_train_batch(dataset, batch_gen, config.rays_per_batch,
                                       dtype=dtype,
                                       need_depth=config.needs_depth(),
                                       need_semantics=config.needs_semantics())
            report = train_step(params, batch, config, optimizer, render_gen)
            for k, v in report.to_dict().items():
                if isinstance(v, float):
                    running[k] = 0.98 * running.get(k, v) + 0.02 * v

            if it % config.log_interval == 0 or it == config.iterations:
                nw = params.wall_normal().detach().tolist()
                record = {"iteration": it, **report.to_dict(),
                          "beta": float(params.beta.detach()),
                          "wall_normal": nw}
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if it % (config.log_interval * 10) == 0 or it == config.iterations:
                    log.info("iter %d/%d total=%.4f img=%.4f eik=%.4f depth=%.4f beta=%.4f (%.1f s)",
                             it, config.iterations, report.total, report.l_img,
                             report.l_eik, report.l_depth,
                             float(params.beta.detach()), time.time() - t0)
            if ckpt_path is not None and (it % config.checkpoint_interval == 0
                                          or it == config.iterations):
                save_checkpoint(params, ckpt_path, iteration=it,
                                config_hash=config.config_hash(),
                                norm_transform=dataset.norm_transform,
                                loss_averages=running)
    finally:
        if log_fh is not None:
            log_fh.close()

    return TrainResult(params=params, checkpoint_path=ckpt_path,
                       log_path=log_path, final_report=report,
                       running_averages=running)
