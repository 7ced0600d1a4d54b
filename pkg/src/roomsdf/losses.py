"""Training objectives: photometric, Eikonal, depth, floor/wall planar
priors, the semantics-weighted joint loss, and semantic cross entropy."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import torch

FLOOR_UP = (0.0, 0.0, 1.0)

# Ablation ladder: which loss terms are active per configuration.
ABLATIONS = {
    "volsdf": ("img", "eik"),
    "volsdf_d": ("img", "eik", "depth"),
    "volsdf_d_g": ("img", "eik", "depth", "geo"),
    "volsdf_d_s": ("img", "eik", "depth", "sem"),
    "ours": ("img", "eik", "depth", "joint", "sem"),
}


@dataclass(frozen=True)
class LossWeights:
    lambda_img: float = 1.0
    lambda_eik: float = 0.1
    lambda_depth: float = 0.1
    lambda_joint: float = 0.05   # also weights the unweighted planar loss
    lambda_sem: float = 0.04

    def __post_init__(self):
        vals = asdict(self)
        if any(v < 0 for v in vals.values()):
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_joint > 0 and self.lambda_sem == 0:
            # without semantic supervision the joint loss has a trivial
            # solution where both rendered plane probabilities vanish
            raise ValueError("lambda_sem must be positive when lambda_joint is used")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    """Every loss term plus the weighted total and per-set ray counts."""

    l_img: float = 0.0
    l_eik: float = 0.0
    l_depth: float = 0.0
    l_floor: float = 0.0   # batch-summed
    l_wall: float = 0.0    # batch-summed
    l_geo: float = 0.0
    l_joint: float = 0.0
    l_sem: float = 0.0
    total: float = 0.0
    n_rays: int = 0
    n_depth: int = 0
    n_floor: int = 0
    n_wall: int = 0

    def to_dict(self):
        d = asdict(self)
        return {k: (float(v) if not isinstance(v, int) else v) for k, v in d.items()}


def photometric_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the L1 distance between rendered and input color."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().sum(dim=-1).mean()


def eikonal_loss(fieldp, surface_pts: Optional[torch.Tensor], n_uniform: int,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean squared deviation of the SDF gradient norm from 1, over located
    surface points plus seeded uniform samples in the unit ball."""
    pts = []
    if surface_pts is not None and len(surface_pts):
        pts.append(surface_pts.detach())
    if n_uniform > 0:
        dtype = surface_pts.dtype if surface_pts is not None else torch.float32
        u = torch.randn(n_uniform, 3, dtype=dtype, generator=generator)
        u = u / u.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        r = torch.rand(n_uniform, 1, dtype=dtype, generator=generator) ** (1.0 / 3.0)
        pts.append(u * r)
    if not pts:
        raise ValueError("eikonal loss needs at least one evaluation point")
    y = torch.cat(pts, dim=0)
    _, _, g = fieldp.sdf_with_grad(y)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def depth_loss(pred_depth: torch.Tensor, gt_depth: torch.Tensor,
               valid: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth error over valid rays; zero when none are valid."""
    if valid.sum() == 0:
        return pred_depth.sum() * 0.0
    return (pred_depth[valid] - gt_depth[valid]).abs().mean()


def _unit_rows(n: torch.Tensor):
    nrm = n.norm(dim=-1, keepdim=True)
    ok = nrm[:, 0] > 1e-12
    return n / nrm.clamp(min=1e-12), ok


def floor_normal_loss(n: torch.Tensor):
    """Per-ray |1 - n . z_up|; zero exactly when the normal points straight up.

    Returns (values, valid) where rays with zero-length normals are excluded."""
    n, ok = _unit_rows(n)
    vals = (1.0 - n[:, 2]).abs()
    return vals, ok


def wall_normal_loss(n: torch.Tensor, n_w: torch.Tensor):
    """Per-ray min over i in {-1, 0, 1} of |i - n . n_w| (parallel, orthogonal
    or anti-parallel to the learnable wall direction). Ties pick the smallest i."""
    n, ok = _unit_rows(n)
    dot = n @ n_w
    v_m1 = (-1.0 - dot).abs()
    v_0 = dot.abs()
    v_p1 = (1.0 - dot).abs()
    best = torch.where(v_m1 <= v_0, v_m1, v_0)
    best = torch.where(best <= v_p1, best, v_p1)
    return best, ok


def geo_loss(floor_vals: torch.Tensor, wall_vals: torch.Tensor,
             reduction: str = "sum") -> torch.Tensor:
    """Unweighted planar prior: floor and wall per-ray losses over their ray
    sets, summed by default (mean optionally, for batch-size invariance)."""
    return _reduce(floor_vals, reduction) + _reduce(wall_vals, reduction)


def joint_loss(floor_vals: torch.Tensor, wall_vals: torch.Tensor,
               p_f: torch.Tensor, p_w: torch.Tensor,
               reduction: str = "sum") -> torch.Tensor:
    """Planar prior weighted by rendered semantic probabilities. Gradients
    reach both the geometry (through the per-ray losses) and the semantics
    (through the probabilities), letting wrong labels down-weight themselves."""
    return _reduce(p_f * floor_vals, reduction) + _reduce(p_w * wall_vals, reduction)


def _reduce(vals: torch.Tensor, reduction: str) -> torch.Tensor:
    if vals.numel() == 0:
        return vals.sum()
    if reduction == "sum":
        return vals.sum()
    if reduction == "mean":
        return vals.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def semantic_ce_loss(sem_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy between rendered class probabilities and one-hot input
    labels (class indices in logit order), probabilities clamped at 1e-7."""
    p = sem_probs.clamp(min=1e-7, max=1.0)
    picked = torch.gather(p, 1, labels.long().view(-1, 1))[:, 0]
    return -(picked.log()).mean()


def total_loss(report: dict, weights: LossWeights, config: str) -> torch.Tensor:
    """Weighted sum of the terms active in the named ablation configuration.

    `report` maps term names (img, eik, depth, geo, joint, sem) to scalar
    tensors; inactive terms are ignored even if present."""
    if config not in ABLATIONS:
        raise ValueError(f"unknown ablation configuration {config!r}")
    lam = {"img": weights.lambda_img, "eik": weights.lambda_eik,
           "depth": weights.lambda_depth, "geo": weights.lambda_joint,
           "joint": weights.lambda_joint, "sem": weights.lambda_sem}
    total = None
    for term in ABLATIONS[config]:
        if term not in report:
            continue
        contrib = lam[term] * report[term]
        total = contrib if total is None else total + contrib
    if total is None:
        raise ValueError(f"no active loss terms for {config!r}")
    return total
