"""Differentiable volume rendering of an implicit field along camera rays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import UNLABELED


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    near_min: float = 0.05
    sphere_radius: float = 1.0
    stratified: bool = True
    with_semantics: bool = True

    @staticmethod
    def desk() -> "RenderConfig":
        return RenderConfig(n_coarse=32, n_fine=32)


@dataclass
class RayBatch:
    """A batch of rays in the normalized frame with optional ground truth.

    class_mask holds semantic classes in logit order (0 floor, 1 wall,
    2 other) or -1 for unlabeled rays; gt_depth is distance along the unit
    ray direction in normalized units (nan = no depth)."""

    origins: torch.Tensor      # (B, 3)
    directions: torch.Tensor   # (B, 3) unit
    near: torch.Tensor         # (B,)
    far: torch.Tensor          # (B,)
    pixel_refs: np.ndarray | None = None   # (B, 3) view id, u, v
    class_mask: torch.Tensor | None = None  # (B,) int8
    gt_color: torch.Tensor | None = None    # (B, 3)
    gt_depth: torch.Tensor | None = None    # (B,)

    def __post_init__(self):
        if ((self.directions.norm(dim=-1) - 1).abs() > 1e-6).any():
            raise ValueError("ray directions must be unit vectors")
        if (self.near >= self.far).any():
            raise ValueError("need near < far for every ray")
        if self.class_mask is None:
            self.class_mask = torch.full((len(self.origins),), UNLABELED, dtype=torch.int8)

    def __len__(self):
        return len(self.origins)


@dataclass
class CompositeWeights:
    """Quadrature state along each ray: sample depths, spacings, densities,
    transmittance and per-sample weights."""

    t: torch.Tensor       # (B, N)
    delta: torch.Tensor   # (B, N); last entry closes the interval at `far`
    sigma: torch.Tensor   # (B, N)
    T: torch.Tensor       # (B, N), T[:, 0] == 1
    w: torch.Tensor       # (B, N)
    T_end: torch.Tensor   # (B,) transmittance past the final sample


@dataclass
class RenderOutput:
    color: torch.Tensor        # (B, 3)
    depth: torch.Tensor        # (B,)
    sem_logits: torch.Tensor | None
    sem_probs: torch.Tensor | None
    surface_x: torch.Tensor    # (B, 3)
    surface_n: torch.Tensor    # (B, 3)
    hit_mask: torch.Tensor     # (B,) bool
    weights: CompositeWeights = field(repr=False, default=None)
    surface_t: torch.Tensor | None = None


def density_from_sdf(d: torch.Tensor, beta) -> torch.Tensor:
    """Laplace-CDF style transform: nonnegative, continuous, non-increasing
    in the signed distance; sigma(0) = 1/(2 beta), sigma(-inf) = 1/beta."""
    if not torch.is_tensor(beta):
        beta = torch.as_tensor(beta, dtype=d.dtype if torch.is_tensor(d) else torch.float64)
    if (beta <= 0).any():
        raise ValueError("beta must be positive")
    d = torch.as_tensor(d, dtype=beta.dtype) if not torch.is_tensor(d) else d
    # exp(-|d|/beta) appears in both branches; evaluating it once keeps the
    # unselected branch finite so no NaN leaks into backward.
    e = torch.exp(-d.abs() / beta)
    return torch.where(d < 0, (1.0 - 0.5 * e) / beta, 0.5 * e / beta)


def ray_sphere_bounds(origins: torch.Tensor, directions: torch.Tensor,
                      near_min: float = 0.05, radius: float = 1.0):
    """near/far from the exit of the bounding sphere (scenes are indoor and
    bounded, so the far plane is the sphere shell)."""
    b = (origins * directions).sum(-1)
    c = (origins * origins).sum(-1) - radius ** 2
    disc = (b * b - c).clamp(min=0.0)
    t_exit = -b + disc.sqrt()
    near = torch.full_like(t_exit, near_min)
    far = t_exit.clamp(min=near_min + 1e-3)
    return near, far


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, n: int,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Inverse-CDF sampling of n points per ray from a piecewise-constant
    pdf over `bins`. Zero weights degrade to uniform sampling."""
    weights = weights + 1e-5
    pdf = weights / weights.sum(-1, keepdim=True)
    cdf = torch.cumsum(pdf, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    u = torch.rand(list(cdf.shape[:-1]) + [n], dtype=cdf.dtype, generator=generator)
    idx = torch.searchsorted(cdf, u.contiguous(), right=True)
    below = (idx - 1).clamp(min=0)
    above = idx.clamp(max=cdf.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, below)
    cdf_hi = torch.gather(cdf, -1, above)
    bins_lo = torch.gather(bins, -1, below.clamp(max=bins.shape[-1] - 1))
    bins_hi = torch.gather(bins, -1, above.clamp(max=bins.shape[-1] - 1))
    denom = (cdf_hi - cdf_lo).clamp(min=1e-12)
    frac = (u - cdf_lo) / denom
    return bins_lo + frac * (bins_hi - bins_lo)


def _stratified(near, far, n, generator, dtype, stratified=True):
    B = near.shape[0]
    if stratified:
        u = (torch.arange(n, dtype=dtype) + torch.rand(B, n, dtype=dtype, generator=generator)) / n
    else:
        u = ((torch.arange(n, dtype=dtype) + 0.5) / n).expand(B, n)
    return near[:, None] + (far - near)[:, None] * u


def compute_weights(t: torch.Tensor, sigma: torch.Tensor, far: torch.Tensor) -> CompositeWeights:
    """Transmittance and quadrature weights from sample depths and densities.

    delta_i is the gap to the next sample; the final gap runs to `far` so the
    quadrature covers the whole [near, far] interval."""
    delta = torch.cat([t[:, 1:] - t[:, :-1], (far[:, None] - t[:, -1:]).clamp(min=0.0)], dim=-1)
    tau = sigma * delta
    cum = torch.cumsum(tau, dim=-1)
    T = torch.exp(-torch.cat([torch.zeros_like(cum[:, :1]), cum[:, :-1]], dim=-1))
    alpha = 1.0 - torch.exp(-tau)
    w = T * alpha
    T_end = torch.exp(-cum[:, -1])
    return CompositeWeights(t=t, delta=delta, sigma=sigma, T=T, w=w, T_end=T_end)


def composite(values: torch.Tensor, weights: CompositeWeights) -> torch.Tensor:
    """Quadrature sum_i w_i * values_i; used identically for color, semantic
    logits and depth (values = t)."""
    w = weights.w
    squeeze = values.dim() == 2
    if squeeze:
        values = values.unsqueeze(-1)
    if values.shape[:2] != w.shape:
        raise ValueError(f"values shape {tuple(values.shape)} does not match weights {tuple(w.shape)}")
    out = (w.unsqueeze(-1) * values).sum(dim=1)
    return out.squeeze(-1) if squeeze else out


def locate_surface(t: torch.Tensor, d_values: torch.Tensor,
                   expected_t: torch.Tensor | None = None):
    """First zero crossing of the SDF along each ray, linearly interpolated.

    Rays without a crossing fall back to the expected termination depth and
    are flagged as misses. Returns (t_surface, hit)."""
    d_lo, d_hi = d_values[:, :-1], d_values[:, 1:]
    cross = (d_lo > 0) & (d_hi <= 0)
    hit = cross.any(dim=1)
    n_seg = cross.shape[1]
    rank = torch.arange(n_seg, 0, -1, device=cross.device)
    idx = (cross.long() * rank).argmax(dim=1)
    i = idx.unsqueeze(-1)
    d0 = torch.gather(d_values, 1, i)[:, 0]
    d1 = torch.gather(d_values, 1, i + 1)[:, 0]
    t0 = torch.gather(t, 1, i)[:, 0]
    t1 = torch.gather(t, 1, i + 1)[:, 0]
    alpha = d0 / (d0 - d1).clamp(min=1e-12)
    t_surf = t0 + alpha * (t1 - t0)
    if expected_t is None:
        expected_t = t.mean(dim=1)
    return torch.where(hit, t_surf, expected_t), hit


def sample_ray(rays: RayBatch, fieldp, n_coarse: int, n_fine: int,
               generator: Optional[torch.Generator] = None,
               stratified: bool = True) -> torch.Tensor:
    """Hierarchical sampling: stratified-uniform coarse pass, then importance
    samples proportional to the coarse quadrature weights."""
    if n_coarse < 2:
        raise ValueError("need n_coarse >= 2")
    dtype = rays.origins.dtype
    t = _stratified(rays.near, rays.far, n_coarse, generator, dtype, stratified)
    if n_fine > 0:
        with torch.no_grad():
            x = rays.origins[:, None] + t[..., None] * rays.directions[:, None]
            d, _ = fieldp.sdf(x.reshape(-1, 3))
            sigma = density_from_sdf(d.reshape(t.shape), fieldp.beta)
            cw = compute_weights(t, sigma, rays.far)
            if n_coarse >= 3:
                mids = 0.5 * (t[:, 1:] + t[:, :-1])
                t_fine = sample_pdf(mids, cw.w[:, 1:-1], n_fine, generator)
            else:
                t_fine = _stratified(rays.near, rays.far, n_fine, generator, dtype)
        t = torch.sort(torch.cat([t, t_fine], dim=-1), dim=-1).values
    # break exact ties so t is strictly increasing
    n = t.shape[-1]
    bump = torch.arange(n, dtype=dtype) * 1e-9
    return t + bump * (rays.far - rays.near)[:, None]


def render_batch(fieldp, rays: RayBatch, config: RenderConfig = RenderConfig(),
                 generator: Optional[torch.Generator] = None) -> RenderOutput:
    """Full differentiable pipeline: sample, evaluate the field, convert SDF
    to density, composite color/depth/semantics, and localize the surface."""
    B = len(rays)
    t = sample_ray(rays, fieldp, config.n_coarse, config.n_fine, generator,
                   stratified=config.stratified)
    N = t.shape[-1]
    x = (rays.origins[:, None] + t[..., None] * rays.directions[:, None]).reshape(-1, 3)
    d, z, g = fieldp.sdf_with_grad(x)
    v = rays.directions[:, None].expand(B, N, 3).reshape(-1, 3)
    color_samples = fieldp.color(x, v, g, z).reshape(B, N, 3)

    sigma = density_from_sdf(d, fieldp.beta).reshape(B, N)
    cw = compute_weights(t, sigma, rays.far)
    color = composite(color_samples, cw)
    depth = composite(t, cw)

    sem_logits = sem_probs = None
    if config.with_semantics:
        sem_logits = composite(fieldp.semantics(x).reshape(B, N, 3), cw)
        sem_probs = torch.softmax(sem_logits, dim=-1)

    with torch.no_grad():
        t_surf, hit = locate_surface(t.detach(), d.detach().reshape(B, N), depth.detach())
    # surface gradients keep the graph into the field parameters, but the
    # root location itself is held fixed (stop-gradient on x_r)
    x_surf = (rays.origins + t_surf[:, None] * rays.directions).detach()
    _, _, n_surf = fieldp.sdf_with_grad(x_surf)

    return RenderOutput(color=color, depth=depth, sem_logits=sem_logits,
                        sem_probs=sem_probs, surface_x=x_surf, surface_n=n_surf,
                        hit_mask=hit, weights=cw, surface_t=t_surf)


class AnalyticField:
    """Field adapter around an analytic SDF callback (normalized frame).

    Used to drive the renderer with exact geometry: ground-truth depth
    rendering, sampler tests, and extraction from analytic shapes. Gradients
    come from central differences since there is nothing to train."""

    def __init__(self, sdf_fn, beta: float = 0.005, color_fn=None, label_fn=None,
                 dtype=torch.float64):
        self._sdf = sdf_fn
        self._color = color_fn
        self._label = label_fn
        self.dtype_ = dtype
        self.beta = torch.tensor(beta, dtype=dtype)
        self.arch = None

    def sdf(self, x: torch.Tensor):
        d = torch.as_tensor(self._sdf(x.detach().cpu().numpy()), dtype=x.dtype)
        return d, x.new_zeros(x.shape[:-1] + (0,))

    def sdf_with_grad(self, x: torch.Tensor, h: float = 1e-5):
        xn = x.detach().cpu().numpy()
        d = torch.as_tensor(self._sdf(xn), dtype=x.dtype)
        g = np.zeros_like(xn)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (self._sdf(xn + e) - self._sdf(xn - e)) / (2 * h)
        z = x.new_zeros(x.shape[:-1] + (0,))
        return d, z, torch.as_tensor(g, dtype=x.dtype)

    def color(self, x, v, n, z):
        if self._color is None:
            return torch.full(x.shape[:-1] + (3,), 0.5, dtype=x.dtype)
        return torch.as_tensor(self._color(x.detach().cpu().numpy()), dtype=x.dtype)

    def semantics(self, x):
        if self._label is None:
            return torch.zeros(x.shape[:-1] + (3,), dtype=x.dtype)
        labels = np.asarray(self._label(x.detach().cpu().numpy()))
        logits = np.full((len(labels), 3), -5.0)
        logits[np.arange(len(labels)), labels] = 5.0
        return torch.as_tensor(logits, dtype=x.dtype)


def rays_for_view(camera, norm_dtype=torch.float64, near_min: float = 0.05,
                  sphere_radius: float = 1.0) -> RayBatch:
    """RayBatch covering every pixel of a (normalized-frame) camera."""
    h, w = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    uv = np.stack([ii.reshape(-1) + 0.5, jj.reshape(-1) + 0.5], axis=-1)
    origins, dirs = camera.rays(uv)
    o = torch.as_tensor(origins.copy(), dtype=norm_dtype)
    dd = torch.as_tensor(dirs, dtype=norm_dtype)
    dd = dd / dd.norm(dim=-1, keepdim=True)
    near, far = ray_sphere_bounds(o, dd, near_min, sphere_radius)
    refs = np.concatenate([np.zeros((len(uv), 1)), uv], axis=-1)
    return RayBatch(origins=o, directions=dd, near=near, far=far, pixel_refs=refs)


def render_view(fieldp, camera, config: RenderConfig = RenderConfig(),
                generator: Optional[torch.Generator] = None,
                chunk: int = 2048):
    """Render a full view (no gradients); returns numpy maps.

    depth is distance along the unit ray in normalized units; callers convert
    to z-depth meters via the camera ray scale and the normalization scale."""
    rays = rays_for_view(camera, norm_dtype=next_dtype(fieldp))
    parts = {"color": [], "depth": [], "sem_probs": [], "hit": []}
    with torch.no_grad():
        for lo in range(0, len(rays), chunk):
            sub = RayBatch(origins=rays.origins[lo:lo + chunk],
                           directions=rays.directions[lo:lo + chunk],
                           near=rays.near[lo:lo + chunk], far=rays.far[lo:lo + chunk])
            out = render_batch(fieldp, sub, config, generator)
            parts["color"].append(out.color.cpu().numpy())
            parts["depth"].append(out.depth.cpu().numpy())
            parts["hit"].append(out.hit_mask.cpu().numpy())
            if out.sem_probs is not None:
                parts["sem_probs"].append(out.sem_probs.cpu().numpy())
    h, w = camera.height, camera.width
    result = {
        "color": np.concatenate(parts["color"]).reshape(h, w, 3),
        "depth": np.concatenate(parts["depth"]).reshape(h, w),
        "hit": np.concatenate(parts["hit"]).reshape(h, w),
    }
    if parts["sem_probs"]:
        probs = np.concatenate(parts["sem_probs"]).reshape(h, w, 3)
        result["sem_probs"] = probs
        result["labels"] = probs.argmax(axis=-1)
    return result


def next_dtype(fieldp):
    return getattr(fieldp, "dtype_", torch.float32)
