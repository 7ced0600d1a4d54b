"""Learnable scene representation: SDF, color and semantic networks plus the
density sharpness and the learnable horizontal wall direction."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

BETA_MIN = 1e-4


@dataclass(frozen=True)
class ArchConfig:
    """Network sizes. The default is the full-scale configuration; use
    ArchConfig.desk() for quick desk-scale runs."""

    sdf_hidden: int = 256
    sdf_layers: int = 8
    skip: tuple = (4,)
    z_dim: int = 256
    color_hidden: int = 256
    color_layers: int = 4
    sem_hidden: int = 256
    sem_layers: int = 4
    pe_octaves_x: int = 6
    pe_octaves_v: int = 4
    softplus_beta: float = 30.0
    sphere_radius: float = 0.6
    init_refine_steps: int = 300
    init_refine_batch: int = 1024
    init_refine_lr: float = 2e-3

    @staticmethod
    def desk() -> "ArchConfig":
        return ArchConfig(sdf_hidden=64, sdf_layers=4, skip=(2,), z_dim=64,
                          color_hidden=64, color_layers=4, sem_hidden=64, sem_layers=4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip"] = list(self.skip)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        d = dict(d)
        d["skip"] = tuple(d.get("skip", (4,)))
        return ArchConfig(**d)


def positional_encoding(x: torch.Tensor, octaves: int) -> torch.Tensor:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < octaves."""
    if octaves == 0:
        return x
    freqs = (2.0 ** torch.arange(octaves, dtype=x.dtype, device=x.device)) * math.pi
    ang = x.unsqueeze(-2) * freqs.unsqueeze(-1)              # (..., octaves, D)
    enc = torch.cat([ang.sin(), ang.cos()], dim=-1)           # (..., octaves, 2D)
    return torch.cat([x, enc.flatten(-2)], dim=-1)


def _seeded_linear(d_in: int, d_out: int, gen: torch.Generator, dtype) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, dtype=dtype)
    bound = 1.0 / math.sqrt(d_in)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.uniform_(-bound, bound, generator=gen)
    return lin


class SDFNet(nn.Module):
    """MLP mapping a point to (signed distance, geometry feature).

    Softplus activations keep the field twice differentiable, which the
    training losses need because the spatial gradient is itself differentiated.
    """

    def __init__(self, arch: ArchConfig, gen: torch.Generator, dtype=torch.float32,
                 geometric: bool = True):
        super().__init__()
        self.octaves = arch.pe_octaves_x
        self.skip = set(arch.skip)
        d_in = 3 + 6 * arch.pe_octaves_x
        if arch.skip and arch.sdf_hidden <= d_in:
            raise ValueError(f"skip connections need sdf_hidden > encoded input "
                             f"size ({d_in})")
        dims = [d_in] + [arch.sdf_hidden] * arch.sdf_layers + [1 + arch.z_dim]
        self.lins = nn.ModuleList()
        r0 = arch.sphere_radius
        for l in range(len(dims) - 1):
            out_dim = dims[l + 1] - d_in if (l + 1) in self.skip else dims[l + 1]
            lin = nn.Linear(dims[l], out_dim, dtype=dtype)
            with torch.no_grad():
                if geometric:
                    # sphere-like start: last layer biased toward ||x|| - r0,
                    # encoded channels silenced where raw x enters
                    if l == len(dims) - 2:
                        lin.weight.normal_(math.sqrt(math.pi) / math.sqrt(dims[l]), 1e-4, generator=gen)
                        lin.bias.fill_(-r0)
                    else:
                        lin.weight.normal_(0.0, math.sqrt(2) / math.sqrt(out_dim), generator=gen)
                        lin.bias.zero_()
                        if l == 0:
                            lin.weight[:, 3:].zero_()
                        elif l in self.skip:
                            lin.weight[:, -(d_in - 3):].zero_()
                else:
                    bound = 1.0 / math.sqrt(dims[l])
                    lin.weight.uniform_(-bound, bound, generator=gen)
                    lin.bias.uniform_(-bound, bound, generator=gen)
            self.lins.append(lin)
        self.act = nn.Softplus(beta=arch.softplus_beta)

    def forward(self, x: torch.Tensor):
        inp = positional_encoding(x, self.octaves)
        h = inp
        for l, lin in enumerate(self.lins):
            if l in self.skip:
                h = torch.cat([h, inp], dim=-1) / math.sqrt(2)
            h = lin(h)
            if l < len(self.lins) - 1:
                h = self.act(h)
        return h[..., 0], h[..., 1:]


class _MLP(nn.Module):
    def __init__(self, d_in, hidden, n_layers, d_out, gen, dtype):
        super().__init__()
        dims = [d_in] + [hidden] * (n_layers - 1) + [d_out]
        self.lins = nn.ModuleList(_seeded_linear(dims[i], dims[i + 1], gen, dtype)
                                  for i in range(len(dims) - 1))

    def forward(self, h):
        for i, lin in enumerate(self.lins):
            h = lin(h)
            if i < len(self.lins) - 1:
                h = torch.relu(h)
        return h


class FieldParams(nn.Module):
    """All learnable state: the three networks, the density sharpness and
    the free components of the wall direction (z fixed to 0)."""

    def __init__(self, arch: ArchConfig | None = None, seed: int = 0,
                 dtype=torch.float32, beta_init: float = 0.1,
                 geometric_init: bool = True):
        super().__init__()
        self.arch = arch or ArchConfig()
        self.dtype_ = dtype
        gen = torch.Generator().manual_seed(seed)
        a = self.arch
        self.sdf_net = SDFNet(a, gen, dtype, geometric=geometric_init)
        color_in = (3 + 6 * a.pe_octaves_x) + (3 + 6 * a.pe_octaves_v) + 3 + a.z_dim
        self.color_net = _MLP(color_in, a.color_hidden, a.color_layers, 3, gen, dtype)
        self.sem_net = _MLP(3 + 6 * a.pe_octaves_x, a.sem_hidden, a.sem_layers, 3, gen, dtype)
        self.raw_beta = nn.Parameter(torch.tensor(_softplus_inv(beta_init), dtype=dtype))
        self.wall_normal_xy = nn.Parameter(torch.tensor([1.0, 0.0], dtype=dtype))

    @property
    def beta(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.raw_beta).clamp(min=BETA_MIN)

    def wall_normal(self) -> torch.Tensor:
        """Unit wall direction with third component exactly zero."""
        wxy = self.wall_normal_xy
        nrm = wxy.norm()
        if nrm.item() == 0.0:
            raise ValueError("wall_normal_xy is zero; direction undefined")
        unit = wxy / nrm
        return torch.cat([unit, unit.new_zeros(1)])

    # --- field adapter protocol used by the renderer ---

    def sdf(self, x: torch.Tensor):
        return self.sdf_net(x)

    def sdf_with_grad(self, x: torch.Tensor):
        """(d, z, grad) with the gradient taken by autodiff; the graph is
        kept whenever grad mode is on so losses can differentiate through it."""
        with torch.enable_grad():
            xg = x if x.requires_grad else x.detach().requires_grad_(True)
            d, z = self.sdf_net(xg)
            g = torch.autograd.grad(d.sum(), xg, create_graph=torch.is_grad_enabled())[0]
        return d, z, g

    def color(self, x, v, n, z):
        a = self.arch
        h = torch.cat([positional_encoding(x, a.pe_octaves_x),
                       positional_encoding(v, a.pe_octaves_v), n, z], dim=-1)
        return torch.sigmoid(self.color_net(h))

    def semantics(self, x):
        return self.sem_net(positional_encoding(x, self.arch.pe_octaves_x))


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


def _ball_points(n: int, gen: torch.Generator, dtype, radius: float = 1.0) -> torch.Tensor:
    x = torch.randn(n, 3, generator=gen, dtype=dtype)
    x = x / x.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    r = torch.rand(n, 1, generator=gen, dtype=dtype) ** (1.0 / 3.0)
    return x * r * radius


def _refine_to_sphere(net: SDFNet, r0: float, steps: int, batch: int, lr: float,
                      seed: int) -> None:
    """Short seeded fit of the freshly initialized net to the analytic sphere
    SDF. The analytic start is only approximate; this tightens it to a few
    millimeters so optimization starts from a clean closed surface."""
    if steps <= 0:
        return
    gen = torch.Generator().manual_seed(seed)
    dtype = next(net.parameters()).dtype
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(steps):
        # radius-uniform sampling concentrates points near the center, where
        # the cone tip of the target would otherwise stay oversmoothed
        x = torch.randn(batch, 3, generator=gen, dtype=dtype)
        x = x / x.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        x = x * torch.rand(batch, 1, generator=gen, dtype=dtype) * 1.25
        xg = x.requires_grad_(True)
        d, _ = net(xg)
        g = torch.autograd.grad(d.sum(), xg, create_graph=True)[0]
        r = x.detach().norm(dim=-1)
        target_g = x.detach() / r.clamp(min=1e-9).unsqueeze(-1)
        loss = ((d - (r - r0)) ** 2).mean() + 0.1 * ((g - target_g) ** 2).sum(-1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()


def init_geometric(seed: int = 0, arch: ArchConfig | None = None,
                   dtype=torch.float32, beta_init: float = 0.1) -> FieldParams:
    """Fresh parameters with the SDF approximating ||x|| - sphere_radius,
    beta at beta_init and the wall direction at <1,0,0>. Deterministic in seed."""
    params = FieldParams(arch, seed=seed, dtype=dtype, beta_init=beta_init)
    a = params.arch
    _refine_to_sphere(params.sdf_net, a.sphere_radius, a.init_refine_steps,
                      a.init_refine_batch, a.init_refine_lr, seed=seed ^ 0x5EED)
    return params


# ---------------------------------------------------------------------------
# Functional evaluation surface
# ---------------------------------------------------------------------------

def _as_points(params: FieldParams, x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=params.dtype_)
    if t.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    if not torch.isfinite(t).all():
        raise ValueError("non-finite input point")
    return t


def eval_sdf(params: FieldParams, x):
    """Signed distance and geometry feature at x (any leading batch shape)."""
    return params.sdf(_as_points(params, x))


def eval_sdf_grad(params: FieldParams, x) -> torch.Tensor:
    """Spatial gradient of the signed distance (exact autodiff derivative)."""
    _, _, g = params.sdf_with_grad(_as_points(params, x))
    return g


def eval_color(params: FieldParams, x, v, n, z) -> torch.Tensor:
    x = _as_points(params, x)
    v = torch.as_tensor(v, dtype=params.dtype_)
    if ((v.norm(dim=-1) - 1).abs() > 1e-3).any():
        raise ValueError("view directions must be unit vectors")
    return params.color(x, v, torch.as_tensor(n, dtype=params.dtype_),
                        torch.as_tensor(z, dtype=params.dtype_))


def eval_semantics(params: FieldParams, x) -> torch.Tensor:
    return params.semantics(_as_points(params, x))


def wall_normal(params: FieldParams) -> torch.Tensor:
    return params.wall_normal()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(params: FieldParams, path, iteration: int = 0,
                    config_hash: str = "", norm_transform=None,
                    loss_averages: dict | None = None) -> None:
    """Atomic, self-describing checkpoint (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": params.arch.to_dict(),
        "dtype": str(params.dtype_).replace("torch.", ""),
        "state_dict": params.state_dict(),
        "iteration": int(iteration),
        "config_hash": config_hash,
        "norm_transform": norm_transform.to_dict() if norm_transform is not None else None,
        "loss_averages": dict(loss_averages or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (FieldParams, metadata dict)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    dtype = getattr(torch, payload["dtype"])
    arch = ArchConfig.from_dict(payload["arch"])
    params = FieldParams(arch, seed=0, dtype=dtype)
    params.load_state_dict(payload["state_dict"])
    meta = {k: payload[k] for k in ("iteration", "config_hash", "norm_transform", "loss_averages")}
    if meta["norm_transform"] is not None:
        from .scenes import NormTransform
        meta["norm_transform"] = NormTransform.from_dict(meta["norm_transform"])
    return params, meta
