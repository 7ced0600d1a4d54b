import math

import numpy as np
import pytest
import torch

from roomsdf.fields import ArchConfig, init_geometric
from roomsdf.scenes import SyntheticRoomSpec, generate_synthetic_room
from roomsdf.trainer import TrainConfig, train


def tiny_arch(**overrides):
    base = dict(sdf_hidden=48, sdf_layers=3, skip=(2,), z_dim=16,
                color_hidden=32, color_layers=3, sem_hidden=32, sem_layers=3,
                init_refine_steps=120, init_refine_batch=256)
    base.update(overrides)
    return ArchConfig(**base)


@pytest.fixture(scope="session")
def tiny_room():
    """Small clean synthetic room shared across tests."""
    spec = SyntheticRoomSpec(n_views=8, image_size=24, texture_seed=11,
                             depth_sparsity=0.5, label_noise_rate=0.0,
                             gt_mesh_resolution=64)
    return generate_synthetic_room(spec)


@pytest.fixture(scope="session")
def noisy_room():
    spec = SyntheticRoomSpec(n_views=6, image_size=24, texture_seed=12,
                             depth_sparsity=0.5, label_noise_rate=0.2,
                             wall_yaw=math.radians(15.0), gt_mesh_resolution=64)
    return generate_synthetic_room(spec)


@pytest.fixture(scope="session")
def trained_tiny(tiny_room):
    """A briefly trained field on the tiny room; enough optimization for the
    qualitative "trained checkpoint" examples (view dependence, semantics)."""
    cfg = TrainConfig.desk(iterations=500, rays_per_batch=160, seed=3,
                           arch=tiny_arch(sphere_radius=0.45),
                           n_coarse=24, n_fine=24, eikonal_uniform=256,
                           checkpoint_interval=10**9, log_interval=10**9)
    result = train(tiny_room, cfg, workdir=None)
    return result.params, tiny_room


@pytest.fixture(scope="session")
def desk_params():
    return init_geometric(0, ArchConfig.desk(), dtype=torch.float64)


def ball_points(n, seed, radius=1.0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, generator=g, dtype=dtype)
    x = x / x.norm(dim=-1, keepdim=True)
    r = torch.rand(n, 1, generator=g, dtype=dtype) ** (1.0 / 3.0)
    return x * r * radius


def room_floor_point(dataset, clearance=0.05):
    """A point slightly above the floor, away from the slab (normalized frame)."""
    spec = SyntheticRoomSpec(**{**dataset.meta["room_spec"],
                                "extents": tuple(dataset.meta["room_spec"]["extents"])})
    ez = spec.extents[2]
    raw = np.array([[-0.4 * spec.extents[0], 0.0, -ez + clearance]])
    yaw = spec.wall_yaw
    rot = np.array([[math.cos(yaw), -math.sin(yaw), 0],
                    [math.sin(yaw), math.cos(yaw), 0], [0, 0, 1.0]])
    return dataset.norm_transform.apply_points(raw @ rot.T)
