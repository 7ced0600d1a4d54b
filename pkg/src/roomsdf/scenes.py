"""Posed multi-view scenes: data model, directory ingestion, camera
normalization, and a procedural synthetic room generator with analytic
ground truth."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import FLOOR, WALL, OTHER
from . import fileio
from .meshio import TriangleMesh, read_ply, write_ply

log = logging.getLogger(__name__)

# Label ids used in semantic PNG files (ScanNet-style 3-class maps).
FILE_LABEL_OTHER = 0
FILE_LABEL_FLOOR = 1
FILE_LABEL_WALL = 2

# ScanNet nyu40 ids: 1 = wall, 2 = floor, everything else background.
SCANNET40_REMAP = {1: FILE_LABEL_WALL, 2: FILE_LABEL_FLOOR}

_FILE_TO_CLASS = np.full(256, OTHER, dtype=np.int64)
_FILE_TO_CLASS[FILE_LABEL_FLOOR] = FLOOR
_FILE_TO_CLASS[FILE_LABEL_WALL] = WALL
_CLASS_TO_FILE = np.array([FILE_LABEL_FLOOR, FILE_LABEL_WALL, FILE_LABEL_OTHER], dtype=np.uint8)


def file_labels_to_class(labels: np.ndarray) -> np.ndarray:
    """Map file label ids {0: other, 1: floor, 2: wall} to class indices
    in logit order (floor, wall, other)."""
    return _FILE_TO_CLASS[np.asarray(labels, dtype=np.int64)]


def class_to_file_labels(classes: np.ndarray) -> np.ndarray:
    return _CLASS_TO_FILE[np.asarray(classes, dtype=np.int64)]


class SceneFormatError(ValueError):
    """Raised when a scene directory violates the expected layout."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-from-camera pose.

    Convention: camera looks along +z, image u grows right, v grows down.
    Pixel (i, j) covers the unit square with center (i + 0.5, j + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray    # (3, 3) world-from-camera
    translation: np.ndarray  # (3,) camera center in world coordinates
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("camera rotation must have determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def pixel_dirs_cam(self, uv: np.ndarray) -> np.ndarray:
        """Unnormalized camera-frame directions through continuous pixel coords."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        return np.stack([(uv[:, 0] - self.cx) / self.fx,
                         (uv[:, 1] - self.cy) / self.fy,
                         np.ones(len(uv))], axis=-1)

    def rays(self, uv: np.ndarray):
        """World-frame rays through continuous pixel coords: (origins, unit dirs)."""
        d_cam = self.pixel_dirs_cam(uv)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        dirs = d_cam @ self.rotation.T
        origins = np.broadcast_to(self.translation, dirs.shape)
        return origins, dirs

    def project(self, points: np.ndarray):
        """World points -> (u, v, z_cam). Points behind the camera get z <= 0."""
        p = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.translation) @ self.rotation
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        return u, v, z

    def unproject(self, uv: np.ndarray, z_depth: np.ndarray) -> np.ndarray:
        """Continuous pixel coords + z-depth (distance along optical axis) -> world points."""
        d_cam = self.pixel_dirs_cam(uv)
        p_cam = d_cam * np.asarray(z_depth, dtype=np.float64).reshape(-1, 1)
        return p_cam @ self.rotation.T + self.translation

    def pixel_ray_scale(self, uv: np.ndarray) -> np.ndarray:
        """Factor converting z-depth to distance along the (unit) ray."""
        return np.linalg.norm(self.pixel_dirs_cam(uv), axis=-1)


def camera_ray(camera: Camera, pixel: Sequence[float]):
    """Ray through one continuous pixel coordinate: (origin, unit direction)."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u <= camera.width and 0 <= v <= camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside image bounds")
    origins, dirs = camera.rays(np.array([[u, v]]))
    return origins[0], dirs[0]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:  # looking straight up/down: pick an arbitrary horizontal right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nrm
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=-1)


@dataclass(frozen=True)
class NormTransform:
    """Similarity transform x' = scale * R x + translation into the
    unit-sphere frame. R is always identity here but kept for generality."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError("normalization scale must be positive and finite")

    @staticmethod
    def identity() -> "NormTransform":
        return NormTransform(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=np.float64) @ self.rotation.T) + self.translation

    def invert_points(self, pts: np.ndarray) -> np.ndarray:
        return ((np.asarray(pts, dtype=np.float64) - self.translation) / self.scale) @ self.rotation

    def apply_camera(self, cam: Camera) -> Camera:
        return Camera(cam.fx, cam.fy, cam.cx, cam.cy,
                      self.rotation @ cam.rotation,
                      self.apply_points(cam.translation[None])[0],
                      cam.width, cam.height)

    def invert_camera(self, cam: Camera) -> Camera:
        return Camera(cam.fx, cam.fy, cam.cx, cam.cy,
                      self.rotation.T @ cam.rotation,
                      self.invert_points(cam.translation[None])[0],
                      cam.width, cam.height)

    def apply_mesh(self, mesh: TriangleMesh) -> TriangleMesh:
        return mesh.transformed(self.scale, self.translation)

    def invert_mesh(self, mesh: TriangleMesh) -> TriangleMesh:
        return mesh.transformed(1.0 / self.scale, -self.translation / self.scale)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NormTransform":
        return NormTransform(float(d["scale"]), np.array(d["rotation"]), np.array(d["translation"]))


def normalize_cameras(cameras: Sequence[Camera], margin: float = 0.8) -> NormTransform:
    """Similarity transform placing all camera centers inside the unit sphere.

    The centroid of camera centers maps to the origin and the farthest
    center lands exactly at radius `margin`. Coincident centers get scale 1.
    """
    if len(cameras) == 0:
        raise ValueError("need at least one camera")
    if not (0 < margin <= 1):
        raise ValueError("margin must be in (0, 1]")
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    radius = np.linalg.norm(centers - centroid, axis=-1).max()
    scale = margin / radius if radius > 1e-12 else 1.0
    return NormTransform(scale, np.eye(3), -scale * centroid)


@dataclass(frozen=True)
class ViewRecord:
    """One posed view: color plus optional depth / semantic maps.

    depth is z-depth in raw-scene meters (0 = invalid) even when the camera
    has been normalized; conversion to normalized ray distance happens at
    ray-batch assembly.
    """

    camera: Camera
    color: np.ndarray                   # (H, W, 3) in [0, 1]
    depth: np.ndarray | None = None     # (H, W) meters, 0 invalid
    semantics: np.ndarray | None = None  # (H, W) file label ids {0,1,2}
    name: str = ""
    warnings: tuple = ()

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        color = np.asarray(self.color, dtype=np.float64)
        if color.shape != (h, w, 3):
            raise ValueError(f"color shape {color.shape} != camera size {(h, w, 3)}")
        if not np.isfinite(color).all() or color.min() < 0 or color.max() > 1:
            raise ValueError("color values must be finite and in [0,1]")
        object.__setattr__(self, "color", color)
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float64)
            if depth.shape != (h, w):
                raise ValueError("depth map size mismatch")
            if depth.min() < 0:
                raise ValueError("depth values must be >= 0")
            object.__setattr__(self, "depth", depth)
        if self.semantics is not None:
            sem = np.asarray(self.semantics, dtype=np.int64)
            if sem.shape != (h, w):
                raise ValueError("semantic map size mismatch")
            if sem.min() < 0 or sem.max() > 2:
                raise ValueError("semantic labels must be in {0, 1, 2}")
            object.__setattr__(self, "semantics", sem)

    @property
    def has_depth(self) -> bool:
        return self.depth is not None

    @property
    def has_semantics(self) -> bool:
        return self.semantics is not None


@dataclass(frozen=True)
class SceneDataset:
    """Views with normalized cameras plus optional ground truth.

    gt_mesh lives in the normalized frame; gt_sdf takes normalized-frame
    points and returns signed distance in normalized units (synthetic
    scenes only).
    """

    views: tuple
    norm_transform: NormTransform
    gt_mesh: TriangleMesh | None = None
    gt_sdf: Callable | None = None
    source_dir: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        for v in self.views:
            if np.linalg.norm(v.camera.center) > 1.0 + 1e-9:
                raise ValueError("normalized camera center outside the unit sphere")

    def __len__(self):
        return len(self.views)

    @property
    def has_depth(self) -> bool:
        return any(v.has_depth for v in self.views)

    @property
    def has_semantics(self) -> bool:
        return any(v.has_semantics for v in self.views)


# ---------------------------------------------------------------------------
# Synthetic Manhattan room
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticRoomSpec:
    """Parameters of the procedural room generator.

    The room is a hollow box (walls, floor, ceiling) with one interior
    partition slab; the whole assembly is rotated by wall_yaw about z so
    the learnable wall direction has something nontrivial to converge to.
    """

    extents: tuple = (1.1, 0.9, 0.65)   # box half-sizes, meters
    wall_yaw: float = 0.0               # radians
    n_views: int = 40
    image_size: int = 64
    texture_seed: int = 0
    label_noise_rate: float = 0.0
    depth_sparsity: float = 1.0

    # generator knobs (defaults tuned for desk-scale runs)
    slab_offset: float = 0.38           # slab center x as fraction of extents[0]
    slab_length: float = 0.42           # slab half-length as fraction of extents[1]
    slab_thickness: float = 0.05        # slab half-thickness, meters
    slab_height: float = 0.62           # slab height as fraction of full room height
    cam_inset: float = 0.22             # camera ring inset from walls, meters
    fov_deg: float = 78.0
    fit_radius: float = 0.97            # room corners land at this normalized radius
    wall_texture_amp: float = 0.04      # low-texture walls
    plane_texture_amp: float = 0.22     # floor / ceiling / slab texture
    gt_mesh_resolution: int = 256

    def __post_init__(self):
        if not all(e > 0 for e in self.extents):
            raise ValueError("extents must be positive")
        if not (0 <= self.label_noise_rate < 1):
            raise ValueError("label_noise_rate must be in [0, 1)")
        if not (0 < self.depth_sparsity <= 1):
            raise ValueError("depth_sparsity must be in (0, 1]")
        if self.n_views < 1 or self.image_size < 8:
            raise ValueError("need n_views >= 1 and image_size >= 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"] = list(self.extents)
        return d


def _box_sdf(p: np.ndarray, half: np.ndarray) -> np.ndarray:
    """Exact SDF of a solid axis-aligned box centered at the origin."""
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


class RoomModel:
    """Analytic solid model of the synthetic room in raw (meter) coordinates.

    Solid = everything outside the box interior, plus the partition slab.
    The signed distance is negative inside solid matter and positive in air.
    """

    def __init__(self, spec: SyntheticRoomSpec):
        self.spec = spec
        self.extents = np.array(spec.extents, dtype=np.float64)
        yaw = spec.wall_yaw
        c, s = math.cos(yaw), math.sin(yaw)
        self.rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        ez = self.extents[2]
        h = spec.slab_height * 2 * ez
        self.slab_center = np.array([spec.slab_offset * self.extents[0], 0.0, -ez + h / 2])
        self.slab_half = np.array([spec.slab_thickness, spec.slab_length * self.extents[1], h / 2])
        self._build_faces()

    def _build_faces(self):
        # Face table: outer box faces first (normals point into the room),
        # then slab faces (normals point away from the slab).
        normals_local, labels = [], []
        for k in range(3):
            for sgn in (1.0, -1.0):
                n = np.zeros(3)
                n[k] = -sgn  # inward
                normals_local.append(n)
                if k == 2 and sgn < 0:
                    labels.append(FLOOR)       # bottom face, normal +z
                elif k == 2:
                    labels.append(OTHER)       # ceiling
                else:
                    labels.append(WALL)
        for k in range(3):
            for sgn in (1.0, -1.0):
                n = np.zeros(3)
                n[k] = sgn  # outward from slab
                normals_local.append(n)
                if k == 2 and sgn > 0:
                    labels.append(FLOOR)       # slab top faces up
                elif k == 2:
                    labels.append(OTHER)       # slab underside (buried)
                else:
                    labels.append(WALL)
        self.face_normals_local = np.stack(normals_local)
        self.face_normals_world = self.face_normals_local @ self.rot.T
        self.face_labels = np.array(labels, dtype=np.int64)

    def _to_local(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rot  # rot is orthonormal

    def sdf(self, p: np.ndarray) -> np.ndarray:
        pl = self._to_local(p)
        d_walls = _box_sdf(pl, self.extents)   # negative inside the box
        d_slab = _box_sdf(pl - self.slab_center, self.slab_half)
        return np.minimum(-d_walls, d_slab)

    def face_ids(self, p: np.ndarray) -> np.ndarray:
        """Nearest face id for points on (or near) the surface."""
        pl = self._to_local(p)
        d_walls = -_box_sdf(pl, self.extents)
        d_slab = _box_sdf(pl - self.slab_center, self.slab_half)
        on_outer = d_walls <= d_slab
        q_outer = np.abs(pl) - self.extents
        k_outer = np.argmax(q_outer, axis=-1)
        sgn_outer = np.take_along_axis(pl, k_outer[:, None], axis=-1)[:, 0] >= 0
        idx_outer = k_outer * 2 + np.where(sgn_outer, 0, 1)
        r = pl - self.slab_center
        q_slab = np.abs(r) - self.slab_half
        k_slab = np.argmax(q_slab, axis=-1)
        sgn_slab = np.take_along_axis(r, k_slab[:, None], axis=-1)[:, 0] >= 0
        idx_slab = 6 + k_slab * 2 + np.where(sgn_slab, 0, 1)
        return np.where(on_outer, idx_outer, idx_slab)

    def normals(self, p: np.ndarray) -> np.ndarray:
        return self.face_normals_world[self.face_ids(p)]

    def labels(self, p: np.ndarray) -> np.ndarray:
        """Class labels (logit order) from the analytic face a point lies on."""
        return self.face_labels[self.face_ids(p)]

    def corners(self) -> np.ndarray:
        sgn = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return (sgn * self.extents) @ self.rot.T

    def face_uv(self, p: np.ndarray, face_ids: np.ndarray) -> np.ndarray:
        """In-plane coordinates of surface points, normalized to about [0,1]."""
        pl = self._to_local(p)
        k = np.where(face_ids < 6, face_ids // 2, (face_ids - 6) // 2)
        axes = np.array([[1, 2], [0, 2], [0, 1]])  # in-plane axes per face axis
        ax = axes[k]
        slab = face_ids >= 6
        ref = np.where(slab[:, None], self.slab_center[None, :], 0.0)
        span = np.where(slab[:, None], self.slab_half[None, :], self.extents[None, :])
        rel = (pl - ref)
        u = np.take_along_axis(rel, ax[:, 0:1], axis=-1)[:, 0] / np.take_along_axis(span, ax[:, 0:1], axis=-1)[:, 0]
        v = np.take_along_axis(rel, ax[:, 1:2], axis=-1)[:, 0] / np.take_along_axis(span, ax[:, 1:2], axis=-1)[:, 0]
        return np.stack([(u + 1) / 2, (v + 1) / 2], axis=-1)


def _hash01(ix: np.ndarray, iy: np.ndarray, key: int) -> np.ndarray:
    """Deterministic lattice hash -> floats in [0, 1). splitmix64 finalizer."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             ^ iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
             ^ np.uint64(key & 0xFFFFFFFFFFFFFFFF))
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(u: np.ndarray, v: np.ndarray, key: int, octaves: int = 3, base_freq: float = 5.0) -> np.ndarray:
    """Seeded 2D value noise in [0, 1], smooth bilinear lattice interpolation."""
    out = np.zeros_like(u)
    amp_total = 0.0
    for o in range(octaves):
        f = base_freq * (2.0 ** o)
        amp = 0.55 ** o
        x, y = u * f, v * f
        ix, iy = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
        fx, fy = x - ix, y - iy
        fx = fx * fx * (3 - 2 * fx)
        fy = fy * fy * (3 - 2 * fy)
        k = key + o * 7919
        n00 = _hash01(ix, iy, k)
        n10 = _hash01(ix + 1, iy, k)
        n01 = _hash01(ix, iy + 1, k)
        n11 = _hash01(ix + 1, iy + 1, k)
        out += amp * ((n00 * (1 - fx) + n10 * fx) * (1 - fy) + (n01 * (1 - fx) + n11 * fx) * fy)
        amp_total += amp
    return out / amp_total


def _sphere_trace(model: RoomModel, origins: np.ndarray, dirs: np.ndarray,
                  t_max: float, tol: float = 1e-7, max_iter: int = 256):
    """March exact-SDF rays to the first surface. Returns (t, hit)."""
    n = len(origins)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        x = origins[active] + t[active, None] * dirs[active]
        d = model.sdf(x)
        t[active] = t[active] + d
        done = d < tol
        escaped = t[active] > t_max
        idx = np.flatnonzero(active)
        active[idx[done | escaped]] = False
    hit = t <= t_max
    return t, hit


class _RoomAppearance:
    """Per-face base colors, gradients and noise amplitudes."""

    def __init__(self, spec: SyntheticRoomSpec, model: RoomModel):
        rng = np.random.default_rng(np.random.SeedSequence([spec.texture_seed, 101]))
        n_faces = len(model.face_labels)
        self.base = 0.25 + 0.5 * rng.random((n_faces, 3))
        self.grad = rng.uniform(-0.12, 0.12, size=(n_faces, 2, 3))
        amps = np.where(model.face_labels == WALL, spec.wall_texture_amp, spec.plane_texture_amp)
        self.amp = amps
        self.key = spec.texture_seed
        self.light = np.array([0.35, 0.25, 0.9])
        self.light /= np.linalg.norm(self.light)

    def shade(self, model: RoomModel, points: np.ndarray, face_ids: np.ndarray) -> np.ndarray:
        uv = model.face_uv(points, face_ids)
        albedo = self.base[face_ids]
        albedo = albedo + uv[:, 0:1] * self.grad[face_ids, 0] + uv[:, 1:2] * self.grad[face_ids, 1]
        noise = np.zeros(len(points))
        for fid in np.unique(face_ids):
            m = face_ids == fid
            noise[m] = _value_noise(uv[m, 0], uv[m, 1], key=self.key * 131 + int(fid))
        albedo = albedo + self.amp[face_ids, None] * (noise[:, None] - 0.5)
        lambert = np.clip(model.face_normals_world[face_ids] @ self.light, 0.0, 1.0)
        color = albedo * (0.6 + 0.4 * lambert[:, None])
        return np.clip(color, 0.0, 1.0)


def _ring_cameras(spec: SyntheticRoomSpec, model: RoomModel) -> list[Camera]:
    """Cameras on a rounded-rectangle ring inside the room, looking across."""
    ex, ey, ez = model.extents
    a = max(ex - spec.cam_inset, 0.3 * ex)
    b = max(ey - spec.cam_inset, 0.3 * ey)
    w = h = spec.image_size
    f = 0.5 * w / math.tan(math.radians(spec.fov_deg) / 2)
    cams = []
    for i in range(spec.n_views):
        th = 2 * math.pi * (i + 0.31) / spec.n_views
        ct, st = math.cos(th), math.sin(th)
        # superellipse (rounded rectangle) keeps cameras near the walls
        px = a * math.copysign(abs(ct) ** 0.5, ct)
        py = b * math.copysign(abs(st) ** 0.5, st)
        pz = (-0.12 if i % 2 == 0 else 0.3) * ez
        eye_local = np.array([px, py, pz])
        # aim through the room: opposite ring point, slightly below eye level
        tgt_local = np.array([-0.45 * px, -0.45 * py, -0.38 * ez])
        eye = model.rot @ eye_local
        tgt = model.rot @ tgt_local
        R = look_at(eye, tgt)
        cams.append(Camera(f, f, w / 2.0, h / 2.0, R, eye, w, h))
    return cams


def _corrupt_labels(labels: np.ndarray, rate: float, rng: np.random.Generator,
                    band: int = 3) -> np.ndarray:
    """Flip floor<->wall for a fraction of pixels within `band` pixels of a
    floor/wall boundary. Background pixels are never touched."""
    from scipy import ndimage

    if rate <= 0:
        return labels.copy()
    floor = labels == FLOOR
    wall = labels == WALL
    four = ndimage.generate_binary_structure(2, 1)
    cross = (ndimage.binary_dilation(floor, four) & wall) | \
            (ndimage.binary_dilation(wall, four) & floor)
    if not cross.any():
        return labels.copy()
    in_band = ndimage.binary_dilation(cross, structure=np.ones((3, 3), bool), iterations=band)
    candidates = np.flatnonzero(in_band & (floor | wall))
    n_flip = int(round(rate * len(candidates)))
    flip = rng.permutation(candidates)[:n_flip]
    out = labels.copy().reshape(-1)
    out[flip] = np.where(out[flip] == FLOOR, WALL, FLOOR)
    return out.reshape(labels.shape)


def generate_synthetic_room(spec: SyntheticRoomSpec, out_dir=None) -> SceneDataset:
    """Build a synthetic room dataset with analytic ground truth.

    Views are rendered by sphere-tracing the exact room SDF with a seeded
    procedural texture; depth maps are exact then sparsified; labels are
    exact then corrupted near floor/wall boundaries. When out_dir is given
    the standard scene layout is also written there.
    """
    from .extraction import marching_cubes_on_grid

    model = RoomModel(spec)
    appearance = _RoomAppearance(spec, model)
    cams_raw = _ring_cameras(spec, model)

    # normalization: camera centroid to origin, room corners at fit_radius
    centers = np.stack([c.center for c in cams_raw])
    centroid = centers.mean(axis=0)
    r_cam = np.linalg.norm(centers - centroid, axis=-1).max()
    r_corner = np.linalg.norm(model.corners() - centroid, axis=-1).max()
    margin = spec.fit_radius * r_cam / r_corner
    norm = normalize_cameras(cams_raw, margin=margin)

    w = h = spec.image_size
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    uv = np.stack([ii.reshape(-1) + 0.5, jj.reshape(-1) + 0.5], axis=-1)
    t_max = 2.5 * float(np.linalg.norm(model.extents)) * 2

    seeds = np.random.SeedSequence([spec.texture_seed, 7])
    view_seeds = seeds.spawn(spec.n_views)

    views = []
    exact_depths, exact_labels = [], []
    for vi, cam in enumerate(cams_raw):
        origins, dirs = cam.rays(uv)
        t, hit = _sphere_trace(model, origins, dirs, t_max)
        pts = origins + t[:, None] * dirs
        fids = model.face_ids(pts)
        color = appearance.shade(model, pts, fids).reshape(h, w, 3)
        ray_scale = cam.pixel_ray_scale(uv)
        z_depth = np.where(hit, t / ray_scale, 0.0).reshape(h, w)
        labels = np.where(hit, model.face_labels[fids], OTHER).reshape(h, w)

        rng = np.random.default_rng(view_seeds[vi])
        corrupted = _corrupt_labels(labels, spec.label_noise_rate, rng)
        n_keep = int(round(spec.depth_sparsity * h * w))
        keep = rng.permutation(h * w)[:n_keep]
        mask = np.zeros(h * w, dtype=bool)
        mask[keep] = True
        sparse_depth = np.where(mask.reshape(h, w), z_depth, 0.0)

        views.append(ViewRecord(
            camera=norm.apply_camera(cam),
            color=color,
            depth=sparse_depth,
            semantics=class_to_file_labels(corrupted).astype(np.int64),
            name=f"{vi:06d}",
        ))
        exact_depths.append(z_depth)
        exact_labels.append(labels)

    # ground-truth mesh from the analytic SDF (raw frame, then normalized)
    pad = 0.05
    lo = model.corners().min(axis=0) - pad
    hi = model.corners().max(axis=0) + pad
    gt_mesh_raw = marching_cubes_on_grid(model.sdf, lo, hi, spec.gt_mesh_resolution)
    gt_mesh = norm.apply_mesh(gt_mesh_raw)

    scale = norm.scale

    def gt_sdf_normalized(p):
        return scale * model.sdf(norm.invert_points(p))

    meta = {"room_spec": spec.to_dict(), "norm_margin": margin, "layout_version": 1}
    dataset = SceneDataset(views=views, norm_transform=norm, gt_mesh=gt_mesh,
                           gt_sdf=gt_sdf_normalized, meta=meta)

    if out_dir is not None:
        _write_scene_dir(Path(out_dir), dataset, cams_raw, gt_mesh_raw, meta,
                         exact_depths, exact_labels)
        object.__setattr__(dataset, "source_dir", str(out_dir))
    return dataset


def _write_scene_dir(out: Path, dataset: SceneDataset, cams_raw, gt_mesh_raw, meta,
                     exact_depths, exact_labels) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cam0 = cams_raw[0]
    with open(out / "intrinsics.txt", "w") as fh:
        fh.write(f"{cam0.fx:.17g} {cam0.fy:.17g} {cam0.cx:.17g} {cam0.cy:.17g} "
                 f"{cam0.width} {cam0.height}\n")
    for vi, (view, cam) in enumerate(zip(dataset.views, cams_raw)):
        name = view.name or f"{vi:06d}"
        fileio.write_color_png(out / "color" / f"{name}.png", view.color)
        pose = np.eye(4)
        pose[:3, :3] = cam.rotation
        pose[:3, 3] = cam.translation
        fileio.write_matrix_txt(out / "pose" / f"{name}.txt", pose)
        if view.depth is not None:
            fileio.write_depth_png(out / "depth" / f"{name}.png", view.depth)
        if view.semantics is not None:
            fileio.write_label_png(out / "semantic" / f"{name}.png", view.semantics)
        fileio.write_depth_png(out / "gt" / "depth_exact" / f"{name}.png", exact_depths[vi])
        fileio.write_label_png(out / "gt" / "semantic_exact" / f"{name}.png",
                               class_to_file_labels(exact_labels[vi]))
    write_ply(gt_mesh_raw, out / "gt_mesh.ply")
    with open(out / "room_spec.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Directory ingestion
# ---------------------------------------------------------------------------

def _read_intrinsics(path: Path):
    vals = np.loadtxt(path, dtype=np.float64).reshape(-1)
    if len(vals) != 6:
        raise SceneFormatError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy, w, h = vals
    return fx, fy, cx, cy, int(w), int(h)


def load_scene(scene_dir, margin: float | None = None, stride: int = 1,
               semantic_remap: dict | str | None = None) -> SceneDataset:
    """Load a scene directory (color/ pose/ intrinsics.txt [depth/ semantic/
    gt_mesh.ply gt/ room_spec.json]).

    stride > 1 keeps every stride-th frame (sorted by filename). Unreadable
    optional per-view files are skipped with a warning flag on the view;
    missing intrinsics or a pose/image count mismatch are fatal.
    """
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise SceneFormatError(f"{scene_dir}: not a directory")
    intr_path = scene_dir / "intrinsics.txt"
    if not intr_path.exists():
        raise SceneFormatError(f"{scene_dir}: missing intrinsics.txt")
    fx, fy, cx, cy, w, h = _read_intrinsics(intr_path)

    color_files = sorted((scene_dir / "color").glob("*.png"))
    pose_files = sorted((scene_dir / "pose").glob("*.txt"))
    if len(color_files) == 0:
        raise SceneFormatError(f"{scene_dir}: no color images")
    if len(color_files) != len(pose_files):
        raise SceneFormatError(
            f"{scene_dir}: pose/image mismatch ({len(pose_files)} poses, "
            f"{len(color_files)} images)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    color_files = color_files[::stride]
    pose_files = pose_files[::stride]

    meta = {}
    spec_path = scene_dir / "room_spec.json"
    if spec_path.exists():
        try:
            meta = json.loads(spec_path.read_text())
        except (json.JSONDecodeError, OSError):
            log.warning("unreadable room_spec.json in %s", scene_dir)
    if margin is None:
        margin = float(meta.get("norm_margin", 0.8))

    if isinstance(semantic_remap, str):
        if semantic_remap == "scannet40":
            semantic_remap = SCANNET40_REMAP
        else:
            semantic_remap = {int(k): int(v) for k, v in json.loads(Path(semantic_remap).read_text()).items()}

    cams_raw, raw_views = [], []
    for cf, pf in zip(color_files, pose_files):
        pose = fileio.read_matrix_txt(pf, shape=(4, 4))
        cam = Camera(fx, fy, cx, cy, pose[:3, :3], pose[:3, 3], w, h)
        cams_raw.append(cam)
        color = fileio.read_color_png(cf)
        warnings = []
        depth = semantics = None
        dp = scene_dir / "depth" / (cf.stem + ".png")
        if dp.exists():
            try:
                depth = fileio.read_depth_png(dp)
            except (OSError, ValueError):
                warnings.append("depth_unreadable")
        sp = scene_dir / "semantic" / (cf.stem + ".png")
        if sp.exists():
            try:
                raw = fileio.read_label_png(sp)
                if semantic_remap is not None:
                    remapped = np.zeros_like(raw)
                    for src, dst in semantic_remap.items():
                        remapped[raw == src] = dst
                    raw = remapped
                if raw.min() < 0 or raw.max() > 2:
                    raise ValueError("labels out of range (need a remap table?)")
                semantics = raw
            except (OSError, ValueError):
                warnings.append("semantic_unreadable")
        raw_views.append((cam, color, depth, semantics, cf.stem, tuple(warnings)))

    norm = normalize_cameras(cams_raw, margin=margin)
    views = [ViewRecord(camera=norm.apply_camera(cam), color=color, depth=depth,
                        semantics=semantics, name=name, warnings=warn)
             for cam, color, depth, semantics, name, warn in raw_views]

    gt_mesh = None
    mesh_path = scene_dir / "gt_mesh.ply"
    if mesh_path.exists():
        try:
            gt_mesh = norm.apply_mesh(read_ply(mesh_path))
        except (OSError, ValueError):
            log.warning("unreadable gt_mesh.ply in %s", scene_dir)

    gt_sdf = None
    if "room_spec" in meta:
        try:
            spec = SyntheticRoomSpec(**{**meta["room_spec"],
                                        "extents": tuple(meta["room_spec"]["extents"])})
            model = RoomModel(spec)
            scale = norm.scale

            def gt_sdf(p, _m=model, _n=norm, _s=scale):
                return _s * _m.sdf(_n.invert_points(p))
        except (TypeError, ValueError):
            log.warning("could not rebuild room model from room_spec.json")

    return SceneDataset(views=views, norm_transform=norm, gt_mesh=gt_mesh,
                        gt_sdf=gt_sdf, source_dir=str(scene_dir), meta=meta)
