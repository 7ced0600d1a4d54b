"""Quantitative evaluation: surface reconstruction metrics, semantic IoU,
and the wall-direction convergence cost."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from .meshio import TriangleMesh, sample_surface
from .scenes import FILE_LABEL_FLOOR, FILE_LABEL_WALL


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    comp: float
    prec: float
    recall: float
    fscore: float
    tau: float
    n_pred: int
    n_gt: int

    def to_dict(self):
        return asdict(self)

    def row(self) -> str:
        return (f"{self.acc:7.4f} {self.comp:7.4f} {self.prec:7.4f} "
                f"{self.recall:7.4f} {self.fscore:7.4f}")


@dataclass(frozen=True)
class IoUReport:
    iou_floor: float
    iou_wall: float

    @property
    def iou_mean(self) -> float:
        return 0.5 * (self.iou_floor + self.iou_wall)

    def to_dict(self):
        d = asdict(self)
        d["iou_mean"] = self.iou_mean
        return d


def sample_points(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface samples (seeded)."""
    return sample_surface(mesh, n, seed)


def reconstruction_metrics(pred_pts: np.ndarray, gt_pts: np.ndarray,
                           tau: float = 0.05) -> MetricsReport:
    """Accuracy / completeness / precision / recall / F-score between point
    clouds sampled from the predicted and ground-truth surfaces.

    Nearest neighbors are exact (kd-tree); tau is the distance threshold in
    the clouds' length unit (meters)."""
    pred_pts = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        raise ValueError("point clouds must be non-empty")
    if tau <= 0:
        raise ValueError("tau must be positive")
    d_pred, _ = cKDTree(gt_pts).query(pred_pts, k=1)
    d_gt, _ = cKDTree(pred_pts).query(gt_pts, k=1)
    prec = float((d_pred < tau).mean())
    recall = float((d_gt < tau).mean())
    fscore = 2 * prec * recall / (prec + recall) if (prec + recall) > 0 else 0.0
    return MetricsReport(acc=float(d_pred.mean()), comp=float(d_gt.mean()),
                         prec=prec, recall=recall, fscore=fscore, tau=tau,
                         n_pred=len(pred_pts), n_gt=len(gt_pts))


def semantic_iou(pred_maps, gt_maps) -> IoUReport:
    """Per-class IoU for floor and wall, pooled over all pixels of all views.

    Maps use the file label convention {0: other, 1: floor, 2: wall}."""
    if len(pred_maps) != len(gt_maps):
        raise ValueError("need matching numbers of prediction and gt maps")
    inter = {FILE_LABEL_FLOOR: 0, FILE_LABEL_WALL: 0}
    union = {FILE_LABEL_FLOOR: 0, FILE_LABEL_WALL: 0}
    for pred, gt in zip(pred_maps, gt_maps):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"map shape mismatch {pred.shape} vs {gt.shape}")
        for cls in (FILE_LABEL_FLOOR, FILE_LABEL_WALL):
            p = pred == cls
            g = gt == cls
            inter[cls] += int((p & g).sum())
            union[cls] += int((p | g).sum())

    def iou(cls):
        return inter[cls] / union[cls] if union[cls] > 0 else 1.0

    return IoUReport(iou_floor=iou(FILE_LABEL_FLOOR), iou_wall=iou(FILE_LABEL_WALL))


def wall_normal_cost(n_w, clusters) -> float:
    """Mean over wall-direction clusters of min_j |j - n_w . n_i|,
    j in {-1, 0, 1}: zero when every cluster is parallel, anti-parallel or
    orthogonal to the candidate direction."""
    clusters = np.asarray(clusters, dtype=np.float64).reshape(-1, 3)
    if len(clusters) == 0:
        raise ValueError("need at least one cluster")
    dots = clusters @ np.asarray(n_w, dtype=np.float64)
    branches = np.abs(dots[:, None] - np.array([-1.0, 0.0, 1.0]))
    return float(branches.min(axis=1).mean())


@dataclass(frozen=True)
class WallClusters:
    centers: np.ndarray          # (K, 3) unit vectors, z = 0, K <= 4
    extra_mass: float            # fraction of faces outside the kept clusters

    def __len__(self):
        return len(self.centers)


def cluster_wall_normals(mesh: TriangleMesh, wall_mask: np.ndarray | None = None,
                         bandwidth: float = 0.2, max_clusters: int = 4,
                         max_faces: int = 20000, seed: int = 0) -> WallClusters:
    """Mean-shift clustering of wall-face normals projected to the xy-plane.

    wall_mask selects the wall faces; by default faces within 5 degrees of
    vertical count as walls. Returns at most max_clusters unit directions
    ordered by cluster mass, and the mass fraction left out."""
    from sklearn.cluster import MeanShift

    if mesh.empty:
        raise ValueError("mesh has no faces")
    normals = mesh.face_normals()
    if wall_mask is None:
        wall_mask = np.abs(normals[:, 2]) < np.sin(np.radians(5.0))
    wall_normals = normals[wall_mask]
    if len(wall_normals) == 0:
        raise ValueError("mesh has no wall faces")
    xy = wall_normals[:, :2]
    xy = xy / np.maximum(np.linalg.norm(xy, axis=-1, keepdims=True), 1e-12)
    if len(xy) > max_faces:
        rng = np.random.default_rng(seed)
        xy = xy[rng.choice(len(xy), size=max_faces, replace=False)]

    ms = MeanShift(bandwidth=bandwidth, bin_seeding=len(xy) > 1000)
    labels = ms.fit_predict(xy)
    counts = np.bincount(labels)
    order = np.argsort(counts)[::-1]
    kept = order[:max_clusters]
    extra = 1.0 - counts[kept].sum() / counts.sum()
    centers2 = ms.cluster_centers_[kept]
    centers2 = centers2 / np.maximum(np.linalg.norm(centers2, axis=-1, keepdims=True), 1e-12)
    centers = np.concatenate([centers2, np.zeros((len(centers2), 1))], axis=-1)
    return WallClusters(centers=centers, extra_mass=float(extra))
