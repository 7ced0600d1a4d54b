"""roomsdf: indoor scene reconstruction from posed images.

Learns a signed-distance / color / semantic field of an indoor scene by
differentiable volume rendering, regularizes floor and wall geometry with
Manhattan-world planar constraints whose semantic masks are themselves
optimized in 3D, and extracts and evaluates triangle meshes.
"""

__version__ = "0.1.0"

# Semantic class indices, in logit order. File-level label maps use a
# different id convention (see scenes.FILE_LABEL_*).
FLOOR, WALL, OTHER = 0, 1, 2
UNLABELED = -1

from .scenes import (  # noqa: E402
    Camera,
    ViewRecord,
    SceneDataset,
    SyntheticRoomSpec,
    NormTransform,
    normalize_cameras,
    camera_ray,
    generate_synthetic_room,
    load_scene,
)
from .fields import FieldParams, ArchConfig, init_geometric  # noqa: E402
from .renderer import RenderConfig, render_batch  # noqa: E402
from .losses import LossWeights, LossReport  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402
from .extraction import extract_mesh, cull_to_observed  # noqa: E402
from .meshio import TriangleMesh  # noqa: E402
from .evaluation import reconstruction_metrics, semantic_iou  # noqa: E402
