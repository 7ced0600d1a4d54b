"""PNG and small text-file helpers for the scene directory layout."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def write_color_png(path, img: np.ndarray) -> None:
    """img: (H, W, 3) float in [0,1]."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def read_color_png(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_depth_png(path, depth_m: np.ndarray) -> None:
    """depth_m: (H, W) z-depth in meters, 0 = invalid. Stored as 16-bit millimeters."""
    mm = np.clip(np.rint(np.asarray(depth_m) * 1000.0), 0, 65535).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mm).save(path)


def read_depth_png(path) -> np.ndarray:
    """Returns (H, W) float64 meters, 0 where invalid."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise ValueError(f"{path}: unsupported depth dtype {arr.dtype}")
    return arr.astype(np.float64) / 1000.0


def write_label_png(path, labels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def read_label_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "P", "I", "I;16"):
        img = img.convert("L")
    return np.asarray(img).astype(np.int64)


def write_matrix_txt(path, mat: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(mat), fmt="%.17g")


def read_matrix_txt(path, shape=None) -> np.ndarray:
    mat = np.loadtxt(path, dtype=np.float64)
    if shape is not None:
        mat = mat.reshape(shape)
    return mat
