"""Triangle meshes and PLY file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TriangleMesh:
    """Indexed triangle mesh. Vertex units depend on context (meters for
    de-normalized meshes, unit-sphere coordinates otherwise)."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64
    vertex_normals: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh vertices must be finite")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def face_corners(self):
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        a, b, c = self.face_corners()
        n = np.cross(b - a, c - a)
        if normalized:
            n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-30)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalized=False) * 2.0, axis=-1)

    def face_centroids(self) -> np.ndarray:
        a, b, c = self.face_corners()
        return (a + b + c) / 3.0

    def area(self) -> float:
        return float(self.face_areas().sum())

    def drop_degenerate(self, min_area: float = 1e-14) -> "TriangleMesh":
        """Remove zero-area faces (unreferenced vertices are kept)."""
        if self.empty:
            return self
        keep = self.face_areas() > min_area
        return TriangleMesh(self.vertices, self.faces[keep], self.vertex_normals)

    def transformed(self, scale: float, offset: np.ndarray) -> "TriangleMesh":
        """Apply x -> scale * x + offset to all vertices."""
        v = self.vertices * float(scale) + np.asarray(offset, dtype=np.float64)
        return TriangleMesh(v, self.faces.copy(), self.vertex_normals)

    @staticmethod
    def empty_mesh() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def write_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    """Write a mesh as PLY (binary little-endian by default, ASCII otherwise)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v, f = mesh.vertices, mesh.faces
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(v)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(f)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(v.astype("<f4").tobytes())
            if len(f):
                rec = np.empty(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = f.astype("<i4")
                fh.write(rec.tobytes())
        else:
            lines = ["%.9g %.9g %.9g" % tuple(p) for p in v]
            lines += ["3 %d %d %d" % tuple(p) for p in f]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path) -> TriangleMesh:
    """Read a PLY mesh (vertex x/y/z + face index list; extra properties skipped)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if data[:3] != b"ply" or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = None
    elements = []  # (name, count, [(proptype, name) or ('list', counttype, itemtype, name)])
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[2], tok[3], tok[4]))
            else:
                elements[-1][2].append((tok[1], tok[2]))

    type_map = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
                "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
                "short": "i2", "ushort": "u2", "char": "i1", "uchar": "u1",
                "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2"}

    verts, faces = None, None
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            if name == "vertex":
                width = len(props)
                arr = np.array(rows[pos:pos + count * width], dtype=np.float64).reshape(count, width)
                idx = [i for i, p in enumerate(props) if p[-1] in ("x", "y", "z")]
                verts = arr[:, idx[:3]]
                pos += count * width
            elif name == "face":
                out = []
                for _ in range(count):
                    n = int(rows[pos]); pos += 1
                    poly = [int(rows[pos + k]) for k in range(n)]
                    pos += n
                    for k in range(1, n - 1):
                        out.append((poly[0], poly[k], poly[k + 1]))
                faces = np.array(out, dtype=np.int64) if out else np.zeros((0, 3), np.int64)
            else:
                pos += count * len(props)
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        bo = "<" if fmt == "binary_little_endian" else ">"
        off = 0
        for name, count, props in elements:
            if name == "vertex":
                dt = np.dtype([(p[-1] if p[-1] in "xyz" else f"p{i}", bo + type_map[p[0]])
                               for i, p in enumerate(props)])
                arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
                off += dt.itemsize * count
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=-1).astype(np.float64)
            elif name == "face":
                if len(props) != 1 or props[0][0] != "list":
                    raise ValueError(f"{path}: unsupported face properties")
                _, ctype, itype, _ = props[0]
                csz = np.dtype(type_map[ctype]).itemsize
                isz = np.dtype(type_map[itype]).itemsize
                out = []
                for _ in range(count):
                    n = int(np.frombuffer(body, bo + type_map[ctype], 1, off)[0]); off += csz
                    poly = np.frombuffer(body, bo + type_map[itype], n, off); off += isz * n
                    for k in range(1, n - 1):
                        out.append((poly[0], poly[k], poly[k + 1]))
                faces = np.array(out, dtype=np.int64) if out else np.zeros((0, 3), np.int64)
            else:
                itemsize = sum(np.dtype(type_map[p[0]]).itemsize for p in props)
                off += itemsize * count
    else:
        raise ValueError(f"{path}: unknown PLY format {fmt!r}")

    if verts is None:
        raise ValueError(f"{path}: PLY has no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(verts, faces)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface sampling; returns (n, 3) float64."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("need n >= 1 sample points")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(areas), size=n, p=areas / total)
    a, b, c = mesh.face_corners()
    a, b, c = a[idx], b[idx], c[idx]
    # square-root trick for uniform barycentric coordinates
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return a * (1 - r1) + b * (r1 * (1 - r2)) + c * (r1 * r2)
