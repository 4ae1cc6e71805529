"""Triangle mesh container, topology statistics, signed volume and OBJ I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class TriangleMesh:
    """Vertices (mm) and counter-clockwise (outward) triangular faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = self.faces
            if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
                raise MeshError("degenerate face (repeated vertex index)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(lo, hi)`` rows, lexicographic order."""
        keys = np.unique(_edge_keys(self.faces, self.n_vertices))
        return np.stack([keys // self.n_vertices, keys % self.n_vertices], axis=1)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy())

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.faces, other.faces))


def _edge_keys(f: np.ndarray, n: int) -> np.ndarray:
    """``lo * n + hi`` for the three edges of every face."""
    a = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    b = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    return np.minimum(a, b) * n + np.maximum(a, b)


@dataclass(frozen=True)
class MeshStats:
    v_count: int
    e_count: int
    f_count: int
    watertight: bool
    euler_characteristic: int
    genus: int | None
    boundary_edges: int = 0
    nonmanifold_edges: int = 0


def validate(m: TriangleMesh) -> MeshStats:
    """Count V, E, F and check that every undirected edge has exactly two faces."""
    f = m.faces
    if len(f) == 0:
        return MeshStats(m.n_vertices, 0, 0, False, m.n_vertices, None)
    n_v = m.n_vertices
    _, counts = np.unique(_edge_keys(f, n_v), return_counts=True)
    n_e = len(counts)
    chi = n_v - n_e + len(f)
    boundary = int((counts == 1).sum())
    nonmanifold = int((counts > 2).sum())
    unreferenced = n_v - len(np.unique(f))
    watertight = boundary == 0 and nonmanifold == 0 and unreferenced == 0
    genus = (2 - chi) // 2 if watertight and (2 - chi) % 2 == 0 else None
    return MeshStats(n_v, n_e, len(f), watertight, chi, genus, boundary, nonmanifold)


def is_oriented(m: TriangleMesh) -> bool:
    """True when every directed half-edge appears exactly once."""
    f = m.faces
    h = np.concatenate([f[:, 0] * m.n_vertices + f[:, 1], f[:, 1] * m.n_vertices + f[:, 2],
                        f[:, 2] * m.n_vertices + f[:, 0]])
    return len(np.unique(h)) == len(h)


def mesh_volume(m: TriangleMesh) -> float:
    """Signed enclosed volume; positive when faces are oriented outward."""
    if not validate(m).watertight:
        raise MeshError("mesh_volume requires a watertight mesh")
    v = m.vertices
    # centre for numerical conditioning; the sum is translation invariant
    v = v - v.mean(axis=0)
    a, b, c = v[m.faces[:, 0]], v[m.faces[:, 1]], v[m.faces[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def surface_area(m: TriangleMesh) -> float:
    v = m.vertices
    a, b, c = v[m.faces[:, 0]], v[m.faces[:, 1]], v[m.faces[:, 2]]
    return float(np.linalg.norm(np.cross(b - a, c - a), axis=1).sum() / 2.0)


# ---------------------------------------------------------------------------
# OBJ subset: ``v x y z`` and ``f i j k`` lines only
# ---------------------------------------------------------------------------

def write_obj(path, m: TriangleMesh) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x:.6g} {y:.6g} {z:.6g}" for x, y, z in m.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in m.faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v" and len(parts) == 4:
            verts.append([float(t) for t in parts[1:]])
        elif tag == "f" and len(parts) == 4:
            try:
                faces.append([int(t) - 1 for t in parts[1:]])
            except ValueError:
                raise MeshError(f"{path}:{lineno}: face indices must be plain integers") from None
        else:
            raise MeshError(f"{path}:{lineno}: unsupported OBJ directive {line.strip()!r}")
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# Reference shapes used by tests and examples
# ---------------------------------------------------------------------------

def unit_cube() -> TriangleMesh:
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, faces)


def tetrahedron() -> TriangleMesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return TriangleMesh(v, [(0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3)])


def icosphere(radius: float = 1.0, subdivisions: int = 0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                p = verts[i] + verts[j]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts) * radius, f)


def torus(major: float = 3.0, minor: float = 1.0, n_major: int = 8, n_minor: int = 8) -> TriangleMesh:
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    x = (major + minor * np.cos(ww)) * np.cos(uu)
    y = (major + minor * np.cos(ww)) * np.sin(uu)
    z = minor * np.sin(ww)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, faces)
