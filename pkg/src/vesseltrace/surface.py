"""Isosurface extraction, mesh smoothing and ASCII PLY I/O.

Meshes are triangle soups with shared vertices in world mm. Marching cubes
output is consistently oriented (positive enclosed volume); smoothing is the
two-coefficient Taubin low-pass filter parameterized by a passband value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from skimage import measure

from .volume import Volume3D

__all__ = [
    "TriMesh",
    "marching_cubes",
    "smooth_windowed_sinc",
    "save_mesh",
    "load_mesh",
]


@dataclass
class TriMesh:
    """Triangle mesh: vertices (mm) and index triples."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            degenerate = (
                (self.triangles[:, 0] == self.triangles[:, 1])
                | (self.triangles[:, 1] == self.triangles[:, 2])
                | (self.triangles[:, 0] == self.triangles[:, 2])
            )
            if degenerate.any():
                raise ValueError("degenerate triangle (repeated vertex index)")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def signed_volume(self) -> float:
        """Enclosed volume by the divergence theorem; positive for outward
        orientation of a closed mesh."""
        if self.is_empty:
            return 0.0
        v0 = self.vertices[self.triangles[:, 0]]
        v1 = self.vertices[self.triangles[:, 1]]
        v2 = self.vertices[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)

    def area(self) -> float:
        if self.is_empty:
            return 0.0
        v0 = self.vertices[self.triangles[:, 0]]
        v1 = self.vertices[self.triangles[:, 1]]
        v2 = self.vertices[self.triangles[:, 2]]
        return float(0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1).sum())

    def edge_counts(self) -> dict[tuple[int, int], int]:
        """Occurrences of each undirected edge across all triangles."""
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(a, b)), int(max(a, b)))
                counts[key] = counts.get(key, 0) + 1
        return counts


def marching_cubes(vol: Volume3D, iso: float = 0.5) -> TriMesh:
    """Extract the iso-surface of a scalar volume as a triangle mesh (mm).

    Uses the standard table-driven algorithm with linear edge interpolation.
    Returns an empty mesh when the volume never crosses ``iso``. Triangles
    are oriented so the enclosed volume is positive.
    """
    data = vol.data.astype(np.float64)
    if data.min() > iso or data.max() < iso or data.min() == data.max():
        return TriMesh()
    try:
        verts, faces, _, _ = measure.marching_cubes(data, level=iso, spacing=vol.spacing)
    except (ValueError, RuntimeError):
        return TriMesh()
    verts = verts + np.asarray(vol.origin)
    mesh = TriMesh(vertices=verts, triangles=faces)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(vertices=verts, triangles=faces[:, ::-1])
    return mesh


def _uniform_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Row-normalized vertex adjacency (averaging operator over 1-rings)."""
    n = len(mesh.vertices)
    tri = mesh.triangles
    rows = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 1], tri[:, 2], tri[:, 2], tri[:, 0]])
    cols = np.concatenate([tri[:, 1], tri[:, 0], tri[:, 2], tri[:, 1], tri[:, 0], tri[:, 2]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0  # collapse duplicate edge entries to plain adjacency
    degree = np.asarray(adj.sum(axis=1)).ravel()
    degree[degree == 0] = 1.0
    inv = sparse.diags(1.0 / degree)
    return inv @ adj


def smooth_windowed_sinc(mesh: TriMesh, iterations: int = 10, passband: float = 0.01) -> TriMesh:
    """Low-pass smooth vertex positions, Taubin lambda/mu style.

    Each iteration applies a shrink step with ``lam`` and an inflate step
    with ``mu = lam / (passband * lam - 1)``, which approximates a windowed
    sinc transfer function with the given passband. Connectivity is
    unchanged; zero iterations is the identity.
    """
    if mesh.is_empty or iterations <= 0:
        return TriMesh(vertices=mesh.vertices.copy(), triangles=mesh.triangles.copy())
    lam = 0.33
    mu = lam / (passband * lam - 1.0)
    avg = _uniform_laplacian(mesh)
    verts = mesh.vertices.copy()
    for _ in range(iterations):
        verts = verts + lam * (avg @ verts - verts)
        verts = verts + mu * (avg @ verts - verts)
    return TriMesh(vertices=verts, triangles=mesh.triangles.copy())


# ---------------------------------------------------------------------------
# ASCII PLY

def save_mesh(mesh: TriMesh, path: str) -> None:
    """Write an ASCII PLY 1.0 file (vertices in mm, triangular faces)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_mesh(path: str) -> TriMesh:
    """Read an ASCII PLY written by :func:`save_mesh`."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise ValueError("not a PLY file")
    n_verts = n_faces = None
    body_at = None
    for i, ln in enumerate(lines[1:], start=1):
        if ln.startswith("element vertex"):
            n_verts = int(ln.split()[-1])
        elif ln.startswith("element face"):
            n_faces = int(ln.split()[-1])
        elif ln == "end_header":
            body_at = i + 1
            break
    if n_verts is None or n_faces is None or body_at is None:
        raise ValueError("malformed PLY header")
    verts = np.array(
        [[float(x) for x in ln.split()] for ln in lines[body_at:body_at + n_verts]]
    ).reshape(n_verts, 3)
    faces = []
    for ln in lines[body_at + n_verts:body_at + n_verts + n_faces]:
        parts = [int(x) for x in ln.split()]
        if parts[0] != 3 or len(parts) != 4:
            raise ValueError("non-triangle face in PLY")
        faces.append(parts[1:])
    return TriMesh(vertices=verts, triangles=np.asarray(faces, dtype=np.int64).reshape(-1, 3))
