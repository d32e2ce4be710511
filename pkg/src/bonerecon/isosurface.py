"""Dense occupancy-field evaluation and marching-cubes surface extraction.

Fields live on node grids spanning [-1, +1]^3 (inclusive endpoints).
Vertices are deduplicated through global edge keys, so extracted surfaces
are watertight whenever the iso-surface stays off the grid boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mc_tables import (CORNER_OFFSETS, EDGE_CROSSINGS, EDGE_ORIGIN_AXIS,
                        TRIANGLE_EDGES)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    class_id: int | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


@dataclass
class FieldGrid:
    """Per-class probability grids [5, R, R, R] over [-1, 1]^3 node space."""

    probs: np.ndarray
    resolution: int = field(init=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 4 or self.probs.shape[0] != 5:
            raise ValueError(f"expected [5,R,R,R] probabilities, got {self.probs.shape}")
        self.resolution = self.probs.shape[1]
        sums = self.probs.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("per-node class probabilities must sum to 1")

    def class_field(self, cls: int) -> np.ndarray:
        return self.probs[cls]


def grid_points(resolution: int) -> np.ndarray:
    """Node coordinates [R^3, 3] in x-major order over [-1, 1]^3."""
    c = np.linspace(-1.0, 1.0, resolution)
    xs, ys, zs = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)


def evaluate_grid(predictor: Callable[[np.ndarray], np.ndarray],
                  resolution: int, chunk: int = 32768) -> FieldGrid:
    """Evaluate a point->5-class predictor on every node, in bounded chunks."""
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    pts = grid_points(resolution)
    out = np.empty((pts.shape[0], 5), dtype=np.float64)
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        try:
            out[lo:hi] = predictor(pts[lo:hi])
        except Exception as exc:
            raise RuntimeError(
                f"predictor failed on nodes [{lo}, {hi})"
            ) from exc
    probs = np.moveaxis(
        out.reshape(resolution, resolution, resolution, 5), 3, 0
    )
    return FieldGrid(probs=np.ascontiguousarray(probs))


def marching_cubes(grid: np.ndarray, iso: float = 0.5) -> TriangleMesh:
    """Standard 256-case marching cubes with linear edge interpolation.

    The grid is nodal over [-1, 1] per axis; returned vertices are in world
    coordinates. Fields entirely above or below iso yield an empty mesh.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError(f"marching_cubes expects a 3D grid, got rank {grid.ndim}")
    if not 0.0 < iso < 1.0:
        raise ValueError(f"iso level must be in (0, 1), got {iso}")
    nx, ny, nz = grid.shape
    below = grid < iso

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(
            np.int64
        ) << bit

    active = np.nonzero(EDGE_CROSSINGS[case] != 0)
    if active[0].size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cells = np.stack(active, axis=1)
    rows = TRIANGLE_EDGES[case[active]][:, :15].reshape(-1, 5, 3)
    tri_mask = rows[:, :, 0] >= 0
    cell_of_tri = np.repeat(np.arange(len(cells)), 5)[tri_mask.ravel()]
    local_edges = rows.reshape(-1, 3)[tri_mask.ravel()]  # [M, 3]

    # Global edge key: (node index, axis) shared across neighbouring cells.
    node = cells[cell_of_tri][:, None, :] + EDGE_ORIGIN_AXIS[local_edges][:, :, :3]
    axis = EDGE_ORIGIN_AXIS[local_edges][:, :, 3]
    keys = ((node[..., 0] * ny + node[..., 1]) * nz + node[..., 2]) * 3 + axis
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    triangles = inverse.reshape(-1, 3)

    # Vertex positions by linear interpolation along each unique edge.
    ax = uniq % 3
    flat_node = uniq // 3
    n0 = np.stack([flat_node // (ny * nz), (flat_node // nz) % ny, flat_node % nz],
                  axis=1)
    n1 = n0.copy()
    n1[np.arange(len(uniq)), ax] += 1
    v0 = grid[n0[:, 0], n0[:, 1], n0[:, 2]]
    v1 = grid[n1[:, 0], n1[:, 1], n1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    coords = [np.linspace(-1.0, 1.0, n) for n in (nx, ny, nz)]
    verts = np.stack([coords[d][n0[:, d]] for d in range(3)], axis=1)
    step = np.array([c[1] - c[0] for c in coords])
    verts[np.arange(len(uniq)), ax] += t * step[ax]

    # Drop degenerate output (repeated indices or sub-epsilon area).
    ok = (triangles[:, 0] != triangles[:, 1]) \
        & (triangles[:, 1] != triangles[:, 2]) \
        & (triangles[:, 0] != triangles[:, 2])
    tri = triangles[ok]
    e1 = verts[tri[:, 1]] - verts[tri[:, 0]]
    e2 = verts[tri[:, 2]] - verts[tri[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    tri = tri[area2 > 2e-12]
    return TriangleMesh(verts, tri)


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed volume by the divergence theorem (positive when outward-wound)."""
    if mesh.empty:
        return 0.0
    v = mesh.vertices
    a, b, c = (v[mesh.triangles[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def edge_counts(mesh: TriangleMesh) -> np.ndarray:
    """Occurrence count of each undirected edge; watertight means all 2."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def is_watertight(mesh: TriangleMesh) -> bool:
    if mesh.empty:
        return False
    return bool(np.all(edge_counts(mesh) == 2))


def euler_characteristic(mesh: TriangleMesh) -> int:
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    n_edges = len(np.unique(np.sort(edges, axis=1), axis=0))
    n_verts = len(np.unique(t.ravel()))
    return n_verts - n_edges + len(t)


def extract_class_meshes(grid: FieldGrid, iso: float = 0.5) -> list[tuple[int, TriangleMesh]]:
    """Per-bone marching cubes on each class probability channel (1..4)."""
    out = []
    for cls in (1, 2, 3, 4):
        mesh = marching_cubes(grid.class_field(cls), iso=iso)
        if mesh_volume(mesh) < 0:
            mesh.triangles = mesh.triangles[:, ::-1]
        mesh.class_id = cls
        out.append((cls, mesh))
    return out


def reconstruct_all(student, xrays, segnet, resolution: int,
                    chunk: int = 32768, iso: float = 0.5) -> list[tuple[int, TriangleMesh]]:
    """Full biplanar pipeline: enhance, evaluate the field, extract 4 bones."""
    from . import models

    predictor = models.make_student_predictor(student, xrays, segnet)
    grid = evaluate_grid(predictor, resolution, chunk=chunk)
    return extract_class_meshes(grid, iso=iso)
