"""Iso-surface extraction of the 0.5 occupancy level and point-distance culling."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> TriangleMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def subset(self, keep_vertices: np.ndarray) -> TriangleMesh:
        """Keep the given vertices, drop triangles touching removed ones, reindex."""
        keep = np.asarray(keep_vertices, dtype=bool)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        tri_ok = np.all(keep[self.triangles], axis=1) if len(self.triangles) else np.zeros(0, bool)
        tris = remap[self.triangles[tri_ok]]
        normals = self.normals[keep] if self.normals is not None else None
        return TriangleMesh(self.vertices[keep], tris, normals)


def grid_points(bounds, resolution: int):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
    spacing = (hi - lo) / (resolution - 1)
    return axes, spacing


def active_region(bounds, resolution: int, points, radius: float) -> np.ndarray:
    """Grid nodes that can contribute vertices within ``radius`` of ``points``.

    Conservative: every node closer than ``radius`` plus a few voxel diagonals
    to some point is active.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    spacing = (hi - lo) / (resolution - 1)
    mask = np.zeros((resolution,) * 3, dtype=bool)
    idx = np.rint((np.asarray(points, dtype=np.float64) - lo) / spacing).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < resolution), axis=1)
    idx = idx[inside]
    mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    diag = np.linalg.norm(spacing)
    half = np.ceil((radius + 3.0 * diag) / spacing.min()).astype(int)
    if half >= resolution:
        return np.ones_like(mask)
    return ndimage.maximum_filter(mask, size=2 * half + 1, mode="constant")


def sample_volume(field, bounds, resolution: int, mask=None, chunk: int = 1 << 16,
                  workers: int = 1) -> np.ndarray:
    """Evaluate ``field`` (points -> values) on the node grid; nodes outside ``mask`` get 0.

    Chunks are fixed by ``chunk`` alone and each writes its own slice, so the
    volume does not depend on ``workers``.
    """
    axes, _ = grid_points(bounds, resolution)
    vol = np.zeros((resolution,) * 3, dtype=np.float32)
    flat = np.arange(resolution**3) if mask is None else np.flatnonzero(mask)
    out = vol.reshape(-1)

    def run(start):
        sel = flat[start:start + chunk]
        i, j, k = np.unravel_index(sel, vol.shape)
        pts = np.stack([axes[0][i], axes[1][j], axes[2][k]], axis=1)
        out[sel] = field(pts)

    starts = range(0, len(flat), chunk)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return vol


def mesh_from_volume(vol, bounds, level: float = 0.5, mask=None) -> TriangleMesh:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    res = vol.shape[0]
    spacing = (hi - lo) / (res - 1)
    sel = vol if mask is None else vol[mask]
    if sel.size == 0 or not (sel.min() < level < sel.max()):
        log.warning("field does not cross the iso-level %.3g on the grid; empty mesh", level)
        return TriangleMesh.empty()
    verts, faces, normals, _ = marching_cubes(
        vol, level=level, spacing=tuple(spacing), method="lorensen", mask=mask
    )
    mesh = TriangleMesh(verts + lo, faces.astype(np.int64), normals)
    good = mesh.triangle_areas() > DEGENERATE_AREA
    mesh = TriangleMesh(mesh.vertices, mesh.triangles[good], mesh.normals)
    used = np.zeros(len(mesh.vertices), dtype=bool)
    used[mesh.triangles.reshape(-1)] = True
    return mesh.subset(used)


def extract_mesh(field, bounds, resolution: int, level: float = 0.5, active_points=None,
                 active_radius: float | None = None, workers: int = 1) -> TriangleMesh:
    """Marching cubes on ``field`` sampled at ``resolution`` nodes per axis.

    With ``active_points`` only the neighbourhood that survives culling at
    ``active_radius`` is evaluated.
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
        raise ValueError("invalid bounds")
    mask = None
    if active_points is not None:
        mask = active_region((lo, hi), resolution, active_points, active_radius)
    vol = sample_volume(field, (lo, hi), resolution, mask, workers=workers)
    return mesh_from_volume(vol, (lo, hi), level, mask)


def cull_mesh(mesh: TriangleMesh, registered_points, radius: float) -> TriangleMesh:
    """Remove vertices farther than ``radius`` from every registered point."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    pts = np.asarray(registered_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or len(mesh.vertices) == 0:
        return TriangleMesh.empty()
    dist, _ = cKDTree(pts).query(mesh.vertices, k=1, distance_upper_bound=np.nextafter(radius, np.inf))
    return mesh.subset(dist <= radius)
