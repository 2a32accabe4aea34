from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from lidarocc.mesher import TriangleMesh, active_region, cull_mesh, extract_mesh, sample_volume

BOUNDS = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))


def sphere_field(p):
    return expit(10.0 * (1.0 - np.linalg.norm(p, axis=1)))


def voxel(res, bounds=BOUNDS):
    return (bounds[1][0] - bounds[0][0]) / (res - 1)


def test_sphere_vertices_near_unit_radius():
    mesh = extract_mesh(sphere_field, BOUNDS, 64)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 1).max() < 2 * voxel(64)
    assert mesh.area() == pytest.approx(4 * np.pi, rel=0.05)
    assert np.abs(sphere_field(mesh.vertices) - 0.5).max() <= 0.15


def test_vertices_within_bounds_and_valid():
    mesh = extract_mesh(sphere_field, BOUNDS, 32)
    assert np.all(mesh.vertices >= -1.5 - 1e-12) and np.all(mesh.vertices <= 1.5 + 1e-12)
    assert mesh.triangles.max() < len(mesh.vertices)
    assert np.all(mesh.triangle_areas() > 1e-12)


def test_sphere_mesh_is_closed():
    mesh = extract_mesh(sphere_field, BOUNDS, 32)
    edges = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_constant_field_gives_empty_mesh():
    mesh = extract_mesh(lambda p: np.full(len(p), 0.9), BOUNDS, 16)
    assert mesh.is_empty and len(mesh.vertices) == 0


def test_half_space_gives_plane():
    x0 = 0.237

    def field(p):
        return expit(5.0 * (x0 - p[:, 0]))

    res = 40
    mesh = extract_mesh(field, BOUNDS, res)
    assert np.abs(mesh.vertices[:, 0] - x0).max() < voxel(res)
    assert mesh.area() == pytest.approx(9.0, rel=1e-6)


def test_resolution_and_bounds_validated():
    with pytest.raises(ValueError):
        extract_mesh(sphere_field, BOUNDS, 1)
    with pytest.raises(ValueError):
        extract_mesh(sphere_field, ((0, 0, 0), (0, 1, 1)), 8)


def test_sample_volume_independent_of_workers():
    a = sample_volume(sphere_field, BOUNDS, 33, chunk=1000, workers=1)
    b = sample_volume(sphere_field, BOUNDS, 33, chunk=1000, workers=4)
    assert a.tobytes() == b.tobytes()


def test_active_region_matches_full_extraction_after_culling():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(400, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cap = d[d[:, 2] > 0.3]
    full = cull_mesh(extract_mesh(sphere_field, BOUNDS, 48), cap, 0.1)
    masked = cull_mesh(extract_mesh(sphere_field, BOUNDS, 48, active_points=cap, active_radius=0.1), cap, 0.1)
    assert np.allclose(np.sort(full.vertices, axis=0), np.sort(masked.vertices, axis=0))
    assert len(full.triangles) == len(masked.triangles)
    mask = active_region(BOUNDS, 48, cap, 0.1)
    assert mask.any() and not mask.all()


def test_cull_examples():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    mesh = TriangleMesh(v, [[0, 1, 2]])
    same = cull_mesh(mesh, v, 0.1)
    assert np.array_equal(same.vertices, v) and np.array_equal(same.triangles, mesh.triangles)
    one = cull_mesh(TriangleMesh([[1.0, 0, 0]], np.zeros((0, 3))), [[0.0, 0, 0]], 0.1)
    assert len(one.vertices) == 0
    assert cull_mesh(mesh, np.zeros((0, 3)), 0.1).is_empty
    with pytest.raises(ValueError):
        cull_mesh(mesh, v, 0.0)


def test_cull_matches_brute_force_and_is_idempotent():
    rng = np.random.default_rng(1)
    for _ in range(5):
        verts = rng.uniform(-1, 1, (300, 3))
        tris = rng.integers(0, 300, (500, 3))
        cloud = rng.uniform(-1, 1, (200, 3))
        mesh = TriangleMesh(verts, tris)
        out = cull_mesh(mesh, cloud, 0.2)
        nearest = np.array([np.min(np.sqrt(((cloud - v) ** 2).sum(axis=1))) for v in verts])
        keep = nearest <= 0.2
        assert np.array_equal(out.vertices, verts[keep])
        tri_keep = keep[tris].all(axis=1)
        assert len(out.triangles) == tri_keep.sum()
        remap = np.cumsum(keep) - 1
        assert np.array_equal(out.triangles, remap[tris[tri_keep]])
        again = cull_mesh(out, cloud, 0.2)
        assert np.array_equal(again.vertices, out.vertices) and np.array_equal(again.triangles, out.triangles)


def test_mesh_rejects_dangling_indices():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])
