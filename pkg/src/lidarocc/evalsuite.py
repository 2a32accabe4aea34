"""Reconstruction and pose metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import compose, inverse, rotation_angle
from .mesher import TriangleMesh

F_THRESHOLD = 0.05
N_SURFACE_SAMPLES = 100_000


class DegenerateMeshError(ValueError):
    pass


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the triangles."""
    if mesh.is_empty:
        raise DegenerateMeshError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = math.fsum(areas)
    if not total > 0:
        raise DegenerateMeshError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


@dataclass(frozen=True)
class MeshMetrics:
    chamfer_l1: float
    accuracy: float  # mean distance reconstruction -> reference
    completeness: float  # mean distance reference -> reconstruction
    precision: float
    recall: float
    f_score: float
    threshold: float
    n_pred: int
    n_gt: int


def nearest_distances(src, dst) -> np.ndarray:
    dst = np.asarray(dst, dtype=np.float64)
    if len(dst) == 0:
        return np.full(len(src), np.inf)
    d, _ = cKDTree(dst).query(np.asarray(src, dtype=np.float64), k=1)
    return d


def point_metrics(recon, ref, threshold: float = F_THRESHOLD) -> MeshMetrics:
    """Chamfer-L1 and F-score between two point sets.

    Sums use exactly rounded accumulation so that swapping the arguments
    gives the same Chamfer value bit for bit.
    """
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    recon = np.asarray(recon, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if len(recon) == 0 or len(ref) == 0:
        raise DegenerateMeshError("empty point set")
    d_rp = nearest_distances(recon, ref)
    d_pr = nearest_distances(ref, recon)
    acc = math.fsum(d_rp) / len(d_rp)
    comp = math.fsum(d_pr) / len(d_pr)
    precision = float(np.count_nonzero(d_rp < threshold)) / len(d_rp)
    recall = float(np.count_nonzero(d_pr < threshold)) / len(d_pr)
    f = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return MeshMetrics(0.5 * (acc + comp), acc, comp, precision, recall, f, float(threshold), len(recon), len(ref))


def chamfer_l1(a, b) -> float:
    return point_metrics(a, b).chamfer_l1


def f_score(a, b, threshold: float = F_THRESHOLD) -> float:
    return point_metrics(a, b, threshold).f_score


def mesh_metrics(recon: TriangleMesh, reference: TriangleMesh, rng: np.random.Generator,
                 n_samples: int = N_SURFACE_SAMPLES, threshold: float = F_THRESHOLD) -> MeshMetrics:
    if recon.is_empty:
        raise DegenerateMeshError("reconstructed mesh is empty")
    if reference.is_empty:
        raise DegenerateMeshError("reference mesh is empty")
    a = sample_surface(recon, n_samples, rng)
    b = sample_surface(reference, n_samples, rng)
    return point_metrics(a, b, threshold)


@dataclass(frozen=True)
class PoseErrors:
    rotation_deg: np.ndarray
    translation: np.ndarray

    @property
    def median_rotation_deg(self) -> float:
        return float(np.median(self.rotation_deg))

    @property
    def median_translation(self) -> float:
        return float(np.median(self.translation))

    def summary(self) -> dict:
        return {
            "rot_err_mean_deg": float(np.mean(self.rotation_deg)),
            "rot_err_median_deg": self.median_rotation_deg,
            "trans_err_mean_m": float(np.mean(self.translation)),
            "trans_err_median_m": self.median_translation,
        }


def pose_error(estimated, ground_truth) -> PoseErrors:
    """Per-frame geodesic rotation (degrees) and translation errors.

    Both trajectories are expressed in the coordinates of the first
    ground-truth frame, so that frame sits at the identity. One common rigid
    transform is applied to both sides, which leaves the errors unchanged but
    makes the reported positions comparable across runs.
    """
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}")
    if not estimated:
        raise ValueError("empty trajectory")
    g0 = inverse(ground_truth[0])
    rot, trans = [], []
    for e, g in zip(estimated, ground_truth):
        er, gr = compose(g0, e), compose(g0, g)
        rot.append(math.degrees(rotation_angle(er.rotation @ gr.rotation.T)))
        trans.append(float(np.linalg.norm(er.translation - gr.translation)))
    return PoseErrors(np.array(rot), np.array(trans))


def build_report(metrics: MeshMetrics | None, pose: PoseErrors | None = None, **extra) -> dict:
    """Flat key-value report for one run."""
    report = dict(extra)
    if metrics is not None:
        report.update(asdict(metrics))
    if pose is not None:
        report.update(pose.summary())
    return report


def write_report(path, report: dict, sort_keys: bool = True) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=sort_keys)
        fh.write("\n")


TABLE_COLUMNS = ("chamfer_l1", "accuracy", "completeness", "f_score", "rot_err_median_deg", "trans_err_median_m")


def format_table(rows: dict, columns=TABLE_COLUMNS) -> str:
    """Plain-text table: one row per run name, one column per metric."""
    width = max([len(k) for k in rows] + [8])
    lines = [f"{'run':<{width}}  " + "  ".join(f"{c:>18}" for c in columns)]
    for name, rep in rows.items():
        cells = [f"{rep[c]:18.5f}" if rep.get(c) is not None else f"{'-':>18}" for c in columns]
        lines.append(f"{name:<{width}}  " + "  ".join(cells))
    return "\n".join(lines)
