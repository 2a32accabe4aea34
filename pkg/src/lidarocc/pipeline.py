"""End-to-end runs: simulate, reconstruct, mesh, evaluate.

Shared by the command line and the acceptance tests so both exercise the
same code path.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import evalsuite, mesher, simulator
from .geometry import transform_point
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger("lidarocc")

DEFAULT_CULL_RADIUS = 0.1
DEFAULT_RESOLUTION = 512
GT_RESOLUTION = 256
NOISE_ROT = 0.05
NOISE_TRANS = 0.1


def seed_streams(seed: int, n: int = 3) -> list[np.random.Generator]:
    """Independent generators for scanning, pose noise and metric sampling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class SimulatedRun:
    scene: simulator.AnalyticScene
    frames: list
    gt_poses: list
    initial_poses: list  # gt poses, or perturbed copies when noise was requested


def simulate(fixture, n_frames: int, n_rays: int, seed: int, range_noise: float = 0.0,
             pose_noise=(0.0, 0.0)) -> SimulatedRun:
    if isinstance(fixture, str):
        if fixture not in simulator.FIXTURES:
            raise ValueError(f"unknown fixture {fixture!r}; choose from {sorted(simulator.FIXTURES)}")
        fixture = simulator.FIXTURES[fixture]()
    scan_rng, noise_rng, _ = seed_streams(seed)
    pattern = replace(fixture.pattern, n_rays=n_rays, range_noise=range_noise)
    frames, gt = simulator.simulate(fixture, n_frames, scan_rng, pattern)
    rot, trans = pose_noise
    init = simulator.perturb_poses(gt, rot, trans, noise_rng) if rot or trans else list(gt)
    return SimulatedRun(fixture.scene, frames, gt, init)


def registered_points(frames, poses) -> np.ndarray:
    pts = [transform_point(p, f.points.astype(np.float64)) for f, p in zip(frames, poses) if len(f.points)]
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def field_bounds(fld):
    enc = fld.encoder
    return np.asarray(enc.bounds_min, dtype=np.float64), np.asarray(enc.bounds_max, dtype=np.float64)


def mesh_field(fld, frames, poses, resolution: int = DEFAULT_RESOLUTION,
               cull_radius: float | None = DEFAULT_CULL_RADIUS, workers: int = 1) -> mesher.TriangleMesh:
    """Extract the 0.5 level set over the field's domain, culled near registered points."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    bounds = field_bounds(fld)
    if cull_radius is None or frames is None:
        return mesher.extract_mesh(fld, bounds, resolution, workers=workers)
    pts = registered_points(frames, poses)
    mesh = mesher.extract_mesh(fld, bounds, resolution, active_points=pts, active_radius=cull_radius,
                               workers=workers)
    return mesher.cull_mesh(mesh, pts, cull_radius)


def evaluate(mesh, gt_mesh, poses=None, gt_poses=None, seed: int = 0,
             n_samples: int = evalsuite.N_SURFACE_SAMPLES, **extra) -> dict:
    """Report for one reconstruction.

    An empty mesh is a result, not an error: its distance metrics are None and
    its F-score is zero, so one collapsed variant does not abort an ablation.
    """
    rng = seed_streams(seed)[2]
    perr = evalsuite.pose_error(poses, gt_poses) if poses is not None else None
    if mesh.is_empty:
        log.warning("reconstructed mesh is empty; distance metrics are undefined")
        report = evalsuite.build_report(None, perr, **extra)
        report.update(chamfer_l1=None, accuracy=None, completeness=None, precision=0.0, recall=0.0,
                      f_score=0.0, n_pred=0)
        return report
    metrics = evalsuite.mesh_metrics(mesh, gt_mesh, rng, n_samples)
    return evalsuite.build_report(metrics, perr, **extra)


@dataclass
class PipelineResult:
    sim: SimulatedRun
    train: TrainResult
    mesh: mesher.TriangleMesh
    gt_mesh: mesher.TriangleMesh
    report: dict
    timings: dict = field(default_factory=dict)


def run_pipeline(fixture, config: TrainConfig, n_frames: int = 20, n_rays: int = 15000, seed: int = 0,
                 pose_noise=(0.0, 0.0), resolution: int = DEFAULT_RESOLUTION,
                 cull_radius: float = DEFAULT_CULL_RADIUS, gt_resolution: int = GT_RESOLUTION,
                 n_samples: int = evalsuite.N_SURFACE_SAMPLES, workers: int = 1, sim: SimulatedRun | None = None,
                 progress=None) -> PipelineResult:
    timings = {}
    t = time.perf_counter()
    if sim is None:
        sim = simulate(fixture, n_frames, n_rays, seed, pose_noise=pose_noise)
    gt_mesh = simulator.ground_truth_mesh(sim.scene, gt_resolution)
    timings["simulate"] = time.perf_counter() - t

    t = time.perf_counter()
    result = train(sim.frames, sim.initial_poses, config, progress=progress)
    timings["reconstruct"] = time.perf_counter() - t

    t = time.perf_counter()
    mesh = mesh_field(result.field, sim.frames, result.poses, resolution, cull_radius, workers)
    timings["mesh"] = time.perf_counter() - t

    t = time.perf_counter()
    report = evaluate(mesh, gt_mesh, result.poses, sim.gt_poses, seed, n_samples,
                      n_keyframes=len(result.keyframes), final_loss=result.loss_history[-1]
                      if result.loss_history else None)
    init_err = evalsuite.pose_error(sim.initial_poses, sim.gt_poses).summary()
    report.update({f"initial_{k}": v for k, v in init_err.items()})
    timings["eval"] = time.perf_counter() - t
    return PipelineResult(sim, result, mesh, gt_mesh, report, timings)
