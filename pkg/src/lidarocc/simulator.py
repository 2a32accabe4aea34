"""Synthetic LiDAR over analytic signed-distance scenes.

Used as ground truth: exact occupancy, exact surfaces and exact poses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PoseSE3, so3_exp
from .io import PointCloudFrame
from .mesher import TriangleMesh, extract_mesh

log = logging.getLogger(__name__)

STEP_SAFETY = 0.9
MAX_STEPS = 256
HIT_TOL = 1e-5
# fallback marching step for rays that sphere tracing could not resolve
# (grazing incidence); features thinner than this may be skipped
MIN_MARCH_STEP = 2e-3


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    negate: bool = False

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    negate: bool = False

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Slab:
    """Infinite slab ``|n.p - offset| <= thickness / 2``."""

    normal: tuple
    offset: float
    thickness: float
    negate: bool = False

    def sdf(self, p):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return np.abs(p @ n - self.offset) - 0.5 * self.thickness


PRIMITIVES = {"sphere": Sphere, "box": Box, "slab": Slab}


@dataclass
class AnalyticScene:
    primitives: list
    bounds: tuple  # ((x0, y0, z0), (x1, y1, z1)) region holding the geometry
    name: str = "scene"

    def sdf(self, p) -> np.ndarray:
        pts = np.asarray(p, dtype=np.float64)
        out = np.full(pts.shape[:-1], np.inf)
        for prim in self.primitives:
            d = prim.sdf(pts)
            out = np.minimum(out, -d if prim.negate else d)
        return out

    def occupancy(self, p) -> np.ndarray:
        return (self.sdf(p) <= 0).astype(np.float64)

    def to_dict(self) -> dict:
        prims = []
        for prim in self.primitives:
            kind = next(k for k, cls in PRIMITIVES.items() if isinstance(prim, cls))
            d = {"type": kind}
            for k, v in prim.__dict__.items():
                d[k] = list(v) if isinstance(v, tuple) else v
            prims.append(d)
        return {"name": self.name, "bounds": [list(self.bounds[0]), list(self.bounds[1])], "primitives": prims}

    @classmethod
    def from_dict(cls, d: dict) -> AnalyticScene:
        try:
            prims = []
            for prim in d["primitives"]:
                prim = dict(prim)
                kind = prim.pop("type")
                if kind not in PRIMITIVES:
                    raise ValueError(f"unknown primitive type {kind!r}")
                for k, v in prim.items():
                    if isinstance(v, list):
                        prim[k] = tuple(float(x) for x in v)
                prims.append(PRIMITIVES[kind](**prim))
            lo, hi = d["bounds"]
            bounds = (tuple(float(x) for x in lo), tuple(float(x) for x in hi))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scene description: {exc}") from None
        return cls(prims, bounds, d.get("name", "scene"))


def scene_sdf(scene: AnalyticScene, p):
    d = scene.sdf(np.asarray(p, dtype=np.float64))
    return float(d) if np.ndim(d) == 0 else d


def cast_rays(scene: AnalyticScene, origins, directions, max_range: float) -> np.ndarray:
    """First-hit ranges along unit directions; ``inf`` marks a miss."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.broadcast_to(o, d.shape)
    n = d.shape[0]
    z = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    live = np.ones(n, dtype=bool)
    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        dist = scene.sdf(o[idx] + z[idx, None] * d[idx])
        done = dist <= HIT_TOL
        hit[idx[done]] = True
        live[idx[done]] = False
        step_idx = idx[~done]
        z[step_idx] += STEP_SAFETY * dist[~done]
        gone = z[step_idx] > max_range
        live[step_idx[gone]] = False

    # grazing rays: march with a floor on the step, then bisect the bracket
    idx = np.flatnonzero(live)
    while idx.size:
        p = o[idx] + z[idx, None] * d[idx]
        dist = scene.sdf(p)
        done = dist <= HIT_TOL
        hit[idx[done]] = True
        live[idx[done]] = False
        rest = idx[~done]
        step = np.maximum(STEP_SAFETY * dist[~done], MIN_MARCH_STEP)
        z_next = z[rest] + step
        d_next = scene.sdf(o[rest] + z_next[:, None] * d[rest])
        crossed = d_next <= HIT_TOL
        if np.any(crossed):
            c = rest[crossed]
            a, b = z[c].copy(), z_next[crossed].copy()
            for _ in range(40):
                mid = 0.5 * (a + b)
                inside = scene.sdf(o[c] + mid[:, None] * d[c]) <= HIT_TOL
                b = np.where(inside, mid, b)
                a = np.where(inside, a, mid)
                if np.max(b - a) < 1e-7:
                    break
            z[c] = b
            hit[c] = True
            live[c] = False
        z[rest[~crossed]] = z_next[~crossed]
        out = rest[~crossed][z_next[~crossed] > max_range]
        live[out] = False
        idx = np.flatnonzero(live)
    z[~hit | (z > max_range)] = np.inf
    return z


def cast_ray(scene: AnalyticScene, origin, direction, max_range: float) -> float | None:
    z = cast_rays(scene, np.asarray(origin)[None], np.asarray(direction)[None], max_range)[0]
    return None if not np.isfinite(z) else float(z)


@dataclass(frozen=True)
class ScanPattern:
    n_rays: int = 15000
    range_noise: float = 0.0
    elevation_min_deg: float = -90.0
    elevation_max_deg: float = 90.0
    max_range: float = 100.0

    def __post_init__(self):
        if self.n_rays <= 0:
            raise ValueError("n_rays must be > 0")
        if not self.elevation_min_deg < self.elevation_max_deg:
            raise ValueError("empty elevation range")

    def directions(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform (area-weighted) directions over the elevation band."""
        lo = math.sin(math.radians(self.elevation_min_deg))
        hi = math.sin(math.radians(self.elevation_max_deg))
        sz = rng.uniform(lo, hi, self.n_rays)
        az = rng.uniform(0.0, 2.0 * np.pi, self.n_rays)
        r = np.sqrt(np.clip(1.0 - sz * sz, 0.0, None))
        d = np.stack([r * np.cos(az), r * np.sin(az), sz], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def scan(scene: AnalyticScene, pose: PoseSE3, pattern: ScanPattern, rng: np.random.Generator,
         index: int = 0) -> PointCloudFrame:
    local = pattern.directions(rng)
    world = local @ pose.rotation.T
    z = cast_rays(scene, pose.translation, world, pattern.max_range)
    ok = np.isfinite(z)
    if pattern.range_noise > 0:
        z = z + rng.normal(0.0, pattern.range_noise, size=z.shape)
        ok &= z > 0
    if not np.any(ok):
        log.warning("scan %d: no ray hit the scene", index)
    return PointCloudFrame(local[ok] * z[ok, None], index)


def yaw_pose(position, yaw: float, pitch: float = 0.0) -> PoseSE3:
    r = so3_exp([0.0, 0.0, yaw]) @ so3_exp([0.0, pitch, 0.0])
    return PoseSE3(r, position)


def make_trajectory(kind: str, n_frames: int, scene: AnalyticScene, **kw) -> list[PoseSE3]:
    """Sensor poses inside free space.

    ``orbit``: ``center``, ``radius``, ``height``, ``start_deg``, ``end_deg``
    (sensor yawed toward the centre); ``line``: ``start``, ``end``;
    ``room-walk``: ellipse inside the scene bounds at ``fraction`` of the
    half extents, heading along the path, with a gentle height wave.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in scene.bounds)
    mid = 0.5 * (lo + hi)
    poses = []
    if kind == "orbit":
        c = np.asarray(kw.get("center", mid), dtype=np.float64)
        radius = float(kw.get("radius", 1.5 * np.max(hi - lo)))
        height = float(kw.get("height", c[2]))
        a0 = math.radians(kw.get("start_deg", 0.0))
        a1 = math.radians(kw.get("end_deg", 360.0))
        closed = abs((a1 - a0) - 2 * np.pi) < 1e-12
        denom = n_frames if closed else max(n_frames - 1, 1)
        for i in range(n_frames):
            a = a0 + (a1 - a0) * i / denom
            pos = np.array([c[0] + radius * math.cos(a), c[1] + radius * math.sin(a), height])
            poses.append(yaw_pose(pos, a + np.pi))
    elif kind == "line":
        start = np.asarray(kw.get("start", lo + 0.25 * (hi - lo)), dtype=np.float64)
        end = np.asarray(kw.get("end", hi - 0.25 * (hi - lo)), dtype=np.float64)
        heading = math.atan2(end[1] - start[1], end[0] - start[0])
        for i in range(n_frames):
            s = i / max(n_frames - 1, 1)
            poses.append(yaw_pose(start + s * (end - start), heading))
    elif kind == "room-walk":
        frac = float(kw.get("fraction", 0.4))
        height = float(kw.get("height", mid[2]))
        wave = float(kw.get("height_wave", 0.15))
        half = 0.5 * (hi - lo) * frac
        for i in range(n_frames):
            a = 2.0 * np.pi * i / n_frames
            pos = np.array([mid[0] + half[0] * math.cos(a), mid[1] + half[1] * math.sin(a),
                            height + wave * math.sin(2.0 * a)])
            poses.append(yaw_pose(pos, a + 0.5 * np.pi, pitch=0.1 * math.sin(a)))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    clearance = scene.sdf(np.stack([p.translation for p in poses]))
    if np.any(clearance <= 0.2):
        bad = int(np.argmin(clearance))
        raise ValueError(f"cannot place sensor: pose {bad} has clearance {clearance[bad]:.3f} m")
    return poses


def perturb_poses(poses, rot_bound: float, trans_bound: float, rng: np.random.Generator) -> list[PoseSE3]:
    """Random axis with angle in ``[-rot_bound, rot_bound]``; per-axis translation noise."""
    if rot_bound < 0 or trans_bound < 0:
        raise ValueError("noise bounds must be >= 0")
    out = []
    for p in poses:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-rot_bound, rot_bound)
        dt = rng.uniform(-trans_bound, trans_bound, size=3)
        if rot_bound == 0 and trans_bound == 0:
            out.append(p)
            continue
        out.append(PoseSE3(so3_exp(axis * angle) @ p.rotation, p.translation + dt))
    return out


def ground_truth_mesh(scene: AnalyticScene, resolution: int, bounds=None) -> TriangleMesh:
    """Marching cubes on the scene occupancy.

    The indicator is smoothed into a one-voxel linear ramp around the surface
    so that the 0.5 crossing lands on the zero level set instead of an edge
    midpoint.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in (bounds or scene.bounds))
    if not scene.primitives:
        return TriangleMesh.empty()
    h = float(np.max((hi - lo) / (resolution - 1)))

    def ramp(p):
        return np.clip(0.5 - scene.sdf(p) / h, 0.0, 1.0)

    return extract_mesh(ramp, (lo, hi), resolution)


# --- bundled fixtures ----------------------------------------------------------


@dataclass
class Fixture:
    scene: AnalyticScene
    trajectory: str
    trajectory_args: dict = field(default_factory=dict)
    pattern: ScanPattern = ScanPattern()

    def poses(self, n_frames: int) -> list[PoseSE3]:
        return make_trajectory(self.trajectory, n_frames, self.scene, **self.trajectory_args)


def sphere_fixture() -> Fixture:
    scene = AnalyticScene([Sphere((0.0, 0.0, 0.0), 1.0)], ((-1.3,) * 3, (1.3,) * 3), "sphere")
    return Fixture(scene, "orbit", {"center": (0.0, 0.0, 0.0), "radius": 2.5, "height": 0.5})


def box_room_fixture() -> Fixture:
    prims = [
        Box((0.0, 0.0, 1.25), (2.0, 2.0, 1.25), negate=True),
        Box((1.2, -1.1, 0.4), (0.4, 0.3, 0.4)),
    ]
    scene = AnalyticScene(prims, ((-2.2, -2.2, -0.2), (2.2, 2.2, 2.7)), "box-room")
    return Fixture(scene, "room-walk", {"fraction": 0.4, "height": 1.3})


def two_wall_fixture() -> Fixture:
    prims = [
        Box((2.5, 0.0, 1.0), (0.1, 2.0, 1.0)),  # back wall
        Box((1.6, 0.0, 1.0), (0.05, 0.6, 1.0)),  # thin occluder in front of it
        Box((1.0, 0.0, -0.1), (2.5, 3.0, 0.1)),  # floor
    ]
    scene = AnalyticScene(prims, ((-1.7, -3.2, -0.4), (3.0, 3.2, 2.2)), "two-wall")
    args = {"center": (1.8, 0.0, 0.0), "radius": 1.9, "height": 1.0, "start_deg": 110.0, "end_deg": 250.0}
    return Fixture(scene, "orbit", args)


def corridor_fixture() -> Fixture:
    prims = [Box((0.0, 0.0, 1.25), (10.0, 1.25, 1.25), negate=True)]
    for x in (-6.0, -2.0, 2.0, 6.0):
        prims.append(Box((x, 0.9, 1.25), (0.2, 0.2, 1.25)))
    scene = AnalyticScene(prims, ((-10.2, -1.45, -0.2), (10.2, 1.45, 2.7)), "corridor")
    return Fixture(scene, "line", {"start": (-8.5, -0.4, 1.2), "end": (8.5, -0.4, 1.2)})


FIXTURES = {
    "sphere": sphere_fixture,
    "box-room": box_room_fixture,
    "two-wall": two_wall_fixture,
    "corridor": corridor_fixture,
}


def simulate(fixture: Fixture, n_frames: int, rng: np.random.Generator, pattern: ScanPattern | None = None):
    """Scan a fixture along its trajectory; returns ``(frames, gt_poses)``."""
    pattern = pattern or fixture.pattern
    poses = fixture.poses(n_frames)
    frames = [scan(fixture.scene, p, pattern, rng, index=i) for i, p in enumerate(poses)]
    return frames, poses


def fixture_to_dict(fx: Fixture) -> dict:
    d = fx.scene.to_dict()
    d["trajectory"] = {"kind": fx.trajectory, **{k: list(v) if isinstance(v, tuple) else v
                                                  for k, v in fx.trajectory_args.items()}}
    return d


def fixture_from_dict(d: dict) -> Fixture:
    """Scene document with an optional ``trajectory`` entry (default: orbit)."""
    scene = AnalyticScene.from_dict(d)
    traj = dict(d.get("trajectory", {"kind": "orbit"}))
    kind = traj.pop("kind", "orbit")
    return Fixture(scene, kind, traj)
