"""Joint optimisation of the occupancy field and per-keyframe pose twists."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from numba import njit

from .encoder import HashGridConfig
from .field import OccupancyField
from .geometry import PoseSE3, apply_delta, rotation_angle, transform_point
from .io import PointCloudFrame
from .supervision import LOSS_MODES, SampleBatch, ThicknessPrior, random_offsets, sample_depths, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LOCCKPT\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 300
    lr_field: float = 1e-3
    lr_pose: float = 1e-3
    lr_pose_late: float = 1e-4
    lr_pose_drop_iteration: int = 150
    lambda_d: float = 1.0
    lambda_n: float = 0.4
    rays_per_frame: int = 100
    normal_samples: int = 32
    stratified_samples: int = 8
    sigma_s: float = 0.3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    keyframe_translation: float = 0.1
    keyframe_rotation_deg: float = 5.0
    r_min: float = 0.3
    r_max: float = 100.0
    loss_mode: str = "direct"
    pose_refine: bool = True
    frames_per_batch: int = 8
    prior_mu: float = math.log(0.1)
    prior_sigma: float = 0.8
    normal_offset: float = 0.05
    normal_step: float = 1e-2
    divergence_factor: float = 1e3
    levels: int = 16
    features_per_level: int = 2
    log2_table_size: int = 19
    base_resolution: int = 16
    max_resolution: int = 2048
    aux_octaves: int = 4
    hidden: tuple = (64, 64)
    bounds_min: tuple | None = None
    bounds_max: tuple | None = None
    bounds_margin: float = 0.5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.bounds_min is not None:
            self.bounds_min = tuple(float(v) for v in self.bounds_min)
        if self.bounds_max is not None:
            self.bounds_max = tuple(float(v) for v in self.bounds_max)
        for name in ("lr_field", "lr_pose", "lr_pose_late", "sigma_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("rays_per_frame", "normal_samples", "stratified_samples", "frames_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    @property
    def prior(self) -> ThicknessPrior:
        return ThicknessPrior(self.prior_mu, self.prior_sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        for k in ("bounds_min", "bounds_max"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def encoder_config(self, bounds_min, bounds_max) -> HashGridConfig:
        return HashGridConfig(
            levels=self.levels,
            features_per_level=self.features_per_level,
            table_size=2**self.log2_table_size,
            base_resolution=self.base_resolution,
            max_resolution=self.max_resolution,
            bounds_min=tuple(bounds_min),
            bounds_max=tuple(bounds_max),
            aux_octaves=self.aux_octaves,
        )


def select_keyframes(initial_poses, rot_thresh: float, trans_thresh: float) -> list[int]:
    """Greedy viewpoint-change filter; ``rot_thresh`` in radians."""
    if len(initial_poses) == 0:
        raise ValueError("no frames to select from")
    keep = [0]
    last = initial_poses[0]
    for i, pose in enumerate(initial_poses[1:], start=1):
        d_rot = rotation_angle(last.rotation.T @ pose.rotation)
        d_trans = np.linalg.norm(pose.translation - last.translation)
        if d_rot > rot_thresh or d_trans > trans_thresh:
            keep.append(i)
            last = pose
    return keep


def filter_points(frame: PointCloudFrame, r_min: float, r_max: float) -> PointCloudFrame:
    p = frame.points
    finite = np.all(np.isfinite(p), axis=1)
    rng_ = np.linalg.norm(np.where(finite[:, None], p, 0.0).astype(np.float64), axis=1)
    keep = finite & (rng_ >= r_min) & (rng_ <= r_max)
    return PointCloudFrame(p[keep], frame.index)


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    pf = p.reshape(-1)
    gf = g.reshape(-1)
    mf = m.reshape(-1)
    vf = v.reshape(-1)
    for i in range(pf.size):
        gi = np.float64(gf[i])
        mi = beta1 * np.float64(mf[i]) + (1.0 - beta1) * gi
        vi = beta2 * np.float64(vf[i]) + (1.0 - beta2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] = pf[i] - lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


def adam_step(param, grad, m, v, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """Bias-corrected ADAM update, applied in place; returns ``(param, m, v)``."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ValueError(f"shape mismatch: {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    if t < 1:
        raise ValueError("ADAM step counter starts at 1")
    for a in (param, m, v):
        if not a.flags.c_contiguous:
            raise ValueError("ADAM state must be C-contiguous")
    g = np.ascontiguousarray(grad, dtype=param.dtype)
    _adam_kernel(param, g, m, v, lr, beta1, beta2, eps, 1.0 - beta1**t, 1.0 - beta2**t)
    return param, m, v


@dataclass
class TrainState:
    field: OccupancyField
    twists: np.ndarray  # (K, 6) float32
    moments: dict  # name -> (m, v)
    iteration: int
    loss_history: list
    rng: np.random.Generator
    keyframes: list
    initial_poses: list  # keyframe initial poses
    config: TrainConfig

    def refined_poses(self) -> list[PoseSE3]:
        out = []
        for pose, tw in zip(self.initial_poses, self.twists):
            out.append(pose if not np.any(tw) else apply_delta(pose, tw.astype(np.float64)))
        return out


def _auto_bounds(frames, poses, margin):
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for fr, pose in zip(frames, poses):
        w = transform_point(pose, fr.points.astype(np.float64))
        lo = np.minimum(lo, w.min(axis=0))
        hi = np.maximum(hi, w.max(axis=0))
        lo = np.minimum(lo, pose.translation)
        hi = np.maximum(hi, pose.translation)
    return lo - margin, hi + margin


def prepare_frames(frames, initial_poses, config: TrainConfig):
    """Filter points, drop empty frames and select keyframes.

    Returns ``(keyframe_indices, filtered_keyframes)``.
    """
    if len(frames) != len(initial_poses):
        raise ValueError(f"{len(frames)} frames but {len(initial_poses)} poses")
    filtered = [filter_points(f, config.r_min, config.r_max) for f in frames]
    usable = [i for i, f in enumerate(filtered) if len(f.points) > 0]
    for i in set(range(len(frames))) - set(usable):
        log.warning("frame %d has no points after range filtering; dropped", i)
    if not usable:
        raise ValueError("no usable frames after filtering")
    sel = select_keyframes(
        [initial_poses[i] for i in usable],
        math.radians(config.keyframe_rotation_deg),
        config.keyframe_translation,
    )
    keyframes = [usable[i] for i in sel]
    return keyframes, [filtered[i] for i in keyframes]


def init_state(frames, initial_poses, config: TrainConfig) -> tuple[TrainState, list]:
    keyframes, kf_frames = prepare_frames(frames, initial_poses, config)
    kf_poses = [initial_poses[i] for i in keyframes]
    rng = np.random.default_rng(config.seed)
    if config.bounds_min is not None and config.bounds_max is not None:
        lo, hi = config.bounds_min, config.bounds_max
    else:
        lo, hi = _auto_bounds(kf_frames, kf_poses, config.bounds_margin)
    enc = config.encoder_config(lo, hi)
    fld = OccupancyField.create(enc, rng, hidden=config.hidden, dtype=np.float32)
    twists = np.zeros((len(keyframes), 6), dtype=np.float32)
    moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in fld.params.items()}
    moments["twists"] = (np.zeros_like(twists), np.zeros_like(twists))
    state = TrainState(fld, twists, moments, 0, [], rng, keyframes, kf_poses, config)
    return state, kf_frames


class Trainer:
    """Stateful training loop; ``step()`` runs one batch update."""

    def __init__(self, frames, initial_poses, config: TrainConfig, state: TrainState | None = None,
                 diagnostic_path=None):
        self.config = config
        self.diagnostic_path = diagnostic_path
        if state is None:
            self.state, self.frames = init_state(frames, initial_poses, config)
        else:
            keyframes, kf_frames = prepare_frames(frames, initial_poses, config)
            if keyframes != state.keyframes:
                raise CheckpointError("checkpoint keyframes do not match the input frames")
            self.state, self.frames = state, kf_frames
        self._points = [f.points.astype(np.float64) for f in self.frames]

    def sample_batch(self) -> SampleBatch:
        cfg = self.config
        rng = self.state.rng
        n_kf = len(self.frames)
        chosen = np.sort(rng.choice(n_kf, size=min(cfg.frames_per_batch, n_kf), replace=False))
        ids, pts = [], []
        for f in chosen:
            n_pts = len(self._points[f])
            rows = rng.choice(n_pts, size=cfg.rays_per_frame, replace=n_pts < cfg.rays_per_frame)
            ids.append(np.full(cfg.rays_per_frame, f))
            pts.append(self._points[f][rows])
        ids = np.concatenate(ids)
        pts = np.concatenate(pts)
        depths = sample_depths(
            np.linalg.norm(pts, axis=1), cfg.normal_samples, cfg.stratified_samples,
            cfg.sigma_s, cfg.r_min, rng,
        )
        offsets = random_offsets(len(ids), cfg.normal_offset, rng)
        return SampleBatch(ids, pts, depths, offsets)

    def pose_lr(self, iteration: int) -> float:
        cfg = self.config
        return cfg.lr_pose if iteration < cfg.lr_pose_drop_iteration else cfg.lr_pose_late

    def step(self) -> float:
        cfg = self.config
        st = self.state
        batch = self.sample_batch()
        res = total_loss(
            st.field, st.initial_poses, st.twists, batch,
            lambda_d=cfg.lambda_d, lambda_n=cfg.lambda_n, prior=cfg.prior, mode=cfg.loss_mode,
            normal_step=cfg.normal_step, need_twist_grads=cfg.pose_refine,
        )
        initial = st.loss_history[0] if st.loss_history else res.loss
        if not math.isfinite(res.loss) or res.loss > cfg.divergence_factor * initial:
            if self.diagnostic_path is not None:
                save_checkpoint(st, self.diagnostic_path)
            raise TrainingDiverged(
                f"loss {res.loss!r} at iteration {st.iteration} (initial {initial!r})"
            )
        t = st.iteration + 1
        adam = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps, t=t)
        for name, param in st.field.params.items():
            m, v = st.moments[name]
            adam_step(param, res.field_grads[name], m, v, cfg.lr_field, **adam)
        if cfg.pose_refine:
            m, v = st.moments["twists"]
            adam_step(st.twists, res.twist_grads, m, v, self.pose_lr(st.iteration), **adam)
        st.iteration = t
        st.loss_history.append(res.loss)
        return res.loss

    def run(self, until: int | None = None, progress=None) -> TrainState:
        until = self.config.iterations if until is None else until
        while self.state.iteration < until:
            loss = self.step()
            if progress is not None:
                progress(self.state.iteration, loss)
        return self.state


@dataclass
class TrainResult:
    field: OccupancyField
    poses: list  # refined pose for every input frame
    loss_history: list
    keyframes: list
    state: TrainState = field(repr=False)


def propagate_poses(initial_poses, keyframes, twists) -> list[PoseSE3]:
    """Refined poses for all frames; non-keyframes inherit the preceding keyframe's twist."""
    out = []
    k = -1
    for i, pose in enumerate(initial_poses):
        while k + 1 < len(keyframes) and keyframes[k + 1] <= i:
            k += 1
        tw = twists[max(k, 0)].astype(np.float64)
        out.append(pose if not np.any(tw) else apply_delta(pose, tw))
    return out


def train(frames, initial_poses, config: TrainConfig, progress=None, diagnostic_path=None) -> TrainResult:
    trainer = Trainer(frames, initial_poses, config, diagnostic_path=diagnostic_path)
    st = trainer.run(progress=progress)
    poses = propagate_poses(initial_poses, st.keyframes, st.twists)
    return TrainResult(st.field, poses, list(st.loss_history), list(st.keyframes), st)


def _blob_order(state: TrainState):
    names = list(state.field.params)
    out = [(f"param/{n}", state.field.params[n]) for n in names]
    out.append(("twists", state.twists))
    for n in names + ["twists"]:
        m, v = state.moments[n]
        out.append((f"adam_m/{n}", m))
        out.append((f"adam_v/{n}", v))
    return out


def save_checkpoint(state: TrainState, path) -> None:
    blobs = _blob_order(state)
    header = {
        "format": "lidarocc-checkpoint",
        "config": state.config.to_dict(),
        "encoder": state.field.encoder.to_dict(),
        "hidden": list(state.field.hidden),
        "iteration": state.iteration,
        "loss_history": [float(x) for x in state.loss_history],
        "rng_state": state.rng.bit_generator.state,
        "keyframes": [int(k) for k in state.keyframes],
        "initial_poses": [p.matrix()[:3].reshape(-1).tolist() for p in state.initial_poses],
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in blobs],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<II", CHECKPOINT_VERSION, len(head))
    body += head
    for _, arr in blobs:
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + 8
    if len(data) < fixed + 4:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, head_len = struct.unpack_from("<II", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch)")
    try:
        header = json.loads(data[fixed:fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from None
    offset = fixed + head_len
    arrays = {}
    for b in header["blobs"]:
        n = int(np.prod(b["shape"], dtype=np.int64))
        if offset + 4 * n > len(data) - 4:
            raise CheckpointError(f"{path}: truncated blob {b['name']}")
        arrays[b["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(b["shape"]).astype(np.float32)
        offset += 4 * n
    if offset != len(data) - 4:
        raise CheckpointError(f"{path}: trailing bytes after blobs")

    config = TrainConfig.from_dict(header["config"])
    enc = HashGridConfig(**header["encoder"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    fld = OccupancyField(enc, params)
    moments = {n: (arrays[f"adam_m/{n}"], arrays[f"adam_v/{n}"]) for n in list(params) + ["twists"]}
    bitgen = np.random.PCG64()
    bitgen.state = header["rng_state"]
    poses = []
    for row in header["initial_poses"]:
        m = np.asarray(row, dtype=np.float64).reshape(3, 4)
        poses.append(PoseSE3(m[:, :3], m[:, 3]))
    return TrainState(
        fld, arrays["twists"], moments, int(header["iteration"]),
        [float(x) for x in header["loss_history"]], np.random.Generator(bitgen),
        [int(k) for k in header["keyframes"]], poses, config,
    )
