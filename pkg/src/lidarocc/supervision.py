"""Occlusion-aware direct supervision of the occupancy field along LiDAR rays.

A ray with measured range ``z_i`` is free before the hit and occupied after
it. Behind the hit the occupied label is down-weighted by the probability
that the object is still thicker than the distance travelled, with object
thickness modelled as log-normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .field import NORMAL_GRAD_MIN, NORMAL_STEP, OccupancyField, gradient_from_probes, probe_offsets
from .geometry import DegenerateRayError, PoseSE3, Ray, apply_delta, twist_gradient

PRED_CLAMP = 1e-7
LOSS_MODES = ("direct", "simple-bce", "depth-render")


@dataclass(frozen=True)
class ThicknessPrior:
    mu: float = math.log(0.1)
    sigma: float = 0.8

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


def p_occ(delta, prior: ThicknessPrior):
    """Probability that a point ``delta`` meters behind the hit is still inside matter."""
    d = np.asarray(delta, dtype=np.float64)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("p_occ needs delta >= 0 (points at or behind the hit)")
    out = np.ones_like(d)
    pos = d > 0
    out[pos] = ndtr(-(np.log(d[pos]) - prior.mu) / prior.sigma)
    return float(out) if out.ndim == 0 else out


def direct_loss(pred, z, z_hit, prior: ThicknessPrior | None = ThicknessPrior(), mode: str = "direct"):
    """Per-sample BCE along a ray; returns ``(loss, dloss_dpred)``.

    ``mode="simple-bce"`` (or ``prior=None``) gives every occupied sample
    weight one.
    """
    p = np.asarray(pred, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    z_hit = np.asarray(z_hit, dtype=np.float64)
    z, z_hit, p = np.broadcast_arrays(z, z_hit, p)
    pc = np.clip(p, PRED_CLAMP, 1.0 - PRED_CLAMP)
    unclamped = (p > PRED_CLAMP) & (p < 1.0 - PRED_CLAMP)
    free = z < z_hit
    if mode == "simple-bce" or prior is None:
        weight = np.ones_like(z)
    elif mode in ("direct", "depth-render"):
        weight = np.ones_like(z)
        weight[~free] = p_occ(z[~free] - z_hit[~free], prior)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    loss = np.where(free, -np.log1p(-pc), -weight * np.log(pc))
    grad = np.where(free, 1.0 / (1.0 - pc), -weight / pc) * unclamped
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def normal_loss(n_a, n_b) -> float:
    a = np.asarray(n_a, dtype=np.float64)
    b = np.asarray(n_b, dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("normal_loss expects unit vectors")
    return float(abs(1.0 - a @ b))


def sample_depths(z_hit, m: int, k: int, sigma_s: float, r_min: float, rng: np.random.Generator):
    """``(R, m + k)`` depths: m near-surface normal draws, then k stratified draws.

    Both groups live in ``[r_min, z_hit + 3 sigma_s]``.
    """
    zh = np.atleast_1d(np.asarray(z_hit, dtype=np.float64))
    # ranges equal to r_min survive the inclusive range filter, so accept them
    if np.any(~(zh >= r_min)) or np.any(~(zh > 0)):
        raise DegenerateRayError("ray range must be positive and at least r_min")
    hi = zh + 3.0 * sigma_s
    near = rng.normal(size=(zh.size, m)) * sigma_s + zh[:, None]
    near = np.clip(near, r_min, hi[:, None])
    jitter = rng.uniform(size=(zh.size, k))
    strata = (np.arange(k)[None, :] + jitter) / k
    strat = r_min + (hi - r_min)[:, None] * strata
    return np.concatenate([near, strat], axis=1)


def sample_ray(ray: Ray, m: int, k: int, sigma_s: float, r_min: float, rng: np.random.Generator):
    return sample_depths(ray.depth, m, k, sigma_s, r_min, rng)[0]


def random_offsets(n: int, max_radius: float, rng: np.random.Generator) -> np.ndarray:
    """Isotropic offsets with length uniform in ``(0, max_radius]``."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = max_radius * (1.0 - rng.uniform(size=n))
    return d * r[:, None]


@dataclass
class SampleBatch:
    frame_ids: np.ndarray  # (R,) index into the pose list
    points_local: np.ndarray  # (R, 3) sensor-frame hit points
    depths: np.ndarray  # (R, m + k)
    normal_offsets: np.ndarray  # (R, 3) world-frame neighbour offsets

    def __post_init__(self):
        r = len(self.frame_ids)
        if r == 0:
            raise ValueError("empty sample batch")
        if self.points_local.shape != (r, 3) or self.depths.shape[0] != r:
            raise ValueError("inconsistent batch shapes")
        if self.normal_offsets.shape != (r, 3):
            raise ValueError("normal_offsets must be (R, 3)")
        if np.any(self.depths <= 0):
            raise ValueError("sample depths must be positive")

    @property
    def n_rays(self) -> int:
        return len(self.frame_ids)

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points_local, axis=1)


def render_depth(occ: np.ndarray, z: np.ndarray):
    """Occupancy volume rendering along sorted samples.

    Returns the expected depth and its derivative w.r.t. each occupancy.
    """
    o = np.asarray(occ, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    trans = np.cumprod(np.concatenate([np.ones(o.shape[:-1] + (1,)), 1.0 - o[..., :-1]], axis=-1), axis=-1)
    w = o * trans
    z_hat = (w * z).sum(axis=-1)
    # tail[j] = depth contribution of samples after j, measured from j's transmittance
    tail = np.zeros_like(o)
    for j in range(o.shape[-1] - 2, -1, -1):
        tail[..., j] = o[..., j + 1] * z[..., j + 1] + (1.0 - o[..., j + 1]) * tail[..., j + 1]
    return z_hat, trans * (z - tail)


def depth_render_loss(field: OccupancyField, ray: Ray, samples):
    """Squared error between rendered and measured depth; ``(loss, grads)``."""
    z = np.asarray(samples, dtype=np.float64)
    if np.any(np.diff(z) < 0):
        raise ValueError("samples must be sorted ascending")
    occ, cache = field.forward(ray.point(z))
    z_hat, dz = render_depth(occ, z)
    err = z_hat - ray.depth
    grads, _ = field.backward(cache, 2.0 * err * dz, need_position=False)
    return float(err * err), grads


@dataclass
class LossResult:
    loss: float
    field_grads: dict
    twist_grads: np.ndarray  # (n_frames, 6)
    data_term: float  # mean over rays of the per-ray data loss (before lambda_d)
    normal_term: float  # mean over rays of the normal loss (before lambda_n)


def total_loss(
    field: OccupancyField,
    initial_poses: list[PoseSE3],
    twists: np.ndarray,
    batch: SampleBatch,
    lambda_d: float = 1.0,
    lambda_n: float = 0.4,
    prior: ThicknessPrior = ThicknessPrior(),
    mode: str = "direct",
    normal_step: float = NORMAL_STEP,
    g_min: float = NORMAL_GRAD_MIN,
    need_twist_grads: bool = True,
) -> LossResult:
    """Batch objective and its gradients w.r.t. field parameters and twists.

    Frame ``f`` sits at ``apply_delta(initial_poses[f], twists[f])``.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    if lambda_d < 0 or lambda_n < 0:
        raise ValueError("loss weights must be >= 0")
    n_frames = len(initial_poses)
    twists = np.asarray(twists, dtype=np.float64).reshape(n_frames, 6)
    poses = [apply_delta(p, t) for p, t in zip(initial_poses, twists)]
    rot = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])

    fid = batch.frame_ids
    n_rays = batch.n_rays
    z_hit = batch.ranges
    n_samples = batch.depths.shape[1]
    dirs = np.einsum("rij,rj->ri", rot[fid], batch.points_local / z_hit[:, None])
    origins = trans[fid]
    hits = origins + z_hit[:, None] * dirs
    samples = origins[:, None, :] + batch.depths[..., None] * dirs[:, None, :]

    use_normals = lambda_n > 0
    pts = [samples.reshape(-1, 3)]
    if use_normals:
        off = probe_offsets(normal_step)
        probes_a = hits[:, None, :] + off[None]
        probes_b = (hits + batch.normal_offsets)[:, None, :] + off[None]
        pts += [probes_a.reshape(-1, 3), probes_b.reshape(-1, 3)]
    all_pts = np.concatenate(pts, axis=0)

    occ, cache = field.forward(all_pts)
    occ64 = occ.astype(np.float64)
    d_occ = np.zeros_like(occ64)
    n_s = n_rays * n_samples
    o_s = occ64[:n_s].reshape(n_rays, n_samples)

    if mode == "depth-render":
        order = np.argsort(batch.depths, axis=1, kind="stable")
        z_sorted = np.take_along_axis(batch.depths, order, axis=1)
        o_sorted = np.take_along_axis(o_s, order, axis=1)
        z_hat, dz = render_depth(o_sorted, z_sorted)
        err = z_hat - z_hit
        per_ray = err * err
        g_sorted = (lambda_d / n_rays) * (2.0 * err)[:, None] * dz
        g = np.empty_like(g_sorted)
        np.put_along_axis(g, order, g_sorted, axis=1)
    else:
        ld, dld = direct_loss(o_s, batch.depths, z_hit[:, None], prior, mode)
        per_ray = ld.mean(axis=1)
        g = (lambda_d / (n_rays * n_samples)) * dld
    d_occ[:n_s] = g.reshape(-1)
    data_term = float(per_ray.mean())

    normal_term = 0.0
    if use_normals:
        va = occ64[n_s:n_s + 6 * n_rays].reshape(n_rays, 6)
        vb = occ64[n_s + 6 * n_rays:].reshape(n_rays, 6)
        ga = gradient_from_probes(va, normal_step)
        gb = gradient_from_probes(vb, normal_step)
        na_len = np.linalg.norm(ga, axis=1)
        nb_len = np.linalg.norm(gb, axis=1)
        valid = (na_len >= g_min) & (nb_len >= g_min)
        ln = np.zeros(n_rays)
        dva = np.zeros((n_rays, 6))
        dvb = np.zeros((n_rays, 6))
        if np.any(valid):
            na = ga[valid] / na_len[valid, None]
            nb = gb[valid] / nb_len[valid, None]
            dot = np.einsum("ri,ri->r", na, nb)
            ln[valid] = np.abs(1.0 - dot)
            sgn = np.where(1.0 - dot >= 0, 1.0, -1.0)
            scale = lambda_n / n_rays
            # d|1 - na.nb| / dg_a = -sgn (I - na na^T) nb / |g_a|
            dna = -sgn[:, None] * nb
            dnb = -sgn[:, None] * na
            dga = (dna - np.einsum("ri,ri->r", dna, na)[:, None] * na) / na_len[valid, None]
            dgb = (dnb - np.einsum("ri,ri->r", dnb, nb)[:, None] * nb) / nb_len[valid, None]
            for grad_g, dv in ((dga, dva), (dgb, dvb)):
                block = np.zeros((valid.sum(), 6))
                block[:, 0::2] = grad_g / (2.0 * normal_step)
                block[:, 1::2] = -grad_g / (2.0 * normal_step)
                dv[valid] = scale * block
        d_occ[n_s:n_s + 6 * n_rays] = dva.reshape(-1)
        d_occ[n_s + 6 * n_rays:] = dvb.reshape(-1)
        normal_term = float(ln.mean())
        per_ray = lambda_d * per_ray + lambda_n * ln
    else:
        per_ray = lambda_d * per_ray

    loss = float(per_ray.mean())
    grads, pos_grad = field.backward(cache, d_occ, need_position=need_twist_grads)

    twist_grads = np.zeros((n_frames, 6))
    if need_twist_grads:
        # every evaluated point is rigidly attached to its frame; probe offsets
        # are constant world-space shifts of the surface point
        anchors = [samples.reshape(-1, 3)]
        owners = [np.repeat(fid, n_samples)]
        if use_normals:
            anchors += [np.repeat(hits, 6, axis=0)] * 2
            owners += [np.repeat(fid, 6)] * 2
        anchors = np.concatenate(anchors, axis=0)
        owners = np.concatenate(owners)
        pg = pos_grad.astype(np.float64)
        for f in np.unique(owners):
            sel = owners == f
            twist_grads[f] = twist_gradient(twists[f], anchors[sel], pg[sel])
    return LossResult(loss, grads, twist_grads, data_term, normal_term)
