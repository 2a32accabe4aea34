"""Multi-resolution hash-grid encoding with exact backward pass.

Each level stores a ``(T, F)`` feature table. Grid vertices are addressed
directly when the dense vertex grid fits in ``T`` entries and through the
XOR-prime spatial hash otherwise. A fixed sinusoidal encoding of the
normalised coordinate is appended to the concatenated level features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .geometry import InvalidInputError

PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size: int = 2**19
    base_resolution: int = 16
    max_resolution: int = 2048
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    aux_octaves: int = 4

    def __post_init__(self):
        object.__setattr__(self, "bounds_min", tuple(float(v) for v in self.bounds_min))
        object.__setattr__(self, "bounds_max", tuple(float(v) for v in self.bounds_max))
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError(f"table_size must be a power of two, got {t}")
        if not 1 <= self.base_resolution <= self.max_resolution:
            raise ValueError("need 1 <= base_resolution <= max_resolution")
        if len(self.bounds_min) != 3 or len(self.bounds_max) != 3:
            raise ValueError("bounds must be 3-vectors")
        if not all(hi > lo for lo, hi in zip(self.bounds_min, self.bounds_max)):
            raise ValueError("empty bounds")
        if self.aux_octaves < 0:
            raise ValueError("aux_octaves must be >= 0")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1)
        )

    @property
    def resolutions(self) -> list[int]:
        g = self.growth
        return [int(math.floor(self.base_resolution * g**lvl)) for lvl in range(self.levels)]

    def is_hashed(self, level: int) -> bool:
        return (self.resolutions[level] + 1) ** 3 > self.table_size

    @property
    def aux_dim(self) -> int:
        return 3 + 6 * self.aux_octaves

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level + self.aux_dim

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.bounds_min)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.bounds_max) - np.array(self.bounds_min)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds_min"] = list(self.bounds_min)
        d["bounds_max"] = list(self.bounds_max)
        return d


def init_tables(config: HashGridConfig, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    shape = (config.levels, config.table_size, config.features_per_level)
    return rng.uniform(-1e-4, 1e-4, size=shape).astype(dtype)


def spatial_hash(cells: np.ndarray, table_size: int) -> np.ndarray:
    c = np.asarray(cells, dtype=np.uint64)
    h = c[..., 0] * np.uint64(PRIMES[0])
    h ^= c[..., 1] * np.uint64(PRIMES[1])
    h ^= c[..., 2] * np.uint64(PRIMES[2])
    # T divides 2**32, so masking equals the uint32 wrap followed by mod T
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def _level_index(cells: np.ndarray, level: int, config: HashGridConfig) -> np.ndarray:
    if config.is_hashed(level):
        return spatial_hash(cells, config.table_size)
    n1 = config.resolutions[level] + 1
    return cells[..., 0] + n1 * (cells[..., 1] + n1 * cells[..., 2])


def hash_index(cell, level: int, config: HashGridConfig) -> int:
    """Table index of an integer grid vertex at ``level``."""
    c = np.asarray(cell, dtype=np.int64).reshape(1, 3)
    n = config.resolutions[level]
    if np.any(c < 0) or np.any(c > n):
        raise ValueError(f"cell {cell} outside level {level} grid (0..{n})")
    return int(_level_index(c, level, config)[0])


@dataclass
class EncodeCache:
    points: np.ndarray
    u: np.ndarray  # clamped normalised coordinate in [0, 1]
    inside: np.ndarray  # (N, 3) bool, False where the axis was clamped


def normalize(points, config: HashGridConfig):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite query point")
    raw = (p - config.lo) / config.extent
    u = np.clip(raw, 0.0, 1.0)
    inside = (raw >= 0.0) & (raw <= 1.0)
    return p, u, inside


def _level_arrays(config: HashGridConfig):
    res = np.array(config.resolutions, dtype=np.int64)
    hashed = np.array([config.is_hashed(lvl) for lvl in range(config.levels)])
    return res, hashed


@njit(cache=True, nogil=True)
def _vertex_index(cx, cy, cz, res, hashed, mask):
    if hashed:
        h = (cx * 1) ^ (cy * 2654435761) ^ (cz * 805459861)
        return h & mask
    n1 = res + 1
    return cx + n1 * (cy + n1 * cz)


@njit(cache=True, nogil=True)
def _cell(u, res):
    x = u * res
    b = min(np.int64(np.floor(x)), res - 1)
    return b, x - b


@njit(cache=True, nogil=True, error_model="numpy")
def _corners(u0, u1, u2, r, hashed, mask, idx, wx, wy, wz):
    """Fill the 8 corner indices (bit 0 = x, 1 = y, 2 = z) and per-axis weights."""
    bx, fx = _cell(u0, r)
    by, fy = _cell(u1, r)
    bz, fz = _cell(u2, r)
    wx[0], wx[1] = 1.0 - fx, fx
    wy[0], wy[1] = 1.0 - fy, fy
    wz[0], wz[1] = 1.0 - fz, fz
    for c in range(8):
        idx[c] = _vertex_index(bx + (c & 1), by + ((c >> 1) & 1), bz + ((c >> 2) & 1), r, hashed, mask)


@njit(cache=True, nogil=True, error_model="numpy")
def _encode_kernel(u, tables, res, hashed, out):
    n = u.shape[0]
    n_levels, t, nf = tables.shape
    mask = t - 1
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8)
    wx = np.empty(2)
    wy = np.empty(2)
    wz = np.empty(2)
    # level-major order keeps one level's table hot in cache
    for lvl in range(n_levels):
        r = res[lvl]
        hl = hashed[lvl]
        tab = tables[lvl]
        for i in range(n):
            _corners(u[i, 0], u[i, 1], u[i, 2], r, hl, mask, idx, wx, wy, wz)
            for c in range(8):
                w[c] = wx[c & 1] * wy[(c >> 1) & 1] * wz[(c >> 2) & 1]
            for f in range(nf):
                acc = 0.0
                for c in range(8):
                    acc += w[c] * tab[idx[c], f]
                out[i, lvl * nf + f] = acc


@njit(cache=True, nogil=True, error_model="numpy")
def _backward_kernel(u, tables, res, hashed, up, table_grad, du, need_tables, need_position):
    n = u.shape[0]
    n_levels, t, nf = tables.shape
    mask = t - 1
    idx = np.empty(8, dtype=np.int64)
    wx = np.empty(2)
    wy = np.empty(2)
    wz = np.empty(2)
    for lvl in range(n_levels):
        r = res[lvl]
        hl = hashed[lvl]
        tab = tables[lvl]
        tgrad = table_grad[lvl]
        for i in range(n):
            _corners(u[i, 0], u[i, 1], u[i, 2], r, hl, mask, idx, wx, wy, wz)
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                k = idx[c]
                if need_tables:
                    w = wx[ox] * wy[oy] * wz[oz]
                    for f in range(nf):
                        tgrad[k, f] += w * up[i, lvl * nf + f]
                if need_position:
                    proj = 0.0
                    for f in range(nf):
                        proj += tab[k, f] * up[i, lvl * nf + f]
                    # d(weight)/d(frac) is +1 for the upper corner, -1 for the lower
                    sx = 2.0 * ox - 1.0
                    sy = 2.0 * oy - 1.0
                    sz = 2.0 * oz - 1.0
                    gx += sx * wy[oy] * wz[oz] * proj
                    gy += wx[ox] * sy * wz[oz] * proj
                    gz += wx[ox] * wy[oy] * sz * proj
            if need_position:
                du[i, 0] += r * gx
                du[i, 1] += r * gy
                du[i, 2] += r * gz


def encode(points, tables: np.ndarray, config: HashGridConfig, return_cache: bool = False):
    """Encode world points into ``(N, output_dim)`` features.

    Points outside the bounds are clamped onto the boundary.
    """
    p, u, inside = normalize(points, config)
    res, hashed = _level_arrays(config)
    out = np.empty((p.shape[0], config.output_dim), dtype=tables.dtype)
    n_hash = config.levels * config.features_per_level
    _encode_kernel(u, tables, res, hashed, out[:, :n_hash])
    out[:, n_hash:] = aux_features(u, config.aux_octaves)
    if return_cache:
        return out, EncodeCache(p, u, inside)
    return out


def aux_features(u: np.ndarray, octaves: int) -> np.ndarray:
    """``[s, sin(2^k pi s), cos(2^k pi s)]`` for ``s = 2u - 1``, octaves k = 0..K-1."""
    out = np.empty((u.shape[0], 3 + 6 * octaves), dtype=np.float64)
    _aux_kernel(np.ascontiguousarray(u, dtype=np.float64), octaves, out)
    return out


@njit(cache=True, nogil=True)
def _aux_kernel(u, octaves, out):
    for i in range(u.shape[0]):
        for a in range(3):
            s = 2.0 * u[i, a] - 1.0
            out[i, a] = s
            sn = np.sin(np.pi * s)
            cs = np.cos(np.pi * s)
            for k in range(octaves):
                out[i, 3 + 6 * k + a] = sn
                out[i, 6 + 6 * k + a] = cs
                # double-angle step to the next octave
                sn, cs = 2.0 * sn * cs, cs * cs - sn * sn


@njit(cache=True, nogil=True)
def _aux_backward_kernel(u, octaves, up, g):
    for i in range(u.shape[0]):
        for a in range(3):
            s = 2.0 * u[i, a] - 1.0
            acc = up[i, a]
            sn = np.sin(np.pi * s)
            cs = np.cos(np.pi * s)
            w = np.pi
            for k in range(octaves):
                acc += up[i, 3 + 6 * k + a] * w * cs
                acc -= up[i, 6 + 6 * k + a] * w * sn
                sn, cs = 2.0 * sn * cs, cs * cs - sn * sn
                w *= 2.0
            g[i, a] = acc


def _aux_backward(u: np.ndarray, octaves: int, upstream: np.ndarray) -> np.ndarray:
    # gradient w.r.t. s = 2u - 1
    g = np.empty((u.shape[0], 3), dtype=np.float64)
    _aux_backward_kernel(u, octaves, np.ascontiguousarray(upstream), g)
    return g


def encode_backward(
    cache: EncodeCache,
    tables: np.ndarray,
    config: HashGridConfig,
    upstream: np.ndarray,
    need_tables: bool = True,
    need_position: bool = True,
):
    """Backward pass of :func:`encode`.

    Returns ``(table_grad, position_grad)``: a dense array shaped like
    ``tables`` (only the touched corner entries are non-zero) and the
    ``(N, 3)`` derivative w.r.t. the world position. Accumulation runs in
    a fixed point order, so results are reproducible.
    """
    up = np.ascontiguousarray(upstream)
    n_pts = cache.points.shape[0]
    if up.shape != (n_pts, config.output_dim):
        raise ValueError(f"upstream shape {up.shape} != {(n_pts, config.output_dim)}")
    res, hashed = _level_arrays(config)
    table_grad = np.zeros_like(tables)
    du = np.zeros((n_pts, 3))
    _backward_kernel(cache.u, tables, res, hashed, up, table_grad, du, need_tables, need_position)
    if not need_position:
        return table_grad if need_tables else None, None
    n_hash = config.levels * config.features_per_level
    if config.aux_dim:
        du += 2.0 * _aux_backward(cache.u, config.aux_octaves, up[:, n_hash:])
    pos_grad = du / config.extent * cache.inside
    return (table_grad if need_tables else None), pos_grad
