"""Occupancy field: hash-grid features -> shallow ReLU MLP -> sigmoid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .encoder import EncodeCache, HashGridConfig, encode, encode_backward, init_tables
from .geometry import InvalidInputError

NORMAL_STEP = 1e-2
NORMAL_GRAD_MIN = 1e-8


class DegenerateNormalError(ValueError):
    """The occupancy gradient is too small to define a normal."""


@dataclass
class ForwardCache:
    encode: EncodeCache
    activations: list  # inputs to each linear layer
    pre_relu: list
    occupancy: np.ndarray


class OccupancyField:
    """Maps world points to occupancy in (0, 1).

    Parameters are kept in ``self.params``: ``"tables"`` followed by
    ``"w0", "b0", "w1", ...`` with weights shaped ``(fan_in, fan_out)``.
    """

    def __init__(self, encoder: HashGridConfig, params: dict):
        self.encoder = encoder
        self.params = params

    @classmethod
    def create(
        cls,
        encoder: HashGridConfig,
        rng: np.random.Generator,
        hidden: tuple = (64, 64),
        dtype=np.float32,
    ) -> OccupancyField:
        params = {"tables": init_tables(encoder, rng, dtype)}
        sizes = [encoder.output_dim, *hidden, 1]
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / n_in)
            if k == len(sizes) - 2:
                # keep the fresh field close to 0.5 everywhere
                bound *= 1e-2
            params[f"w{k}"] = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
            params[f"b{k}"] = np.zeros(n_out, dtype=dtype)
        return cls(encoder, params)

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("w"))

    @property
    def hidden(self) -> tuple:
        return tuple(self.params[f"w{k}"].shape[1] for k in range(self.n_layers - 1))

    @property
    def dtype(self):
        return self.params["tables"].dtype

    def copy(self) -> OccupancyField:
        return OccupancyField(self.encoder, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> OccupancyField:
        return OccupancyField(self.encoder, {k: v.astype(dtype) for k, v in self.params.items()})

    def logits(self, points) -> np.ndarray:
        x = encode(points, self.params["tables"], self.encoder)
        n = self.n_layers
        for k in range(n):
            x = x @ self.params[f"w{k}"] + self.params[f"b{k}"]
            if k < n - 1:
                np.maximum(x, 0, out=x)
        return x[:, 0]

    def __call__(self, points) -> np.ndarray:
        return expit(self.logits(points))

    def forward(self, points):
        feats, ecache = encode(points, self.params["tables"], self.encoder, return_cache=True)
        acts, pre = [feats], []
        x = feats
        n = self.n_layers
        for k in range(n):
            z = x @ self.params[f"w{k}"] + self.params[f"b{k}"]
            if k < n - 1:
                pre.append(z)
                x = np.maximum(z, 0)
                acts.append(x)
            else:
                x = z
        occ = expit(x[:, 0])
        return occ, ForwardCache(ecache, acts, pre, occ)

    def backward(self, cache: ForwardCache, upstream, need_tables=True, need_position=True):
        """Reverse pass given dL/d(occupancy). Returns ``(param_grads, position_grad)``."""
        d_occ = np.asarray(upstream, dtype=self.dtype).reshape(-1)
        occ = cache.occupancy
        d = (d_occ * occ * (1.0 - occ))[:, None]
        grads = {}
        n = self.n_layers
        for k in reversed(range(n)):
            grads[f"w{k}"] = cache.activations[k].T @ d
            grads[f"b{k}"] = d.sum(axis=0)
            d = d @ self.params[f"w{k}"].T
            if k > 0:
                d = d * (cache.pre_relu[k - 1] > 0)
        tables_grad, pos_grad = encode_backward(
            cache.encode,
            self.params["tables"],
            self.encoder,
            d,
            need_tables=need_tables,
            need_position=need_position,
        )
        if need_tables:
            grads["tables"] = tables_grad
        return grads, pos_grad


def evaluate(field: OccupancyField, p) -> np.ndarray | float:
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    out = field(pts.reshape(-1, 3))
    return float(out[0]) if single else out


def evaluate_backward(field: OccupancyField, p, upstream):
    """Gradients of ``upstream * f(p)``: ``(mlp_grads, table_grads, position_grad)``."""
    pts = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (pts.shape[0],))
    _, cache = field.forward(pts)
    grads, pos = field.backward(cache, up)
    tables = grads.pop("tables")
    return grads, tables, pos


def probe_offsets(step: float = NORMAL_STEP) -> np.ndarray:
    """The six central-difference offsets ``+x, -x, +y, -y, +z, -z``."""
    off = np.zeros((6, 3))
    for a in range(3):
        off[2 * a, a] = step
        off[2 * a + 1, a] = -step
    return off


def gradient_from_probes(values: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient from ``(N, 6)`` probe values."""
    v = np.asarray(values, dtype=np.float64)
    return (v[:, 0::2] - v[:, 1::2]) / (2.0 * step)


def normals(field: OccupancyField, points, step: float = NORMAL_STEP, g_min: float = NORMAL_GRAD_MIN):
    """Finite-difference unit normals; returns ``(normals, valid_mask)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    probes = (pts[:, None, :] + probe_offsets(step)[None]).reshape(-1, 3)
    vals = field(probes).reshape(-1, 6)
    g = gradient_from_probes(vals, step)
    norm = np.linalg.norm(g, axis=1)
    valid = norm >= g_min
    n = np.zeros_like(g)
    n[valid] = g[valid] / norm[valid, None]
    return n, valid


def normal(field: OccupancyField, p, step: float = NORMAL_STEP, g_min: float = NORMAL_GRAD_MIN):
    pts = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite query point")
    n, valid = normals(field, pts[None], step, g_min)
    if not valid[0]:
        raise DegenerateNormalError(f"occupancy gradient below {g_min} at {pts}")
    return n[0]
