"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from lidarocc.encoder import HashGridConfig
from lidarocc.field import OccupancyField
from lidarocc.trainer import adam_step


def small_encoder(lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0), **kw) -> HashGridConfig:
    base = dict(levels=4, features_per_level=2, table_size=2**10, base_resolution=4, max_resolution=32,
                bounds_min=lo, bounds_max=hi, aux_octaves=2)
    base.update(kw)
    return HashGridConfig(**base)


def small_field(seed=0, dtype=np.float64, hidden=(16, 16), table_scale=None, **enc) -> OccupancyField:
    fld = OccupancyField.create(small_encoder(**enc), np.random.default_rng(seed), hidden=hidden, dtype=dtype)
    if table_scale is not None:
        rng = np.random.default_rng(seed + 1)
        fld.params["tables"] = rng.normal(size=fld.params["tables"].shape).astype(dtype) * table_scale
    return fld


def fit_bce(field: OccupancyField, points, targets, steps=200, lr=1e-2):
    """Plain BCE regression with the package's ADAM step."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in field.params.items()}
    for t in range(1, steps + 1):
        occ, cache = field.forward(pts)
        occ = np.clip(occ.astype(np.float64), 1e-7, 1 - 1e-7)
        d = (occ - y) / (occ * (1 - occ)) / len(y)
        grads, _ = field.backward(cache, d, need_position=False)
        for k, p in field.params.items():
            m, v = moments[k]
            adam_step(p, grads[k], m, v, lr, t=t)
    return field
