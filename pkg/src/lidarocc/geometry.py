"""Rigid-body poses, twist updates and ray construction.

Twists are 6-vectors ordered ``(omega, v)``: rotation part first (axis-angle,
radians), translation part second (meters). Pose updates are left
multiplicative, ``T = Exp(xi) @ T_init``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
# below this angle the closed-form series coefficients lose precision
_SERIES_ANGLE = 1e-2


class InvalidInputError(ValueError):
    pass


class DegenerateRayError(ValueError):
    pass


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return compose(self, other)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    depth: float

    def point(self, z):
        return self.origin + np.multiply.outer(z, self.direction)

    @property
    def end(self) -> np.ndarray:
        return self.origin + self.depth * self.direction


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _check_twist(twist) -> np.ndarray:
    xi = np.asarray(twist, dtype=np.float64).reshape(-1)
    if xi.shape != (6,):
        raise InvalidInputError(f"twist must have 6 components, got {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise InvalidInputError("twist is not finite")
    return xi


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    wx = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + wx
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * wx + b * (wx @ wx)


def so3_log(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    s = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = 0.5 * (np.trace(r) - 1.0)
    sin_t = np.linalg.norm(s)
    theta = np.arctan2(sin_t, c)
    if theta < SMALL_ANGLE:
        return s
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        m = 0.5 * (r + np.eye(3))
        k = int(np.argmax(np.diag(m)))
        axis = m[:, k] / np.sqrt(max(m[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, s) < 0:
            axis = -axis
        return theta * axis
    return theta / sin_t * s


def so3_left_jacobian(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    wx = skew(w)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * wx + b * (wx @ wx)


def _se3_q_block(omega, v) -> np.ndarray:
    # Coupling block of the SE(3) left Jacobian (Barfoot, eq. 7.86).
    w = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(w)
    px = skew(w)
    rx = skew(v)
    pr = px @ rx
    rp = rx @ px
    prp = pr @ px
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta * theta + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    return (
        0.5 * rx
        + c1 * (pr + rp + prp)
        + c2 * (px @ pr + rp @ px - 3.0 * prp)
        + c3 * (prp @ px + px @ prp)
    )


def se3_left_jacobian(twist) -> np.ndarray:
    """Left Jacobian in ``(omega, v)`` ordering.

    ``Exp(xi + d) ~= Exp(J @ d) @ Exp(xi)`` for small ``d``.
    """
    xi = _check_twist(twist)
    j = so3_left_jacobian(xi[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[3:, :3] = _se3_q_block(xi[:3], xi[3:])
    return out


def se3_exp(twist) -> PoseSE3:
    xi = _check_twist(twist)
    omega, v = xi[:3], xi[3:]
    if np.linalg.norm(omega) < SMALL_ANGLE:
        return PoseSE3(np.eye(3) + skew(omega), v + 0.5 * np.cross(omega, v))
    return PoseSE3(so3_exp(omega), so3_left_jacobian(omega) @ v)


def se3_log(pose: PoseSE3) -> np.ndarray:
    omega = so3_log(pose.rotation)
    v = np.linalg.solve(so3_left_jacobian(omega), pose.translation)
    return np.concatenate([omega, v])


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: PoseSE3) -> PoseSE3:
    rt = p.rotation.T
    return PoseSE3(rt, -rt @ p.translation)


def apply_delta(initial: PoseSE3, delta) -> PoseSE3:
    return compose(se3_exp(delta), initial)


def transform_point(pose: PoseSE3, p_local) -> np.ndarray:
    """``R @ p + t`` for a single point or an ``(N, 3)`` array."""
    p = np.asarray(p_local, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def rotation_angle(rotation) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    r = np.asarray(rotation, dtype=np.float64)
    s = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(np.linalg.norm(s), 0.5 * (np.trace(r) - 1.0)))


def pose_point_jacobian(pose: PoseSE3, p_local) -> np.ndarray:
    """3x6 derivative of the world point w.r.t. a left twist at zero."""
    x = transform_point(pose, p_local)
    jac = np.zeros((3, 6))
    jac[:, :3] = -skew(x)
    jac[:, 3:] = np.eye(3)
    return jac


def twist_gradient(twist, anchors: np.ndarray, point_grads: np.ndarray) -> np.ndarray:
    """Chain point gradients into the gradient w.r.t. the current twist.

    ``anchors`` are the world positions of the rigidly attached points under the
    current pose and ``point_grads`` the loss gradients at those points (any
    constant world-space offset between the evaluated point and its anchor does
    not change the result).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(point_grads, dtype=np.float64).reshape(-1, 3)
    at_zero = np.concatenate([np.cross(anchors, g).sum(axis=0), g.sum(axis=0)])
    return se3_left_jacobian(twist).T @ at_zero


def make_ray(pose: PoseSE3, p_local) -> Ray:
    p = np.asarray(p_local, dtype=np.float64).reshape(3)
    depth = float(np.linalg.norm(p))
    if not depth > 0.0 or not np.isfinite(depth):
        raise DegenerateRayError("sensor-frame point at the origin has no direction")
    origin = pose.translation.copy()
    direction = pose.rotation @ (p / depth)
    direction = direction / np.linalg.norm(direction)
    return Ray(origin, direction, depth)


def make_rays(pose: PoseSE3, points_local: np.ndarray):
    """Vectorised :func:`make_ray`; returns ``(origins, directions, depths)``."""
    p = np.asarray(points_local, dtype=np.float64).reshape(-1, 3)
    depths = np.linalg.norm(p, axis=1)
    if np.any(~(depths > 0.0)):
        raise DegenerateRayError("sensor-frame point at the origin has no direction")
    dirs = (p / depths[:, None]) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, p.shape).copy()
    return origins, dirs, depths
