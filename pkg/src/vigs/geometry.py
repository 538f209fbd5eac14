"""SE(3) poses, unit quaternions, and pinhole projection.

Conventions used everywhere in the package:

* quaternions are (w, x, y, z), kept unit-norm;
* camera frame is +Z forward, +X right, +Y down;
* a `Pose` maps local (camera/body) coordinates to world coordinates,
  i.e. trajectories store camera-to-world transforms;
* continuous pixel coordinates put the center of pixel (row i, col j)
  at (u, v) = (j + 0.5, i + 0.5).

All operations are pure functions on immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth

_MIN_DEPTH = 1e-8


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (normalizes defensively)."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map: axis-angle vector (rad) to unit quaternion."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # second-order Taylor keeps the map smooth through zero
        half = 0.5 * v
        return quat_normalize(np.array([1.0 - 0.125 * angle * angle, *half]))
    axis = v / angle
    s = np.sin(0.5 * angle)
    return np.array([np.cos(0.5 * angle), *(axis * s)])


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    """Logarithm map: unit quaternion to axis-angle vector (rad)."""
    w, x, y, z = quat_normalize(q)
    if w < 0:  # pick the short arc
        w, x, y, z = -w, -x, -y, -z
    vec = np.array([x, y, z])
    s = np.linalg.norm(vec)
    if s < 1e-12:
        return 2.0 * vec
    angle = 2.0 * np.arctan2(s, w)
    return vec * (angle / s)


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate one point (3,) or many points (N, 3)."""
    R = quat_to_mat(q)
    pts = np.asarray(points, dtype=np.float64)
    return pts @ R.T


def quat_slerp(a: np.ndarray, b: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions, u in [0, 1]."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b, dot = -b, -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(a + u * (b - a))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return quat_normalize((np.sin((1 - u) * theta) / s) * a + (np.sin(u * theta) / s) * b)


def mat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (w,x,y,z) plus translation in meters.

    Applies as x_world = R(rotation) @ x_local + translation.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(mat_to_quat(T[:3, :3]), T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_mat(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def transform(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, points) + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a."""
    q = quat_normalize(quat_mul(a.rotation, b.rotation))
    t = quat_rotate(a.rotation, b.translation) + a.translation
    return Pose(q, t)


def inverse(a: Pose) -> Pose:
    q_inv = quat_conj(a.rotation)
    t_inv = -quat_rotate(q_inv, a.translation)
    return Pose(q_inv, t_inv)


def apply_pose_tangent(pose: Pose, delta: np.ndarray) -> Pose:
    """Perturb a pose by a 6-vector tangent (3 rotation rad, 3 translation m).

    The rotation increment is applied on the left (world side) via the
    exponential map; the translation increment is additive. This is the
    chart the tracker optimizes in and the one pose gradients refer to.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    dq = quat_from_rotvec(delta[:3])
    return Pose(quat_mul(dq, pose.rotation), pose.translation + delta[3:])


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels; images are height x width."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")


def project(point: np.ndarray, k: Intrinsics) -> tuple[float, float, float]:
    """Camera-frame point to (u, v, depth). Raises NonPositiveDepth for z <= 1e-8."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= _MIN_DEPTH:
        raise NonPositiveDepth(f"z = {z}")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def backproject(u: float, v: float, depth: float, k: Intrinsics) -> np.ndarray:
    """Pixel coordinates plus depth to a camera-frame point."""
    return np.array(
        [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], dtype=np.float64
    )
