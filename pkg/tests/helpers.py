"""Shared test utilities: random scene construction and finite differences."""

from __future__ import annotations

import numpy as np

from vigs.gaussian_map import GaussianBatch, GaussianMap, logit
from vigs.geometry import Intrinsics, Pose, quat_from_rotvec, quat_normalize


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    return Pose(quat_normalize(rng.normal(size=4)), rng.normal(size=3) * t_scale)


def random_map(
    rng: np.random.Generator,
    n: int,
    center=(0.0, 0.0, 3.0),
    spread: float = 1.0,
    scale_range=(0.05, 0.3),
    opacity_range=(0.2, 0.9),
) -> GaussianMap:
    """Gaussians scattered in a box in front of the default camera."""
    lo, hi = scale_range
    batch = GaussianBatch(
        mu=np.asarray(center) + rng.uniform(-spread, spread, size=(n, 3)),
        rot=rng.normal(size=(n, 4)),
        log_scale=np.log(rng.uniform(lo, hi, size=(n, 3))),
        opacity_logit=logit(rng.uniform(*opacity_range, size=n)),
        color=rng.uniform(0.05, 0.95, size=(n, 3)),
    )
    m = GaussianMap()
    m.insert(batch, keyframe_id=0)
    return m


def small_intrinsics(width: int = 64, height: int = 64, f: float = 80.0) -> Intrinsics:
    return Intrinsics(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height)


def jiggled_camera(rng: np.random.Generator) -> Pose:
    """Camera near the origin looking roughly down +Z."""
    return Pose(
        quat_from_rotvec(rng.normal(scale=0.05, size=3)),
        rng.normal(scale=0.05, size=3),
    )


def central_difference(f, x0: float, h: float) -> float:
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def grad_close(analytic: float, fd: float, rel: float = 1e-3, abs_tol: float = 1e-6) -> bool:
    diff = abs(analytic - fd)
    return diff <= abs_tol or diff <= rel * max(abs(analytic), abs(fd))
