"""The scene map: a growable set of 3D Gaussians.

Each Gaussian carries position, orientation, per-axis standard deviations
stored in the log domain (positivity survives any unconstrained gradient
step), opacity stored as a logit (decoded value stays in (0,1)), and a raw
RGB color. Covariances are assembled as R diag(s^2) R^T, which keeps them
symmetric positive semi-definite by construction.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .errors import DegenerateCovariance, InvalidGaussian
from .geometry import quat_to_mat

_MIN_SCALE = 1e-8

CHECKPOINT_MAGIC = b"MM3DGSMP"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Gaussian3D:
    """One map primitive. `log_scale` and `opacity_logit` are the stored
    (optimized) parameters; `scale` and `opacity` are the decoded values."""

    mu: np.ndarray            # (3,) world meters
    rot: np.ndarray           # (4,) unit quaternion (w,x,y,z)
    log_scale: np.ndarray     # (3,) log standard deviations, meters
    opacity_logit: float
    color: np.ndarray         # (3,) RGB in [0,1]

    @classmethod
    def from_values(cls, mu, rot, scale, opacity, color) -> "Gaussian3D":
        """Build from decoded scale (sigma > 0) and opacity in (0,1)."""
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale <= 0):
            raise ValueError("scale must be positive")
        if not (0.0 < opacity < 1.0):
            raise ValueError("opacity must lie in (0,1)")
        return cls(
            mu=np.asarray(mu, dtype=np.float64),
            rot=np.asarray(rot, dtype=np.float64),
            log_scale=np.log(scale),
            opacity_logit=logit(opacity),
            color=np.asarray(color, dtype=np.float64),
        )

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self) -> float:
        return sigmoid(self.opacity_logit)


def covariance(g: Gaussian3D) -> np.ndarray:
    """3x3 covariance R S S^T R^T; symmetric PSD by construction."""
    R = quat_to_mat(g.rot)
    S2 = np.diag(g.scale ** 2)
    cov = R @ S2 @ R.T
    return 0.5 * (cov + cov.T)


def evaluate_density(g: Gaussian3D, x: np.ndarray) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)).

    Equals 1 at the mean and lies in (0, 1] everywhere.
    """
    if np.any(g.scale < _MIN_SCALE):
        raise DegenerateCovariance(f"scale {g.scale} below {_MIN_SCALE}")
    d = np.asarray(x, dtype=np.float64) - g.mu
    # Sigma^-1 = R S^-2 R^T, cheaper and better conditioned than inverting
    R = quat_to_mat(g.rot)
    y = R.T @ d / g.scale
    return float(np.exp(-0.5 * np.dot(y, y)))


@dataclass
class GaussianBatch:
    """Column-wise batch of Gaussians (what densify emits, what insert takes)."""

    mu: np.ndarray              # (N,3)
    rot: np.ndarray             # (N,4)
    log_scale: np.ndarray       # (N,3)
    opacity_logit: np.ndarray   # (N,)
    color: np.ndarray           # (N,3)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mu=self.mu[i],
            rot=self.rot[i],
            log_scale=self.log_scale[i],
            opacity_logit=float(self.opacity_logit[i]),
            color=self.color[i],
        )

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> "GaussianBatch":
        gs = list(gaussians)
        if not gs:
            return cls(
                np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3))
            )
        return cls(
            mu=np.stack([np.asarray(g.mu, dtype=np.float64) for g in gs]),
            rot=np.stack([np.asarray(g.rot, dtype=np.float64) for g in gs]),
            log_scale=np.stack([np.asarray(g.log_scale, dtype=np.float64) for g in gs]),
            opacity_logit=np.array([g.opacity_logit for g in gs], dtype=np.float64),
            color=np.stack([np.asarray(g.color, dtype=np.float64) for g in gs]),
        )


class GaussianMap:
    """Append-only Gaussian container; indices are stable across a run.

    Parameters live in flat arrays so the rasterizer and the optimizers can
    act on them without conversion. The map is exclusively owned by the
    pipeline loop; renders take it as read-only.
    """

    def __init__(self):
        self.mu = np.zeros((0, 3))
        self.rot = np.zeros((0, 4))
        self.log_scale = np.zeros((0, 3))
        self.opacity_logit = np.zeros(0)
        self.color = np.zeros((0, 3))
        self.creation_keyframe = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def get(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mu=self.mu[i],
            rot=self.rot[i],
            log_scale=self.log_scale[i],
            opacity_logit=float(self.opacity_logit[i]),
            color=self.color[i],
        )

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def insert(
        self,
        batch: Union[GaussianBatch, Iterable[Gaussian3D]],
        keyframe_id: int,
    ) -> int:
        """Validate and append a batch; returns the number added."""
        if not isinstance(batch, GaussianBatch):
            batch = GaussianBatch.from_gaussians(batch)
        n = len(batch)
        if n == 0:
            return 0
        self._validate(batch)

        rot = batch.rot / np.linalg.norm(batch.rot, axis=1, keepdims=True)
        self.mu = np.concatenate([self.mu, np.asarray(batch.mu, dtype=np.float64)])
        self.rot = np.concatenate([self.rot, rot])
        self.log_scale = np.concatenate(
            [self.log_scale, np.asarray(batch.log_scale, dtype=np.float64)]
        )
        self.opacity_logit = np.concatenate(
            [self.opacity_logit, np.asarray(batch.opacity_logit, dtype=np.float64)]
        )
        self.color = np.concatenate([self.color, np.asarray(batch.color, dtype=np.float64)])
        self.creation_keyframe = np.concatenate(
            [self.creation_keyframe, np.full(n, keyframe_id, dtype=np.int64)]
        )
        return n

    @staticmethod
    def _validate(batch: GaussianBatch) -> None:
        def first_bad(mask: np.ndarray, reason: str):
            idx = int(np.argmax(mask))
            raise InvalidGaussian(idx, reason)

        bad = ~np.all(np.isfinite(batch.mu), axis=1)
        if bad.any():
            first_bad(bad, "non-finite position")
        bad = ~np.all(np.isfinite(batch.rot), axis=1) | (
            np.linalg.norm(batch.rot, axis=1) < 1e-12
        )
        if bad.any():
            first_bad(bad, "invalid rotation quaternion")
        bad = ~np.all(np.isfinite(batch.log_scale), axis=1)
        if bad.any():
            first_bad(bad, "non-finite log scale (decoded scale must be positive)")
        bad = ~np.isfinite(batch.opacity_logit)
        if bad.any():
            first_bad(bad, "non-finite opacity logit (decoded opacity must be in (0,1))")
        bad = ~np.all(np.isfinite(batch.color), axis=1) | np.any(
            (batch.color < 0) | (batch.color > 1), axis=1
        )
        if bad.any():
            first_bad(bad, "color outside [0,1]")

    def checksum(self) -> str:
        """Digest of all parameters; used to assert immutability."""
        h = hashlib.sha256()
        for a in (self.mu, self.rot, self.log_scale, self.opacity_logit, self.color):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def scene_extent(self) -> float:
        """Largest bounding-box side; 1.0 for degenerate/empty maps."""
        if len(self) == 0:
            return 1.0
        extent = float(np.max(self.mu.max(axis=0) - self.mu.min(axis=0)))
        return extent if extent > 1e-9 else 1.0

    # -- checkpoint file ----------------------------------------------------
    # little-endian: magic "MM3DGSMP", u32 version, u64 count, then per
    # Gaussian 14 float32: mu*3, rot*4, log-scale*3, logit-opacity, rgb*3

    def save(self, path) -> None:
        n = len(self)
        rows = np.empty((n, 14), dtype="<f4")
        rows[:, 0:3] = self.mu
        rows[:, 3:7] = self.rot
        rows[:, 7:10] = self.log_scale
        rows[:, 10] = self.opacity_logit
        rows[:, 11:14] = self.color
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<Q", n))
            f.write(rows.tobytes())

    @classmethod
    def load(cls, path) -> "GaussianMap":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad magic {magic!r}")
            (version,) = struct.unpack("<I", f.read(4))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            (n,) = struct.unpack("<Q", f.read(8))
            rows = np.frombuffer(f.read(n * 14 * 4), dtype="<f4").reshape(n, 14)
        m = cls()
        m.mu = rows[:, 0:3].astype(np.float64)
        m.rot = rows[:, 3:7].astype(np.float64)
        m.log_scale = rows[:, 7:10].astype(np.float64)
        m.opacity_logit = rows[:, 10].astype(np.float64)
        m.color = rows[:, 11:14].astype(np.float64)
        m.creation_keyframe = np.zeros(n, dtype=np.int64)
        return m
