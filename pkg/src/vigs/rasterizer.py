"""Differentiable tile-based splatting of a Gaussian map.

Forward pass: project every Gaussian to an image-plane 2D Gaussian, bin
into 16x16 pixel tiles, sort per tile by view depth (ties broken on map
index), and alpha-composite color, accumulated opacity, and opacity-
weighted depth front to back. Compositing for a pixel stops once its
transmittance falls below 1e-4.

Backward pass: analytic gradients of any scalar loss over the three output
buffers with respect to every Gaussian parameter (position, raw rotation
quaternion, log scales, opacity logit, color) and a 6-dof camera tangent.
The camera gradient differentiates through the world-to-view transform
x_view = R^-1 (x_world - t) while the rasterizer itself keeps the camera
fixed, so no separate pose-aware kernel is needed.

Everything runs on float64 numpy; per-tile work may be dispatched to a
thread pool, but partial results are always merged in tile order, so the
output is bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContextMismatch
from .gaussian_map import GaussianMap, sigmoid
from .geometry import Intrinsics, Pose

TILE = 16
NEAR_PLANE = 0.01
ALPHA_CLAMP = 0.999
T_STOP = 1e-4
COV2D_REG = 0.3      # px^2 added to the diagonal (anti-aliasing floor)
OPACITY_EPS = 1e-6   # depth buffer is 0 where accumulated opacity is below this
_TAIL_ALPHA = 1e-11  # binning keeps every pixel where alpha could exceed this

_CROSS = np.array(
    [
        [[0.0, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[0.0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0.0, -1, 0], [1, 0, 0], [0, 0, 0]],
    ]
)


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2,2) pixels^2, regularized
    depth: float            # view-space z, meters
    alpha_peak: float       # alpha at the 2D mean
    color: np.ndarray       # (3,)
    source_index: int       # index into the map


@dataclass
class ProjectedGaussians:
    """Batch of visible (non-culled) projections, in map order."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    alpha_peak: np.ndarray
    color: np.ndarray
    source_index: np.ndarray
    n_culled: int = 0

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def __getitem__(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            mean2d=self.mean2d[i],
            cov2d=self.cov2d[i],
            depth=float(self.depth[i]),
            alpha_peak=float(self.alpha_peak[i]),
            color=self.color[i],
            source_index=int(self.source_index[i]),
        )


@dataclass
class RenderGradients:
    """Loss gradients w.r.t. stored parameters and the camera tangent.

    Rotation gradients are w.r.t. the raw stored quaternion (the projection
    normalizes internally); scale and opacity gradients are w.r.t. the log /
    logit parameters. d_pose is (3 rotation, 3 translation) in the chart of
    geometry.apply_pose_tangent.
    """

    d_mu: np.ndarray
    d_rot: np.ndarray
    d_log_scale: np.ndarray
    d_opacity_logit: np.ndarray
    d_color: np.ndarray
    d_pose: np.ndarray


@dataclass
class _Projection:
    # visible subset, in map order
    source: np.ndarray       # (M,) indices into the map
    m: np.ndarray            # (M,3) view-space means
    mean2d: np.ndarray       # (M,2)
    cov2d: np.ndarray        # (M,2,2) regularized
    A: np.ndarray            # (M,2,2) inverse of cov2d
    opac: np.ndarray         # (M,) decoded opacity
    color: np.ndarray        # (M,3)
    radius: np.ndarray       # (M,) binning radius, pixels
    sigma_world: np.ndarray  # (M,3,3)
    q_unit: np.ndarray       # (M,4) normalized rotations
    scale: np.ndarray        # (M,3) decoded scales
    R_cw: np.ndarray         # (3,3) world-to-view rotation
    cam_t: np.ndarray        # (3,) camera position in world
    n_culled: int = 0


@dataclass
class _Tile:
    y0: int
    y1: int
    x0: int
    x1: int
    idx: np.ndarray        # (n,) into the projection arrays, depth-sorted
    alpha_raw: np.ndarray  # (n, p) opacity * falloff before clamping


@dataclass
class RenderContext:
    """Everything the backward pass needs, per-pixel contributor lists included."""

    proj: _Projection
    tiles: list
    map_size: int
    width: int
    height: int


@dataclass
class RenderOutput:
    color: np.ndarray    # (H,W,3) in [0,1]
    opacity: np.ndarray  # (H,W) in [0,1]
    depth: np.ndarray    # (H,W) meters, 0 where opacity < 1e-6
    context: RenderContext
    stats: dict


def _rotmats(q: np.ndarray) -> np.ndarray:
    """(N,4) unit quaternions -> (N,3,3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_quat_partials(q: np.ndarray) -> np.ndarray:
    """(N,4) unit quaternions -> (N,4,3,3) dR/dq of the unit-quaternion formula."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(-1, 3, 3)
    dx = np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1
    ).reshape(-1, 3, 3)
    dy = np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=-1
    ).reshape(-1, 3, 3)
    dz = np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=-1
    ).reshape(-1, 3, 3)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def _project(gmap: GaussianMap, cam: Pose, k: Intrinsics) -> _Projection:
    R_cw = cam.rotation_matrix().T
    cam_t = cam.translation
    n = len(gmap)

    if n == 0:
        empty = _Projection(
            source=np.zeros(0, dtype=np.int64),
            m=np.zeros((0, 3)),
            mean2d=np.zeros((0, 2)),
            cov2d=np.zeros((0, 2, 2)),
            A=np.zeros((0, 2, 2)),
            opac=np.zeros(0),
            color=np.zeros((0, 3)),
            radius=np.zeros(0),
            sigma_world=np.zeros((0, 3, 3)),
            q_unit=np.zeros((0, 4)),
            scale=np.zeros((0, 3)),
            R_cw=R_cw,
            cam_t=cam_t,
        )
        return empty

    m_all = (gmap.mu - cam_t) @ R_cw.T
    keep = m_all[:, 2] > NEAR_PLANE
    source = np.nonzero(keep)[0]
    m = m_all[keep]

    q_unit = gmap.rot[keep]
    q_unit = q_unit / np.linalg.norm(q_unit, axis=1, keepdims=True)
    scale = np.exp(gmap.log_scale[keep])
    Rg = _rotmats(q_unit)
    # Sigma = R S^2 R^T
    RS = Rg * scale[:, None, :]
    sigma_world = RS @ np.transpose(RS, (0, 2, 1))

    x, y, z = m[:, 0], m[:, 1], m[:, 2]
    u = k.fx * x / z + k.cx
    v = k.fy * y / z + k.cy
    mean2d = np.stack([u, v], axis=1)

    J = np.zeros((m.shape[0], 2, 3))
    J[:, 0, 0] = k.fx / z
    J[:, 0, 2] = -k.fx * x / (z * z)
    J[:, 1, 1] = k.fy / z
    J[:, 1, 2] = -k.fy * y / (z * z)

    sigma_view = np.einsum("ab,nbc,dc->nad", R_cw, sigma_world, R_cw)
    cov2d = np.einsum("nab,nbc,ndc->nad", J, sigma_view, J)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1)))

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    A = np.empty_like(cov2d)
    A[:, 0, 0] = cov2d[:, 1, 1] / det
    A[:, 1, 1] = cov2d[:, 0, 0] / det
    A[:, 0, 1] = A[:, 1, 0] = -cov2d[:, 0, 1] / det

    opac = sigmoid(gmap.opacity_logit[keep])

    # keep every pixel whose alpha could exceed the tail threshold, and at
    # least the conservative 3 sigma footprint
    half_tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = half_tr + np.sqrt(
        np.maximum((0.5 * (cov2d[:, 0, 0] - cov2d[:, 1, 1])) ** 2 + cov2d[:, 0, 1] ** 2, 0.0)
    )
    rho = 2.0 * np.log(np.maximum(opac, 1e-300) / _TAIL_ALPHA)
    radius = np.sqrt(np.maximum(rho, 9.0) * lam_max)

    return _Projection(
        source=source,
        m=m,
        mean2d=mean2d,
        cov2d=cov2d,
        A=A,
        opac=opac,
        color=gmap.color[keep],
        radius=radius,
        sigma_world=sigma_world,
        q_unit=q_unit,
        scale=scale,
        R_cw=R_cw,
        cam_t=cam_t,
        n_culled=int(n - len(source)),
    )


def project_all(gmap: GaussianMap, cam: Pose, k: Intrinsics) -> ProjectedGaussians:
    """Project the map; Gaussians behind the near plane (z <= 0.01 m) are culled."""
    p = _project(gmap, cam, k)
    return ProjectedGaussians(
        mean2d=p.mean2d,
        cov2d=p.cov2d,
        depth=p.m[:, 2].copy(),
        alpha_peak=np.minimum(p.opac, ALPHA_CLAMP),
        color=p.color,
        source_index=p.source,
        n_culled=p.n_culled,
    )


def _bin_tiles(proj: _Projection, width: int, height: int):
    """Assign Gaussians to the 16x16 tiles their footprint overlaps.

    Returns (tiles_x, tiles_y, per-tile index arrays sorted by (depth, index)).
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    M = len(proj.source)
    if M == 0:
        return tiles_x, tiles_y, [np.zeros(0, dtype=np.int64)] * n_tiles

    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    r = proj.radius
    tx0 = np.clip(np.floor((u - r) / TILE).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((u + r) / TILE).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((v - r) / TILE).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((v + r) / TILE).astype(np.int64), 0, tiles_y - 1)
    # drop footprints fully outside the image
    inside = (u + r >= 0) & (u - r < width) & (v + r >= 0) & (v - r < height)

    nx = np.where(inside, tx1 - tx0 + 1, 0)
    ny = np.where(inside, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return tiles_x, tiles_y, [np.zeros(0, dtype=np.int64)] * n_tiles

    owner = np.repeat(np.arange(M), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    nx_o = np.repeat(nx, counts)
    tile_id = (ty0[owner] + local // np.maximum(nx_o, 1)) * tiles_x + (
        tx0[owner] + local % np.maximum(nx_o, 1)
    )

    order = np.lexsort((owner, proj.m[owner, 2], tile_id))
    tile_sorted = tile_id[order]
    owner_sorted = owner[order]
    bounds = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    per_tile = [owner_sorted[bounds[t]: bounds[t + 1]] for t in range(n_tiles)]
    return tiles_x, tiles_y, per_tile


def _tile_rect(t: int, tiles_x: int, width: int, height: int):
    ty, tx = divmod(t, tiles_x)
    y0, x0 = ty * TILE, tx * TILE
    return y0, min(y0 + TILE, height), x0, min(x0 + TILE, width)


def _tile_alpha(proj: _Projection, idx: np.ndarray, rect) -> np.ndarray:
    """(n, p) unclamped alpha of each contributor at each pixel center."""
    y0, y1, x0, x1 = rect
    us = np.arange(x0, x1) + 0.5
    vs = np.arange(y0, y1) + 0.5
    pu = np.repeat(us[None, :], y1 - y0, axis=0).ravel()
    pv = np.repeat(vs[:, None], x1 - x0, axis=1).ravel()
    d0 = pu[None, :] - proj.mean2d[idx, 0, None]
    d1 = pv[None, :] - proj.mean2d[idx, 1, None]
    a = proj.A[idx, 0, 0, None]
    b = proj.A[idx, 0, 1, None]
    c = proj.A[idx, 1, 1, None]
    power = -0.5 * (a * d0 * d0 + 2.0 * b * d0 * d1 + c * d1 * d1)
    return proj.opac[idx, None] * np.exp(power)


def _composite(alpha_raw: np.ndarray, proj: _Projection, idx: np.ndarray):
    """Front-to-back blend; returns (w, T, active, color, opacity, depth)."""
    alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
    T = np.cumprod(1.0 - alpha, axis=0)
    T = np.vstack([np.ones((1, alpha.shape[1])), T[:-1]])
    active = T >= T_STOP
    w = alpha * T * active
    color = w.T @ proj.color[idx]
    opacity = w.sum(axis=0)
    depth_num = w.T @ proj.m[idx, 2]
    valid = opacity >= OPACITY_EPS
    depth = np.where(valid, depth_num / np.where(valid, opacity, 1.0), 0.0)
    return w, T, active, color, opacity, depth


def render(
    gmap: GaussianMap, cam: Pose, k: Intrinsics, workers: int = 1
) -> RenderOutput:
    """Rasterize the map into color/opacity/depth buffers (black background).

    Deterministic: identical inputs give bit-identical buffers for any
    `workers` value.
    """
    H, W = k.height, k.width
    proj = _project(gmap, cam, k)
    tiles_x, _, per_tile = _bin_tiles(proj, W, H)

    color = np.zeros((H, W, 3))
    opacity = np.zeros((H, W))
    depth = np.zeros((H, W))
    tiles = []

    def run_tile(t: int) -> Optional[_Tile]:
        idx = per_tile[t]
        if idx.size == 0:
            return None
        rect = _tile_rect(t, tiles_x, W, H)
        alpha_raw = _tile_alpha(proj, idx, rect)
        return _Tile(rect[0], rect[1], rect[2], rect[3], idx, alpha_raw)

    if workers > 1 and len(per_tile) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, range(len(per_tile))))
    else:
        results = [run_tile(t) for t in range(len(per_tile))]

    for tile in results:
        if tile is None:
            continue
        _, _, _, c, o, d = _composite(tile.alpha_raw, proj, tile.idx)
        h, w_ = tile.y1 - tile.y0, tile.x1 - tile.x0
        color[tile.y0: tile.y1, tile.x0: tile.x1] = c.reshape(h, w_, 3)
        opacity[tile.y0: tile.y1, tile.x0: tile.x1] = o.reshape(h, w_)
        depth[tile.y0: tile.y1, tile.x0: tile.x1] = d.reshape(h, w_)
        tiles.append(tile)

    ctx = RenderContext(proj=proj, tiles=tiles, map_size=len(gmap), width=W, height=H)
    stats = {"n_culled": proj.n_culled, "n_visible": len(proj.source)}
    return RenderOutput(color=color, opacity=opacity, depth=depth, context=ctx, stats=stats)


def render_backward(
    ctx: RenderContext,
    d_color: np.ndarray,
    d_opacity: np.ndarray,
    d_depth: np.ndarray,
    gmap: GaussianMap,
    cam: Pose,
    k: Intrinsics,
    workers: int = 1,
) -> RenderGradients:
    """Backpropagate per-pixel gradients through the compositing and projection.

    `ctx` must come from `render` on the same map/camera/intrinsics.
    Upstream buffers may be zero; missing ones can be passed as None.
    """
    if ctx.map_size != len(gmap):
        raise ContextMismatch(f"context built for {ctx.map_size} Gaussians, map has {len(gmap)}")
    H, W = ctx.height, ctx.width
    if d_color is None:
        d_color = np.zeros((H, W, 3))
    if d_opacity is None:
        d_opacity = np.zeros((H, W))
    if d_depth is None:
        d_depth = np.zeros((H, W))

    proj = ctx.proj
    M = len(proj.source)
    n = len(gmap)
    grads = RenderGradients(
        d_mu=np.zeros((n, 3)),
        d_rot=np.zeros((n, 4)),
        d_log_scale=np.zeros((n, 3)),
        d_opacity_logit=np.zeros(n),
        d_color=np.zeros((n, 3)),
        d_pose=np.zeros(6),
    )
    if M == 0:
        return grads

    # per-projection accumulators (filled tile by tile, in tile order)
    g_color = np.zeros((M, 3))
    g_opac = np.zeros(M)
    g_mean2d = np.zeros((M, 2))
    g_z = np.zeros(M)
    g_A = np.zeros((M, 2, 2))

    def tile_backward(tile: _Tile):
        idx = tile.idx
        rect = (tile.y0, tile.y1, tile.x0, tile.x1)
        w, T, active, _, opacity, depth = _composite(tile.alpha_raw, proj, idx)
        alpha = np.minimum(tile.alpha_raw, ALPHA_CLAMP)

        gC = d_color[tile.y0: tile.y1, tile.x0: tile.x1].reshape(-1, 3)
        gO = d_opacity[tile.y0: tile.y1, tile.x0: tile.x1].ravel()
        gD = d_depth[tile.y0: tile.y1, tile.x0: tile.x1].ravel()

        zs = proj.m[idx, 2]
        valid = opacity >= OPACITY_EPS
        inv_o = np.where(valid, 1.0 / np.where(valid, opacity, 1.0), 0.0)
        gD_n = gD * inv_o  # gradient w.r.t. the depth numerator

        t_color = w @ gC
        t_zgrad = w @ gD_n

        # suffix sums over later contributors (front-to-back order)
        wc = w[:, :, None] * proj.color[idx][:, None, :]
        cum_c = np.cumsum(wc, axis=0)
        S_c = cum_c[-1][None] - cum_c
        cum_o = np.cumsum(w, axis=0)
        S_o = cum_o[-1][None] - cum_o
        wz = w * zs[:, None]
        cum_z = np.cumsum(wz, axis=0)
        S_z = cum_z[-1][None] - cum_z

        one_minus = 1.0 - alpha
        dC_da = T[:, :, None] * proj.color[idx][:, None, :] - S_c / one_minus[:, :, None]
        dO_da = T - S_o / one_minus
        dN_da = T * zs[:, None] - S_z / one_minus
        dD_da = (dN_da - depth[None, :] * dO_da) * inv_o[None, :]

        d_alpha = (
            np.einsum("npc,pc->np", dC_da, gC)
            + dO_da * gO[None, :]
            + dD_da * gD[None, :]
        )
        d_alpha *= active
        gate = tile.alpha_raw <= ALPHA_CLAMP
        d_raw = d_alpha * gate

        G = tile.alpha_raw / proj.opac[idx, None]
        to = (d_raw * G).sum(axis=1)
        dG = d_raw * proj.opac[idx, None]

        y0, y1, x0, x1 = rect
        us = np.arange(x0, x1) + 0.5
        vs = np.arange(y0, y1) + 0.5
        pu = np.repeat(us[None, :], y1 - y0, axis=0).ravel()
        pv = np.repeat(vs[:, None], x1 - x0, axis=1).ravel()
        d0 = pu[None, :] - proj.mean2d[idx, 0, None]
        d1 = pv[None, :] - proj.mean2d[idx, 1, None]
        a = proj.A[idx, 0, 0, None]
        b = proj.A[idx, 0, 1, None]
        c = proj.A[idx, 1, 1, None]
        Ad0 = a * d0 + b * d1
        Ad1 = b * d0 + c * d1
        coeff = dG * G
        t_mean2d = np.stack([(coeff * Ad0).sum(axis=1), (coeff * Ad1).sum(axis=1)], axis=1)
        half = -0.5 * coeff
        tA = np.empty((idx.size, 2, 2))
        tA[:, 0, 0] = (half * d0 * d0).sum(axis=1)
        tA[:, 0, 1] = tA[:, 1, 0] = (half * d0 * d1).sum(axis=1)
        tA[:, 1, 1] = (half * d1 * d1).sum(axis=1)

        return idx, t_color, to, t_mean2d, t_zgrad, tA

    live = ctx.tiles
    if workers > 1 and len(live) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(tile_backward, live))
    else:
        partials = [tile_backward(t) for t in live]

    for idx, t_color, to, t_mean2d, t_z, tA in partials:
        g_color[idx] += t_color
        g_opac[idx] += to
        g_mean2d[idx] += t_mean2d
        g_z[idx] += t_z
        g_A[idx] += tA

    # ---- chain through the projection, vectorized over the visible set ----
    m = proj.m
    x, y, z = m[:, 0], m[:, 1], m[:, 2]
    fx, fy = k.fx, k.fy

    # dL/dSigma' = -A dL/dA A  (A = inverse of the regularized cov2d)
    g_cov2d = -np.einsum("nab,nbc,ncd->nad", proj.A, g_A, proj.A)
    g_cov2d = 0.5 * (g_cov2d + np.transpose(g_cov2d, (0, 2, 1)))

    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)

    sigma_view = np.einsum(
        "ab,nbc,dc->nad", proj.R_cw, proj.sigma_world, proj.R_cw
    )

    # view-mean gradient: through the pinhole mean, the depth output, and J's
    # own dependence on the view mean
    g_m = np.einsum("nab,na->nb", J, g_mean2d)
    g_m[:, 2] += g_z

    K = sigma_view @ np.transpose(J, (0, 2, 1))  # (M,3,2)
    P = g_cov2d
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    # d cov2d / dm_k = dJ/dm_k K + (dJ/dm_k K)^T; with P symmetric the trace
    # contribution is 2 <P, dJ/dm_k K>
    g_m[:, 0] += 2.0 * (-fx * inv_z2) * (P[:, 0, 0] * K[:, 2, 0] + P[:, 0, 1] * K[:, 2, 1])
    g_m[:, 1] += 2.0 * (-fy * inv_z2) * (P[:, 1, 0] * K[:, 2, 0] + P[:, 1, 1] * K[:, 2, 1])
    row0 = (-fx * inv_z2)[:, None] * K[:, 0, :] + (2 * fx * x * inv_z3)[:, None] * K[:, 2, :]
    row1 = (-fy * inv_z2)[:, None] * K[:, 1, :] + (2 * fy * y * inv_z3)[:, None] * K[:, 2, :]
    g_m[:, 2] += 2.0 * (
        P[:, 0, 0] * row0[:, 0] + P[:, 0, 1] * row0[:, 1]
        + P[:, 1, 0] * row1[:, 0] + P[:, 1, 1] * row1[:, 1]
    )

    g_sigma_view = np.einsum("nab,nac,nbd->ncd", g_cov2d, J, J)
    # world-frame covariance gradient (also reused for the camera rotation)
    g_sigma = np.einsum("ba,nbc,cd->nad", proj.R_cw, g_sigma_view, proj.R_cw)

    g_mu = g_m @ proj.R_cw  # R_cw^T g_m, rows

    # scale/rotation of each Gaussian through Sigma = R S^2 R^T
    Rg = _rotmats(proj.q_unit)
    RtGR = np.einsum("nba,nbc,ncd->nad", Rg, g_sigma, Rg)
    g_log_scale = 2.0 * proj.scale ** 2 * np.einsum("naa->na", RtGR)
    g_Rg = 2.0 * np.einsum("nab,nbc->nac", g_sigma, Rg * (proj.scale ** 2)[:, None, :])
    dRdq = _rotmat_quat_partials(proj.q_unit)
    g_q_unit = np.einsum("nqab,nab->nq", dRdq, g_Rg)
    # raw quaternion: through normalization (I - qq^T)/|q|; stored rotations
    # are unit up to float error, so |q| is recomputed for exactness
    q_raw = gmap.rot[proj.source]
    nrm = np.linalg.norm(q_raw, axis=1)
    g_q = (g_q_unit - proj.q_unit * np.einsum("nq,nq->n", proj.q_unit, g_q_unit)[:, None]) / nrm[:, None]

    # camera tangent: mean path (g_mu x (mu - t)) and covariance path
    x_rel = gmap.mu[proj.source] - proj.cam_t
    pose_rot = np.cross(g_mu, x_rel).sum(axis=0)
    Kc = g_sigma @ proj.sigma_world - proj.sigma_world @ g_sigma
    pose_rot += 2.0 * np.array(
        [Kc[:, 1, 2].sum(), Kc[:, 2, 0].sum(), Kc[:, 0, 1].sum()]
    )
    pose_trans = -g_mu.sum(axis=0)

    grads.d_color[proj.source] = g_color
    grads.d_opacity_logit[proj.source] = g_opac * proj.opac * (1.0 - proj.opac)
    grads.d_mu[proj.source] = g_mu
    grads.d_log_scale[proj.source] = g_log_scale
    grads.d_rot[proj.source] = g_q
    grads.d_pose = np.concatenate([pose_rot, pose_trans])
    return grads


def dump_debug_png(out: RenderOutput, directory, prefix: str = "render") -> None:
    """Write color (8-bit), depth (16-bit, meters*5000) and opacity (8-bit) PNGs."""
    from pathlib import Path

    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(out.color * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(directory / f"{prefix}_color.png")
    d16 = np.clip(out.depth * 5000.0 + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(d16, mode="I;16").save(directory / f"{prefix}_depth.png")
    o8 = np.clip(out.opacity * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(o8, mode="L").save(directory / f"{prefix}_opacity.png")
