"""Tiled front-to-back alpha blending of color and semantic features.

Forward: splats are depth-sorted globally per camera, binned into 16x16
pixel tiles, and composited per pixel with shared weights T_i * alpha_i for
color and features (features cost one extra inner loop of d channels, which
is the whole point of keeping d small). Backward: per-splat gradients from a
back-to-front sweep inside the kernel, then an analytic chain through the
EWA projection back to every Gaussian attribute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import Camera, Scene, project_scene, sigmoid

TILE = _kernels.TILE


@dataclass
class RenderOutput:
    color: np.ndarray                # (H, W, 3) in [0, 1]
    feature: np.ndarray              # (H, W, d)
    final_transmittance: np.ndarray  # (H, W)
    max_contributor: np.ndarray      # (H, W) Gaussian index, -1 = none
    contributor_count: np.ndarray    # (H, W)


@dataclass
class RenderGradients:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    semantic: np.ndarray
    grad2d_norm: np.ndarray  # accumulated NDC-scaled screen gradient norm
    hit_count: np.ndarray    # 1 where the Gaussian produced a splat

    @classmethod
    def zeros(cls, scene: Scene):
        n, d = len(scene), scene.semantic_dim
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros(n), np.zeros((n, 3)), np.zeros((n, d)),
                   np.zeros(n), np.zeros(n, dtype=np.int64))


def _visible_splats(scene: Scene, camera: Camera):
    """Project, cull, and depth-sort the scene for one camera.

    Returns (gauss_idx, mean2d, conic, depth, radius, tile ranges, tiling),
    all restricted to splats that cover at least one pixel center, sorted by
    (depth, Gaussian index).
    """
    valid, mean2d, conic, depth, radius = project_scene(scene, camera)
    idx = np.flatnonzero(valid)
    w, h = camera.width, camera.height
    if idx.size:
        m = mean2d[idx]
        r = radius[idx]
        # inclusive pixel-center ranges covered by each cutoff disc
        kx0 = np.maximum(np.ceil(m[:, 0] - r - 0.5), 0).astype(np.int64)
        kx1 = np.minimum(np.floor(m[:, 0] + r - 0.5), w - 1).astype(np.int64)
        ky0 = np.maximum(np.ceil(m[:, 1] - r - 0.5), 0).astype(np.int64)
        ky1 = np.minimum(np.floor(m[:, 1] + r - 0.5), h - 1).astype(np.int64)
        covers = (kx0 <= kx1) & (ky0 <= ky1)
        idx = idx[covers]
        kx0, kx1, ky0, ky1 = kx0[covers], kx1[covers], ky0[covers], ky1[covers]
    else:
        kx0 = kx1 = ky0 = ky1 = np.zeros(0, dtype=np.int64)
    order = np.lexsort((idx, depth[idx]))
    idx = idx[order]
    n_tiles_x = (w + TILE - 1) // TILE
    n_tiles_y = (h + TILE - 1) // TILE
    offsets, tile_order = _kernels.build_tile_lists(
        kx0[order] // TILE, kx1[order] // TILE,
        ky0[order] // TILE, ky1[order] // TILE, n_tiles_x, n_tiles_y)
    return idx, mean2d[idx], conic[idx], depth[idx], radius[idx], \
        offsets, tile_order, n_tiles_x


def rasterize(scene: Scene, camera: Camera, include_features: bool = True) -> RenderOutput:
    """Render color, features, final transmittance and per-pixel max
    contributor. An empty scene yields pure background and transmittance 1."""
    h, w = camera.height, camera.width
    d = scene.semantic_dim if include_features else 0
    out = RenderOutput(
        color=np.empty((h, w, 3)),
        feature=np.empty((h, w, d)),
        final_transmittance=np.empty((h, w)),
        max_contributor=np.empty((h, w), dtype=np.int64),
        contributor_count=np.empty((h, w), dtype=np.int64),
    )
    idx, mean2d, conic, depth, radius, offsets, tile_order, n_tiles_x = \
        _visible_splats(scene, camera)
    opacity = sigmoid(scene.opacity_logits[idx])
    color = np.clip(scene.colors[idx], 0.0, 1.0)
    feat = scene.semantics[idx][:, :d] if d else np.zeros((idx.size, 0))
    _kernels.forward_kernel(
        offsets, tile_order, np.ascontiguousarray(mean2d),
        np.ascontiguousarray(conic), opacity, np.ascontiguousarray(color),
        np.ascontiguousarray(feat), radius * radius, scene.background_color,
        h, w, n_tiles_x, out.color, out.feature, out.final_transmittance,
        out.max_contributor, out.contributor_count)
    # kernel indices are splat rows; map back to Gaussian indices
    hit = out.max_contributor >= 0
    out.max_contributor[hit] = idx[out.max_contributor[hit]]
    return out


def _quat_rotmat_grad(q_unit):
    """d(R)/d(q_hat) for unit quaternions, shape (n, 4, 3, 3)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    n = q_unit.shape[0]
    zero = np.zeros(n)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1).reshape(n, 4, 3, 3)


def rasterize_backward(scene: Scene, camera: Camera, forward: RenderOutput,
                       loss_grad_color: np.ndarray,
                       loss_grad_feature: np.ndarray) -> RenderGradients:
    """Exact gradients of the scalar loss implied by the upstream per-pixel
    gradient maps, with respect to all six attribute groups.

    `forward` must come from rasterize on the same scene/camera; the kernel
    replays the identical blending walk. Raises ValueError on gradient maps
    that do not match the camera resolution.
    """
    h, w = camera.height, camera.width
    d = scene.semantic_dim
    loss_grad_color = np.ascontiguousarray(loss_grad_color, dtype=np.float64)
    loss_grad_feature = np.ascontiguousarray(loss_grad_feature, dtype=np.float64)
    if loss_grad_color.shape != (h, w, 3):
        raise ValueError(f"loss_grad_color shape {loss_grad_color.shape} != {(h, w, 3)}")
    if loss_grad_feature.shape != (h, w, d):
        raise ValueError(f"loss_grad_feature shape {loss_grad_feature.shape} != {(h, w, d)}")
    if forward.color.shape != (h, w, 3):
        raise ValueError("forward output resolution does not match camera")

    grads = RenderGradients.zeros(scene)
    idx, mean2d, conic, depth, radius, offsets, tile_order, n_tiles_x = \
        _visible_splats(scene, camera)
    s = idx.size
    if s == 0:
        return grads

    opacity = sigmoid(scene.opacity_logits[idx])
    raw_color = scene.colors[idx]
    color = np.clip(raw_color, 0.0, 1.0)
    feat = np.ascontiguousarray(scene.semantics[idx])

    g_mean2d = np.zeros((s, 2))
    g_conic = np.zeros((s, 3))
    g_opacity = np.zeros(s)
    g_color = np.zeros((s, 3))
    g_feat = np.zeros((s, d))
    _kernels.backward_kernel(
        offsets, tile_order, np.ascontiguousarray(mean2d),
        np.ascontiguousarray(conic), opacity, np.ascontiguousarray(color),
        feat, radius * radius, scene.background_color, h, w, n_tiles_x,
        loss_grad_color, loss_grad_feature,
        g_mean2d, g_conic, g_opacity, g_color, g_feat)

    # --- chain through the projection geometry, vectorized over splats ---
    R = camera.rotation
    fx, fy = camera.focal
    pos = scene.positions[idx]
    cam = pos @ R.T + camera.translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    inv_z = 1.0 / z

    scales = np.exp(scene.log_scales[idx])
    q_raw = scene.rotations[idx]
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q_unit = q_raw / q_norm
    from .core import quat_to_rotmat
    Rq = quat_to_rotmat(q_unit)
    A = Rq * scales[:, None, :]
    cov3d = A @ np.swapaxes(A, 1, 2)

    J = np.zeros((s, 2, 3))
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * x * inv_z * inv_z
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * y * inv_z * inv_z
    M = J @ R

    Q = np.empty((s, 2, 2))
    Q[:, 0, 0] = conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = conic[:, 1]
    Q[:, 1, 1] = conic[:, 2]
    gQ = np.empty((s, 2, 2))
    gQ[:, 0, 0] = g_conic[:, 0]
    gQ[:, 0, 1] = gQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    gQ[:, 1, 1] = g_conic[:, 2]

    g_cov2d = -Q @ gQ @ Q
    g_M = 2.0 * g_cov2d @ M @ cov3d
    g_cov3d = np.swapaxes(M, 1, 2) @ g_cov2d @ M
    g_J = g_M @ R.T

    g_cam = np.einsum("sij,si->sj", J, g_mean2d)
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    g_cam[:, 0] += g_J[:, 0, 2] * (-fx * inv_z2)
    g_cam[:, 1] += g_J[:, 1, 2] * (-fy * inv_z2)
    g_cam[:, 2] += (g_J[:, 0, 0] * (-fx * inv_z2)
                    + g_J[:, 0, 2] * (2.0 * fx * x * inv_z3)
                    + g_J[:, 1, 1] * (-fy * inv_z2)
                    + g_J[:, 1, 2] * (2.0 * fy * y * inv_z3))
    g_pos = g_cam @ R

    g_A = 2.0 * g_cov3d @ A
    g_Rq = g_A * scales[:, None, :]
    g_scale = np.einsum("sij,sij->sj", g_A, Rq)
    g_log_scale = g_scale * scales

    dRdq = _quat_rotmat_grad(q_unit)
    g_q_unit = np.einsum("sij,skij->sk", g_Rq, dRdq)
    g_q = (g_q_unit - q_unit * np.sum(q_unit * g_q_unit, axis=1, keepdims=True)) / q_norm

    o = opacity
    g_logit = g_opacity * o * (1.0 - o)
    color_pass = ((raw_color >= 0.0) & (raw_color <= 1.0)).astype(np.float64)

    grads.position[idx] = g_pos
    grads.log_scale[idx] = g_log_scale
    grads.rotation[idx] = g_q
    grads.opacity_logit[idx] = g_logit
    grads.color[idx] = g_color * color_pass
    grads.semantic[idx] = g_feat
    # densification statistic: gradient norm in NDC units so the threshold
    # is resolution independent (3DGS convention)
    ndc = g_mean2d * np.array([w * 0.5, h * 0.5])
    grads.grad2d_norm[idx] = np.linalg.norm(ndc, axis=1)
    grads.hit_count[idx] = 1
    return grads
