"""Analytic gradients of a colour loss through the splatting forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation
from ..rasterizer import MAX_ALPHA, RenderContext, _tile_alpha
from ..scene_model import Camera, GaussianCloud


@dataclass
class Gradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    # |dL/d mean2d| in NDC units per Gaussian (densification statistic)
    screen_grad_norm: np.ndarray
    visible: np.ndarray

    def as_dict(self) -> dict:
        return {"means": self.means, "log_scales": self.log_scales, "quats": self.quats,
                "opacity_logits": self.opacity_logits, "colors": self.colors}

    @classmethod
    def zeros(cls, n: int) -> "Gradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n, dtype=bool))


def _quat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """dL/dq for unnormalised quaternions given dL/dR of R(q / |q|)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = dR
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gn = np.stack([gw, gx, gy, gz], axis=1)
    # projection onto the tangent space of the unit sphere
    return (gn - qn * np.sum(gn * qn, axis=1, keepdims=True)) / norm


def backward(camera: Camera, cloud: GaussianCloud, dL_dcolor: np.ndarray, ctx: RenderContext) -> Gradients:
    """Per-Gaussian gradients of a loss whose gradient w.r.t. the rendered colour is ``dL_dcolor``.

    ``ctx`` must come from :func:`render_with_context` on the same camera and
    cloud; Gaussians culled in that forward pass receive zero gradient.
    """
    if ctx.camera is not camera and ctx.camera.id != camera.id:
        raise ContractViolation("backward camera differs from the forward camera")
    if ctx.n_gaussians != len(cloud) or ctx.fingerprint != cloud.fingerprint():
        raise ContractViolation("backward cloud differs from the forward cloud")
    H, W = camera.height, camera.width
    g_pix = np.asarray(dL_dcolor, dtype=np.float64).reshape(H * W, 3)
    proj = ctx.projection
    opts = ctx.opts
    m = len(proj)

    d_color = np.zeros((m, 3))
    d_opac = np.zeros(m)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))  # (A, B, C) with q = A dx^2 + 2 B dx dy + C dy^2
    g_bg = g_pix @ opts.bg

    for ti, tile in enumerate(ctx.tiles):
        s = tile.splats
        if len(s) == 0:
            continue
        st = ctx.tile_states[ti] if ctx.tile_states is not None else _tile_alpha(proj, tile, opts)
        g = g_pix[tile.pixel_rows]                     # (P, 3)
        gdotc = proj.color[s] @ g.T                     # (K, P)
        w = st["w"]
        contrib = w * gdotc
        after = contrib.sum(axis=0, keepdims=True) - np.cumsum(contrib, axis=0)
        after += st["t_final"][None, :] * g_bg[tile.pixel_rows][None, :]
        a = st["a"]
        dL_da = st["live"] * (st["T_before"] * gdotc - after / (1.0 - a))
        passes = st["used"] & (st["a_raw"] < MAX_ALPHA)
        dL_draw = np.where(passes, dL_da, 0.0)

        d_color[s] += w @ g
        d_opac[s] += np.sum(dL_draw * st["gexp"], axis=1)
        dq = -0.5 * dL_draw * st["a_raw"]
        dx, dy = st["dx"], st["dy"]
        A, B, C = proj.conic[s, 0:1], proj.conic[s, 1:2], proj.conic[s, 2:3]
        d_mean2d[s, 0] += np.sum(dq * (-2.0) * (A * dx + B * dy), axis=1)
        d_mean2d[s, 1] += np.sum(dq * (-2.0) * (B * dx + C * dy), axis=1)
        d_conic[s, 0] += np.sum(dq * dx * dx, axis=1)
        d_conic[s, 1] += np.sum(dq * 2.0 * dx * dy, axis=1)
        d_conic[s, 2] += np.sum(dq * dy * dy, axis=1)

    # conic -> cov2d (symmetric matrix gradients)
    conic_m = np.empty((m, 2, 2))
    conic_m[:, 0, 0] = proj.conic[:, 0]
    conic_m[:, 0, 1] = conic_m[:, 1, 0] = proj.conic[:, 1]
    conic_m[:, 1, 1] = proj.conic[:, 2]
    g_conic = np.empty((m, 2, 2))
    g_conic[:, 0, 0] = d_conic[:, 0]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_conic[:, 1, 1] = d_conic[:, 2]
    g_cov2 = -conic_m @ g_conic @ conic_m

    # cov2d = T Sigma T^T with T = J R_cam
    T = proj.T
    Tt = np.swapaxes(T, 1, 2)
    g_sigma = Tt @ g_cov2 @ T
    g_T = 2.0 * g_cov2 @ T @ proj.sigma
    g_J = g_T @ camera.R.T

    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    u, v = proj.uv_clamped[:, 0], proj.uv_clamped[:, 1]
    # J02 = -fx u / z with u = clip(x / z); the clamp cuts the dependence on x
    free_u = (u == x / z).astype(np.float64)
    free_v = (v == y / z).astype(np.float64)
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros((m, 3))
    g_t[:, 0] = d_mean2d[:, 0] * fx / z - g_J[:, 0, 2] * free_u * fx / z**2
    g_t[:, 1] = d_mean2d[:, 1] * fy / z - g_J[:, 1, 2] * free_v * fy / z**2
    g_t[:, 2] = (
        -d_mean2d[:, 0] * fx * x / z**2 - d_mean2d[:, 1] * fy * y / z**2
        - g_J[:, 0, 0] * fx / z**2 + g_J[:, 0, 2] * fx * (u / z**2 + free_u * x / z**3)
        - g_J[:, 1, 1] * fy / z**2 + g_J[:, 1, 2] * fy * (v / z**2 + free_v * y / z**3)
    )
    g_mean = g_t @ camera.R

    # Sigma = M M^T, M = R_q diag(s)
    g_M = 2.0 * g_sigma @ proj.M
    g_s = np.sum(g_M * proj.rot, axis=1)
    g_logs = g_s * proj.scales
    g_R = g_M * proj.scales[:, None, :]
    idx = proj.index
    g_q = _quat_backward(cloud.quats[idx], g_R)

    o = proj.opacity
    g_logit = d_opac * o * (1.0 - o)
    raw = proj.raw_color
    g_col = np.where((raw > 0.0) & (raw < 1.0), d_color, 0.0)

    out = Gradients.zeros(len(cloud))
    out.means[idx] = g_mean
    out.log_scales[idx] = g_logs
    out.quats[idx] = g_q
    out.opacity_logits[idx] = g_logit
    out.colors[idx] = g_col
    out.screen_grad_norm[idx] = np.hypot(d_mean2d[:, 0] * 0.5 * W, d_mean2d[:, 1] * 0.5 * H)
    out.visible[idx] = True
    return out
