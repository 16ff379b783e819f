"""Independent brute-force re-derivations used as test oracles.

Nothing here imports the package's numerical kernels; each function recomputes
its quantity from first principles, one element at a time.
"""

import math

import numpy as np


def quat_matrix(q):
    w, x, y, z = np.asarray(q, float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def naive_render(camera, cloud, background=(0.0, 0.0, 0.0), alpha_threshold=1 / 255, t_floor=1e-4):
    """Per-pixel compositing over every Gaussian in front of the camera, globally depth sorted."""
    fx, fy, cx, cy = camera.K[0, 0], camera.K[1, 1], camera.K[0, 2], camera.K[1, 2]
    splats = []
    for i in range(len(cloud)):
        t = camera.R @ cloud.means[i] + camera.t
        if t[2] <= 1e-6:
            continue
        R = quat_matrix(cloud.quats[i])
        S = np.diag(np.exp(cloud.log_scales[i]))
        cov3 = R @ S @ S @ R.T
        lu, lv = 1.3 * camera.width / (2 * fx), 1.3 * camera.height / (2 * fy)
        u, v = min(max(t[0] / t[2], -lu), lu), min(max(t[1] / t[2], -lv), lv)
        J = np.array([[fx / t[2], 0, -fx * u / t[2]], [0, fy / t[2], -fy * v / t[2]]])
        W = J @ camera.R
        cov2 = W @ cov3 @ W.T + 0.3 * np.eye(2)
        mu = np.array([fx * t[0] / t[2] + cx, fy * t[1] / t[2] + cy])
        sig = math.sqrt(max(np.linalg.eigvalsh(cov2)))
        if not (-3 * sig <= mu[0] < camera.width + 3 * sig and -3 * sig <= mu[1] < camera.height + 3 * sig):
            continue
        op = 1 / (1 + math.exp(-cloud.opacity_logits[i]))
        splats.append((t[2], i, mu, np.linalg.inv(cov2), np.clip(cloud.colors[i], 0, 1), op))
    splats.sort(key=lambda s: (s[0], s[1]))
    img = np.zeros((camera.height, camera.width, 3))
    for v in range(camera.height):
        for u in range(camera.width):
            T, c = 1.0, np.zeros(3)
            for _, _, mu, conic, col, op in splats:
                if T < t_floor:
                    break
                d = np.array([u, v], float) - mu
                a = op * math.exp(-0.5 * d @ conic @ d)
                if a < alpha_threshold:
                    continue
                a = min(a, 0.99)
                c += col * a * T
                T *= 1 - a
            img[v, u] = c + T * np.asarray(background, float)
    return img


def dense_render(camera, cloud, background=(0.0, 0.0, 0.0), alpha_threshold=1 / 255, t_floor=1e-4):
    """Same compositing rule as :func:`naive_render`, vectorised over pixels:
    every pixel walks the globally depth-sorted splat list, no tiles."""
    fx, fy, cx, cy = camera.K[0, 0], camera.K[1, 1], camera.K[0, 2], camera.K[1, 2]
    lu, lv = 1.3 * camera.width / (2 * fx), 1.3 * camera.height / (2 * fy)
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    px = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
    splats = []
    for i in range(len(cloud)):
        t = camera.R @ cloud.means[i] + camera.t
        if t[2] <= 1e-6:
            continue
        R = quat_matrix(cloud.quats[i])
        S = np.diag(np.exp(cloud.log_scales[i]))
        tu, tv = min(max(t[0] / t[2], -lu), lu), min(max(t[1] / t[2], -lv), lv)
        J = np.array([[fx / t[2], 0, -fx * tu / t[2]], [0, fy / t[2], -fy * tv / t[2]]])
        W = J @ camera.R
        cov2 = W @ R @ S @ S @ R.T @ W.T + 0.3 * np.eye(2)
        mu = np.array([fx * t[0] / t[2] + cx, fy * t[1] / t[2] + cy])
        sig = math.sqrt(max(np.linalg.eigvalsh(cov2)))
        if not (-3 * sig <= mu[0] < camera.width + 3 * sig and -3 * sig <= mu[1] < camera.height + 3 * sig):
            continue
        op = 1 / (1 + math.exp(-cloud.opacity_logits[i]))
        splats.append((t[2], i, mu, np.linalg.inv(cov2), np.clip(cloud.colors[i], 0, 1), op))
    splats.sort(key=lambda s: (s[0], s[1]))
    T = np.ones(len(px))
    c = np.zeros((len(px), 3))
    for _, _, mu, conic, col, op in splats:
        d = px - mu
        a = op * np.exp(-0.5 * np.einsum("pi,ij,pj->p", d, conic, d))
        a = np.where((a >= alpha_threshold) & (T >= t_floor), np.minimum(a, 0.99), 0.0)
        c += a[:, None] * T[:, None] * col
        T = T * (1 - a)
    c += T[:, None] * np.asarray(background, float)
    return c.reshape(camera.height, camera.width, 3)


def visible_ids(camera, positions, ids, patch_px):
    """Nearest point per patch cell by exhaustive scan (ties to the lowest id)."""
    best = {}
    for p, pid in zip(positions, ids):
        t = camera.R @ p + camera.t
        if t[2] <= 1e-6:
            continue
        u = camera.K[0, 0] * t[0] / t[2] + camera.K[0, 2]
        v = camera.K[1, 1] * t[1] / t[2] + camera.K[1, 2]
        if not (0 <= u < camera.width and 0 <= v < camera.height):
            continue
        cell = (int(v // patch_px), int(u // patch_px))
        if cell not in best or (t[2], pid) < best[cell]:
            best[cell] = (t[2], pid)
    return {pid for _, pid in best.values()}


def mask_fraction(m_a, m_c, n):
    """Camera mask with exact rational arithmetic."""
    from fractions import Fraction
    if m_c == 0:
        return False
    if n == 1:
        return True
    return Fraction(m_a, m_c) > Fraction(1, n)


def ppac(mu, center, r):
    m = math.dist(mu, center)
    return 1.0 if m < 2 * r else m / r - 1


def nearest_centroid(p, centroids):
    best, arg = None, None
    for k, c in enumerate(centroids):
        d = sum((a - b) ** 2 for a, b in zip(p, c))
        if best is None or d < best:
            best, arg = d, k
    return arg
