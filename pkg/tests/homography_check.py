"""Plane-induced homography identity on random planes and camera pairs."""

import numpy as np

from regionsplat.patchmatch import PlaneHypothesis, homography, warp_pixel
from regionsplat.scene_model import Camera, intrinsics


def random_camera(rng, id):
    K = intrinsics(rng.uniform(40, 120), rng.uniform(40, 120), rng.uniform(20, 44), rng.uniform(20, 44))
    pos = rng.uniform(-1, 1, 3)
    target = np.array([0.0, 0.0, 6.0]) + rng.uniform(-1, 1, 3)
    return Camera.look_at(id, pos, target, K, 64, 64, up=(0.0, -1.0, 0.0))


def draw(rng):
    """Reference/source cameras, a plane in reference coordinates facing the
    reference camera, and a reference pixel whose ray meets the plane."""
    ref, src = random_camera(rng, 0), random_camera(rng, 1)
    while True:
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        if n[2] > -0.3:
            continue
        d = rng.uniform(2, 10)
        p = rng.uniform(0, 64, 2)
        ray = np.array([(p[0] - ref.cx) / ref.fx, (p[1] - ref.cy) / ref.fy, 1.0])
        if n @ ray < -0.1:
            return ref, src, PlaneHypothesis(d, n), p, ray


def max_warp_error(n_draws=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for _ in range(n_draws):
        ref, src, plane, p, ray = draw(rng)
        X_ref = ray * (-plane.d / (plane.n @ ray))
        assert abs(plane.n @ X_ref + plane.d) < 1e-9
        X = ref.to_world(X_ref[None])[0]
        uv, z, _ = src.project(X[None])
        if z[0] <= 1e-6:
            continue  # behind the source camera: no projection to compare with
        q = warp_pixel(homography(plane, ref, src), p)
        worst = max(worst, float(np.abs(q - uv[0]).max()))
        checked += 1
    return worst, checked
