import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from regionsplat.scene_model import Camera, GaussianCloud, intrinsics  # noqa: E402


def make_camera(id=0, width=32, height=32, f=30.0, position=(0.0, 0.0, 0.0), target=(0.0, 0.0, 5.0),
                up=(0.0, -1.0, 0.0)):
    K = intrinsics(f, f, width / 2.0, height / 2.0)
    return Camera.look_at(id, position, target, K, width, height, up=up)


def random_cloud(rng, n, depth=(3.0, 7.0), spread=1.5, scale=(0.05, 0.4), center=(0.0, 0.0)):
    z = rng.uniform(*depth, n)
    means = np.stack([rng.uniform(-spread, spread, n) * z / 5 + center[0],
                      rng.uniform(-spread, spread, n) * z / 5 + center[1], z], axis=1)
    log_scales = np.log(rng.uniform(*scale, (n, 3)))
    quats = rng.standard_normal((n, 4))
    opac = rng.uniform(-2.0, 3.0, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    return GaussianCloud(means, log_scales, quats, opac, colors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture(scope="session")
def three_room():
    from regionsplat.synthetic import generate_synthetic_scene, three_room_spec
    return generate_synthetic_scene(three_room_spec())


@pytest.fixture(scope="session")
def three_room_partition(three_room):
    from regionsplat.partitioner import partition_scene
    cams, cloud, _ = three_room
    return partition_scene(cams, cloud, 3, seed=0, patch_px=16, cloud_patch_px=1)
