import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import mask_fraction, nearest_centroid, visible_ids
from regionsplat.errors import EmptyRegionError, InvalidInputError, PartitionError
from regionsplat.partitioner import (KMeansModel, Region, _repair_empty, assign_region, build_region_cloud, camera_mask,
                                     distance_threshold, fit_kmeans, load_partition, mask_rule,
                                     partition_scene, save_partition, visibility_counts)
from regionsplat.scene_model import PointCloud
from regionsplat.synthetic import doorway_camera_index

from conftest import make_camera


def test_kmeans_k_equals_n():
    pts = np.array([[0.0, 0, 0], [5, 1, 0], [2, 9, 3]])
    m = fit_kmeans(pts, 3, seed=4)
    assert sorted(map(tuple, m.centroids)) == sorted(map(tuple, pts))


def test_kmeans_two_blobs(rng):
    a = rng.normal(0, 1, (10, 3))
    b = rng.normal(0, 1, (10, 3)) + [100, 0, 0]
    m = fit_kmeans(np.vstack([a, b]), 2, seed=0)
    labels = m.assign(np.vstack([a, b]))
    assert len(set(labels[:10])) == 1 and len(set(labels[10:])) == 1 and labels[0] != labels[10]


def test_kmeans_deterministic(rng):
    pts = rng.random((40, 3))
    assert np.array_equal(fit_kmeans(pts, 4, 7).centroids, fit_kmeans(pts, 4, 7).centroids)


def test_kmeans_errors():
    with pytest.raises(InvalidInputError):
        fit_kmeans(np.zeros((2, 3)), 3)
    with pytest.raises(InvalidInputError):
        fit_kmeans(np.zeros((2, 3)), 0)


def test_kmeans_repairs_empty_cluster():
    # only two distinct positions for three clusters: one cluster must be re-seeded
    pts = np.array([[0.0, 0, 0]] * 5 + [[1.0, 0, 0]])
    m = fit_kmeans(pts, 3, seed=0)
    assert m.n == 3 and np.all(np.isfinite(m.centroids))
    assert sorted(map(tuple, m.centroids)) == [(0, 0, 0), (0, 0, 0), (1, 0, 0)]


def test_repair_empty_steals_farthest_from_large_cluster():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [3.0, 0, 0], [9.0, 0, 0]])
    c = np.array([[1.0, 0, 0], [9.0, 0, 0], [50.0, 0, 0]])
    assert _repair_empty(pts, c, np.array([0, 0, 0, 1])).tolist() == [0, 0, 2, 1]


def test_assign_region_ties_and_errors():
    m = KMeansModel([[0.0, 0, 0], [2, 0, 0], [5, 5, 5]])
    assert assign_region([5, 5, 5], m) == 2
    assert assign_region([1, 0, 0], m) == 0
    with pytest.raises(InvalidInputError):
        assign_region([np.nan, 0, 0], m)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_assign_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(-3, 4, (int(rng.integers(1, 6)), 3)).astype(float)
    p = rng.integers(-4, 5, (20, 3)).astype(float)  # integer grid produces exact ties
    m = KMeansModel(c)
    assert [assign_region(x, m) for x in p] == [nearest_centroid(x, c) for x in p]


@pytest.mark.parametrize("m_a, m_c, n, expected", [
    (40, 100, 3, True), (15, 100, 5, False), (20, 100, 5, False), (1, 3, 3, False),
    (0, 0, 3, False), (5, 5, 1, True), (0, 5, 1, True), (0, 0, 1, False),
])
def test_mask_rule_examples(m_a, m_c, n, expected):
    assert mask_rule(m_a, m_c, n) is expected


@given(st.integers(0, 500), st.integers(0, 500), st.integers(1, 12))
def test_mask_rule_matches_rational_oracle(m_a, m_c, n):
    m_a = min(m_a, m_c)
    assert mask_rule(m_a, m_c, n) == mask_fraction(m_a, m_c, n)


def test_camera_mask_uses_visibility(rng):
    cam = make_camera()
    pos = np.column_stack([rng.uniform(-2, 2, 50), rng.uniform(-2, 2, 50), rng.uniform(3, 8, 50)])
    cloud = PointCloud(np.arange(50), pos)
    vis = visible_ids(cam, pos, cloud.ids, 4)
    region = set(list(vis)[: len(vis) // 2 + 1])
    assert visibility_counts(cam, region, cloud, 4) == (len(region), len(vis))
    assert camera_mask(cam, region, cloud, 2, 4) is mask_fraction(len(region), len(vis), 2)


def test_build_region_cloud_union():
    cam_a = make_camera(0)
    cam_b = make_camera(1, position=(3.0, 0, 0), target=(3.0, 0, 5))
    cloud = PointCloud([1, 2, 5, 9], [[0, 0, 5], [1.5, 0, 5], [3, 0, 5], [0, 0, -5]])
    assert build_region_cloud([cam_a], cloud, 1) == {1, 2}
    assert build_region_cloud([cam_a, cam_b], cloud, 1) == {1, 2, 5}
    with pytest.raises(EmptyRegionError):
        build_region_cloud([cam_a], PointCloud([9], [[0, 0, -5]]), 1)


def test_partition_single_region_keeps_every_seeing_camera(three_room):
    cams, cloud, _ = three_room
    part = partition_scene(cams, cloud, 1, patch_px=16)
    assert part.regions[0].camera_ids == sorted(c.id for c in cams)


def test_partition_three_rooms(three_room, three_room_partition):
    cams, cloud, _ = three_room
    part = three_room_partition
    door = doorway_camera_index()
    rooms = [set(range(0, 10)), set(range(11, 21)), set(range(21, 31))]
    for r in part.regions:
        members = set(r.camera_ids)
        room = next(rm for rm in rooms if rm <= members)
        assert members - room <= {door}
        assert r.assigned_point_ids < r.point_ids
    assert sum(door in r.camera_ids for r in part.regions) == 2


def test_partition_invariants(three_room, three_room_partition):
    cams, cloud, _ = three_room
    by_id = {c.id: c for c in cams}
    labels = three_room_partition.model.assign(cloud.positions)
    for r in three_room_partition.regions:
        owned = set(cloud.ids[labels == r.id].tolist())
        assert owned == r.assigned_point_ids
        for cid in r.camera_ids:
            assert camera_mask(by_id[cid], owned, cloud, 3, 16)
        assert r.distance_threshold == pytest.approx(distance_threshold(r.centroid, [by_id[c] for c in r.camera_ids]))


def test_partition_scale_invariance(three_room, three_room_partition):
    cams, cloud, _ = three_room
    s = 3.7
    scaled = partition_scene([c.scaled(s) for c in cams], cloud.scaled(s), 3, seed=0, patch_px=16, cloud_patch_px=1)
    for a, b in zip(three_room_partition.regions, scaled.regions):
        assert a.camera_ids == b.camera_ids and a.point_ids == b.point_ids


def test_partition_degenerate_cameras():
    cams = [make_camera(i) for i in range(4)]
    cloud = PointCloud(np.arange(3), [[0, 0, 5], [0.5, 0, 5], [0, 0.5, 5]])
    with pytest.raises(PartitionError, match="region 1"):
        partition_scene(cams, cloud, 2)


def test_partition_requires_enough_cameras():
    with pytest.raises(InvalidInputError):
        partition_scene([make_camera()], PointCloud([1], [[0, 0, 5]]), 2)


def test_partition_file_roundtrip(tmp_path, three_room_partition):
    save_partition(tmp_path / "p.json", three_room_partition)
    back = load_partition(tmp_path / "p.json")
    np.testing.assert_array_equal(back.model.centroids, three_room_partition.model.centroids)
    for a, b in zip(back.regions, three_room_partition.regions):
        assert a.to_dict() == b.to_dict()
    assert "camera_ids" in three_room_partition.summary().split("\n")[0]


def test_load_partition_malformed(tmp_path):
    (tmp_path / "p.json").write_text('{"regions": []}')
    with pytest.raises(InvalidInputError):
        load_partition(tmp_path / "p.json")
    with pytest.raises(InvalidInputError):
        load_partition(tmp_path / "missing.json")


def test_region_dict_roundtrip():
    r = Region(2, [1, 2, 3], [5, 1], {4, 2}, 1.5, {2})
    assert Region.from_dict(r.to_dict()).to_dict() == r.to_dict()
