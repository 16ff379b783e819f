import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import mask_fraction, nearest_centroid, visible_ids
from regionsplat.errors import ContractViolation, InvalidInputError, MergeError
from regionsplat.partitioner import KMeansModel, Region
from regionsplat.rasterizer import render
from regionsplat.router import (LOG_HEADER, DensePoints, RouteDecision, build_global, decision_log,
                                parse_decision_log, region_threshold, render_view, route)
from regionsplat.scene_model import GaussianCloud

from conftest import make_camera, random_cloud


def cloud_at(means, color=0.5):
    n = len(means)
    return GaussianCloud(means, np.full((n, 3), np.log(0.2)), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.zeros(n), np.full((n, 3), color))


TWO = KMeansModel([[-5.0, 0, 0], [5.0, 0, 0]])


def test_build_global_single_region_is_identity(rng):
    c = random_cloud(rng, 12)
    g = build_global([c], KMeansModel([[0.0, 0, 0]]))
    np.testing.assert_array_equal(g.means, c.means)
    np.testing.assert_array_equal(g.colors, c.colors)


def test_build_global_trims_to_own_cells():
    a = cloud_at([[-4.0, 0, 0], [4.0, 0, 0]], 0.1)
    b = cloud_at([[-3.0, 0, 0], [3.0, 0, 0]], 0.9)
    g = build_global([a, b], TWO)
    np.testing.assert_allclose(g.means, [[-4, 0, 0], [3, 0, 0]])
    np.testing.assert_allclose(g.colors[:, 0], [0.1, 0.9])
    np.testing.assert_allclose(g.scene_center, [-0.5, 0, 0])
    assert g.scene_radius == pytest.approx(3.5)


def test_build_global_tie_goes_to_region_zero():
    a = cloud_at([[-1.0, 0, 0]])
    b = cloud_at([[0.0, 1.0, 0]])  # equidistant: assigned to region 0, so region 1 drops it
    g = build_global([a, b], TWO)
    np.testing.assert_allclose(g.means, [[-1, 0, 0]])


def test_build_global_errors():
    with pytest.raises(MergeError):
        build_global([cloud_at([[5.0, 0, 0]]), cloud_at([[-5.0, 0, 0]])], TWO)
    with pytest.raises(InvalidInputError):
        build_global([cloud_at([[5.0, 0, 0]])], TWO)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4))
def test_build_global_partitions_means(seed, n):
    rng = np.random.default_rng(seed)
    model = KMeansModel(rng.uniform(-5, 5, (n, 3)))
    locals_ = [GaussianCloud(rng.uniform(-6, 6, (15, 3)), np.zeros((15, 3)), np.tile([1.0, 0, 0, 0], (15, 1)),
                             np.zeros(15), np.zeros((15, 3))) for _ in range(n)]
    try:
        g = build_global(locals_, model)
    except MergeError:
        assert all(nearest_centroid(m, model.centroids) != i for i, c in enumerate(locals_) for m in c.means)
        return
    expected = np.array([m for i, c in enumerate(locals_) for m in c.means
                         if nearest_centroid(m, model.centroids) == i])
    np.testing.assert_array_equal(g.means, expected)


def test_region_threshold_is_max_distance():
    cams = [make_camera(i, position=p) for i, p in enumerate([(1, 0, 0), (0, 4, 0), (0, 0, -2), (9, 9, 9)])]
    r = Region(0, [0, 0, 0], [0, 1, 2])
    assert region_threshold(r, cams) == pytest.approx(4.0)
    assert region_threshold(Region(1, [9, 9, 9], [3]), cams) == 0.0
    with pytest.raises(ContractViolation):
        region_threshold(Region(2, [0, 0, 0], []), cams)
    with pytest.raises(ContractViolation):
        region_threshold(Region(3, [0, 0, 0], [7]), cams)


def _grid(center_x, n=5, z=6.0):
    xs = np.linspace(-0.8, 0.8, n)
    return np.array([[center_x + x, y, z] for x in xs for y in xs])


def _routing_setup(n_regions=3):
    centroids = np.array([[0.0, 0, 0], [20.0, 0, 0], [40.0, 0, 0]])[:n_regions]
    model = KMeansModel(centroids)
    regions = [Region(i, c, [i], distance_threshold=2.0) for i, c in enumerate(centroids)]
    return model, regions


def test_route_local_at_centroid():
    model, regions = _routing_setup()
    dense = DensePoints.from_regions([_grid(0.0), _grid(20.0), _grid(40.0)])
    view = make_camera(9, position=(0.0, 0, 0), target=(0, 0, 6))
    d = route(view, model, regions, dense, 3, patch_px=1)
    assert d.is_local and d.local_region == 0
    assert d.own == d.total > 0 and d.distance == 0.0


def test_route_far_view_is_global():
    model, regions = _routing_setup()
    dense = DensePoints.from_regions([_grid(4.0), _grid(20.0), _grid(40.0)])
    view = make_camera(9, position=(4.0, 0, 0), target=(4, 0, 6))
    d = route(view, model, regions, dense, 3, patch_px=1)
    assert d.distance == pytest.approx(2 * d.threshold)
    assert not d.distance_ok and d.visibility_ok and not d.is_local


@pytest.mark.parametrize("own_share,local", [(0.3, False), (0.4, True)])
def test_route_visibility_share(own_share, local):
    model, regions = _routing_setup()
    # 10 distinct points in view, own_share of them owned by region 0
    pts = np.array([[x, 0.0, 6.0] for x in np.linspace(-1.5, 1.5, 10)])
    k = int(round(own_share * 10))
    dense = DensePoints(pts, [0] * k + [1] * (10 - k))
    view = make_camera(9, position=(0.5, 0, 0), target=(0.5, 0, 6), width=64, height=32)
    d = route(view, model, regions, dense, 3, patch_px=1)
    assert (d.own, d.total) == (k, 10)
    assert d.distance_ok and d.is_local == local


def test_route_zero_visibility_is_global_even_for_one_region():
    model, regions = _routing_setup(1)
    dense = DensePoints(np.array([[0.0, 0, -6]]), [0])  # behind the view
    d = route(make_camera(9, position=(0, 0, 0), target=(0, 0, 6)), model, regions, dense, 1)
    assert d.zero_visibility and not d.is_local and math.isnan(d.ratio)


def test_route_single_region_waives_share():
    model, regions = _routing_setup(1)
    dense = DensePoints(_grid(0.0), [0] * 25)
    d = route(make_camera(9, position=(0.5, 0, 0), target=(0, 0, 6)), model, regions, dense, 1)
    assert d.is_local


def test_route_rejects_bad_inputs():
    model, regions = _routing_setup()
    dense = DensePoints(_grid(0.0), [0] * 25)
    with pytest.raises(InvalidInputError):
        route(make_camera(), model, regions, dense, 0)
    with pytest.raises(ContractViolation):
        route(make_camera(), model, regions[1:], dense, 3)
    with pytest.raises(InvalidInputError):
        DensePoints(np.zeros((2, 3)), [0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_route_soundness(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    model = KMeansModel(rng.uniform(-3, 3, (n, 3)))
    regions = [Region(i, c, [0], distance_threshold=rng.uniform(0.5, 4)) for i, c in enumerate(model.centroids)]
    pts = rng.uniform(-4, 4, (60, 3)) + [0, 0, 6]
    dense = DensePoints(pts, model.assign(pts))
    view = make_camera(1, position=rng.uniform(-3, 3, 3), target=(0, 0, 6))
    d = route(view, model, regions, dense, n, patch_px=4)
    i = nearest_centroid(view.position, model.centroids)
    dist_ok = np.linalg.norm(view.position - model.centroids[i]) < regions[i].distance_threshold
    seen = visible_ids(view, pts, range(len(pts)), 4)
    own = sum(1 for k in seen if nearest_centroid(pts[k], model.centroids) == i)
    vis_ok = mask_fraction(own, len(seen), n)
    assert (d.own, d.total) == (own, len(seen))
    assert d.assigned_region == i
    assert d.distance_ok == dist_ok and d.visibility_ok == vis_ok
    assert d.is_local == (dist_ok and vis_ok)


def test_render_view_dispatch(rng):
    view = make_camera()
    locals_ = [random_cloud(rng, 6), random_cloud(rng, 6)]
    g = random_cloud(rng, 9)
    local = RouteDecision(1, 1, 0.0, 1.0, True, 3, 3, True, 2)
    glob = RouteDecision(None, 1, 5.0, 1.0, False, 3, 3, True, 2)
    np.testing.assert_array_equal(render_view(local, locals_, g, view).color, render(view, locals_[1]).color)
    np.testing.assert_array_equal(render_view(glob, locals_, g, view).color, render(view, g).color)
    with pytest.raises(ContractViolation):
        render_view(RouteDecision(5, 5, 0.0, 1.0, True, 1, 1, True, 6), locals_, g, view)


def test_single_region_local_and_global_agree(rng):
    view = make_camera()
    c = random_cloud(rng, 10)
    g = build_global([c], KMeansModel([[0.0, 0, 5]]))
    local = RouteDecision(0, 0, 0.0, 1.0, True, 1, 1, True, 1)
    glob = RouteDecision(None, 0, 0.0, 1.0, True, 1, 1, True, 1)
    np.testing.assert_array_equal(render_view(local, [c], g, view).color, render_view(glob, [c], g, view).color)


def test_decision_log_round_trip():
    rows = [(3, RouteDecision(0, 0, 1.25, 2.0, True, 4, 5, True, 3)),
            (8, RouteDecision(None, 2, 3.0, 2.0, False, 0, 0, False, 3))]
    text = decision_log(rows)
    assert text.splitlines()[0].split("\t") == list(LOG_HEADER)
    parsed = parse_decision_log(text)
    assert parsed[0]["verdict"] == "local" and parsed[0]["ratio"] == pytest.approx(0.8)
    assert parsed[0]["distance_ok"] and parsed[0]["visibility_ok"]
    assert parsed[1]["verdict"] == "global" and math.isnan(parsed[1]["ratio"])
    assert parsed[1]["region"] == 2 and not parsed[1]["distance_ok"]
    with pytest.raises(InvalidInputError):
        parse_decision_log("nope\n")
