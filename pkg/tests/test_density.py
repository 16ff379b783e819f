import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ppac
from regionsplat.errors import InvalidInputError, TrainingCollapseError, TrainingDivergenceError
from regionsplat.scene_model import GaussianCloud, logit
from regionsplat.trainer.density import (PERCENT_DENSE, SPLIT_SHRINK, GradStats, densify_and_prune, ppac_factors,
                                         ppac_scale)
from regionsplat.trainer.optim import AdamState, adam_step

finite = st.floats(-50, 50, allow_nan=False)


@pytest.mark.parametrize("mu, r, expected", [
    ((0, 0, 0), 1.0, 1.0),
    ((2, 0, 0), 1.0, 1.0),          # m = 2r is inside the flat zone by continuity
    ((3, 0, 0), 1.0, 2.0),
    ((0, 0, 10), 0.5, 19.0),
])
def test_ppac_examples(mu, r, expected):
    assert ppac_scale(mu, (0, 0, 0), r) == pytest.approx(expected)


def test_ppac_boundary_is_exactly_one():
    assert ppac_scale((0.0, 0.010, 0.0), (0, 0, 0), 0.005) == 1.0


@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite), st.floats(1e-3, 20))
def test_ppac_matches_oracle(mu, c, r):
    assert ppac_scale(mu, c, r) == pytest.approx(ppac(mu, c, r), rel=1e-12)
    assert ppac_factors(np.array([mu]), c, r)[0] == pytest.approx(ppac(mu, c, r), rel=1e-12)


@given(st.floats(1e-3, 10), st.floats(0, 100), st.floats(0, 100))
def test_ppac_continuous_and_monotone(r, m1, m2):
    a, b = sorted((m1, m2))
    assert ppac_scale((a, 0, 0), (0, 0, 0), r) <= ppac_scale((b, 0, 0), (0, 0, 0), r) + 1e-12
    assert ppac_scale((a, 0, 0), (0, 0, 0), r) >= 1.0


def test_ppac_rejects_non_positive_radius():
    with pytest.raises(InvalidInputError):
        ppac_scale((1, 0, 0), (0, 0, 0), 0.0)


def cloud_of(means, scales, opac=0.5, radius=10.0):
    n = len(means)
    return GaussianCloud(means, np.log(np.asarray(scales, float)), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full(n, logit(opac)), np.full((n, 3), 0.5), scene_radius=radius)


def stats_with(n, grads, world=None):
    s = GradStats(n)
    s.add(np.asarray(grads, float), np.ones(n, bool), np.zeros((n, 3)) if world is None else np.asarray(world))
    return s


def test_clone_small_split_large():
    # scene radius 10: "large" means max scale above 0.1
    c = cloud_of([[0, 0, 1], [0, 0, 2], [0, 0, 3]], [[0.05] * 3, [0.5] * 3, [0.05] * 3])
    res = densify_and_prune(c, stats_with(3, [1.0, 1.0, 0.0], [[1, 0, 0]] * 3), 0.5, 0.005, None,
                            np.random.default_rng(0))
    assert (res.n_cloned, res.n_split, res.n_pruned) == (1, 1, 0)
    assert len(res.cloud) == 5
    # clone moves half a sigma against the accumulated world gradient
    np.testing.assert_allclose(res.cloud.means[3], [-0.025, 0, 1])
    # split children shrink by 1.6
    np.testing.assert_allclose(res.cloud.scales[[1, 4]], 0.5 / SPLIT_SHRINK)
    assert list(res.source_rows) == [0, 1, 2, 0, 1]
    assert list(res.fresh) == [False, True, False, True, True]


def test_ppac_blocks_split_of_distant_gaussian():
    # radius 10 so plain threshold 0.1; PPAC at r = 1 and distance 9 scales it by 8
    c = cloud_of([[9, 0, 0]], [[0.5] * 3])
    res = densify_and_prune(c, stats_with(1, [1.0]), 0.5, 0.005, 1.0, np.random.default_rng(0))
    assert (res.n_cloned, res.n_split) == (1, 0)
    res = densify_and_prune(c, stats_with(1, [1.0]), 0.5, 0.005, None, np.random.default_rng(0))
    assert (res.n_cloned, res.n_split) == (0, 1)
    assert PERCENT_DENSE * 10 * 8 > 0.5 > PERCENT_DENSE * 10


def test_prune_transparent_and_collapse():
    c = cloud_of([[0, 0, 1], [0, 0, 2]], [[0.05] * 3] * 2).replace(opacity_logits=np.array([logit(0.001), 0.0]))
    res = densify_and_prune(c, GradStats(2), 1.0, 0.005, None, np.random.default_rng(0))
    assert res.n_pruned == 1 and len(res.cloud) == 1
    c2 = c.replace(opacity_logits=np.full(2, logit(0.001)))
    with pytest.raises(TrainingCollapseError):
        densify_and_prune(c2, GradStats(2), 1.0, 0.005, None, np.random.default_rng(0))


def test_budget_keeps_largest_gradients():
    c = cloud_of([[0, 0, i] for i in range(4)], [[0.05] * 3] * 4)
    res = densify_and_prune(c, stats_with(4, [0.6, 0.9, 0.7, 0.1]), 0.5, 0.005, None,
                            np.random.default_rng(0), max_gaussians=6)
    assert list(res.source_rows[4:]) == [1, 2]


def test_stats_mean_over_visible_only():
    s = GradStats(2)
    s.add(np.array([1.0, 5.0]), np.array([True, False]), np.zeros((2, 3)))
    s.add(np.array([3.0, 5.0]), np.array([True, False]), np.zeros((2, 3)))
    np.testing.assert_allclose(s.mean(), [2.0, 0.0])


def test_stats_alignment_checked():
    with pytest.raises(InvalidInputError):
        densify_and_prune(cloud_of([[0, 0, 1]], [[0.1] * 3]), GradStats(2), 1, 0.005, None,
                          np.random.default_rng(0))


def test_adam_first_step_moves_by_lr():
    p = {"means": np.zeros((2, 3)), "quats": np.tile([1.0, 0, 0, 0], (2, 1))}
    g = {"means": np.array([[1.0, -2, 0.5], [0, 0, 0]]), "quats": np.zeros((2, 4))}
    st_ = AdamState()
    out = adam_step(p, g, st_, {"means": 0.1, "quats": 0.1})
    np.testing.assert_allclose(out["means"][0], [-0.1, 0.1, -0.1])
    np.testing.assert_allclose(out["means"][1], 0)
    np.testing.assert_allclose(np.linalg.norm(out["quats"], axis=1), 1)


def test_adam_rejects_non_finite():
    with pytest.raises(TrainingDivergenceError) as exc:
        adam_step({"means": np.zeros((2, 3))}, {"means": np.array([[0, 0, 0], [0, np.nan, 0]])}, AdamState(),
                  {"means": 0.1})
    assert exc.value.gaussian == 1


def test_adam_remap_zeroes_fresh_rows():
    st_ = AdamState({"means": np.array([[1.0] * 3, [2.0] * 3])}, {"means": np.array([[1.0] * 3, [2.0] * 3])})
    st_.remap(np.array([1, 0, 1]), np.array([False, False, True]))
    np.testing.assert_allclose(st_.m["means"][:, 0], [2, 1, 0])
