import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfel_avatar.density import (DensifyConfig, DensifyStats, baseline_densify_and_prune, densify_and_prune,
                                   eccentricity, prune_reasons)
from surfel_avatar.geometry import SurfelSet, random_rotations


def _set(scales, opacity=0.5, rng=None):
    rng = rng or np.random.default_rng(0)
    scales = np.atleast_2d(np.asarray(scales, float))
    n = len(scales)
    R = random_rotations(n, rng)
    return SurfelSet.from_frames(rng.normal(size=(n, 3)), R[:, :, 0], R[:, :, 1], scales, opacity)


def _no_grad_stats(n):
    return DensifyStats(n)


def test_eccentricity_definitions():
    assert eccentricity([[9.0, 1.0]]) == pytest.approx(9.0)
    assert eccentricity([[1.0, 9.0]]) == pytest.approx(9.0)
    assert eccentricity([[5.0, 3.0]], "alt") == pytest.approx(4.0 / 3.0)
    with pytest.raises(ValueError):
        eccentricity([[1.0, 1.0]], "bogus")


def test_threshold_nine_prunes_and_keeps():
    cfg = DensifyConfig()
    assert cfg.eccentricity_threshold == 9.0
    s = _set([[9.1, 1.0], [8.9, 1.0]])
    out, ev, src = densify_and_prune(s, _no_grad_stats(2), cfg, 1000, extent=1000.0, rng=np.random.default_rng(0))
    assert ev.prunes_eccentricity == 1 and len(out) == 1 and src.tolist() == [1]


def test_prune_categories_do_not_double_count():
    s = _set([[9.1, 1.0], [50.0, 1.0], [1.0, 1.0]], opacity=[0.001, 0.5, 0.5])
    low, big, ecc = prune_reasons(s, DensifyConfig(), extent=100.0)
    # the first is both transparent and eccentric; it is charged to opacity only
    assert low.tolist() == [True, False, False]
    assert big.tolist() == [False, True, False]
    assert ecc.tolist() == [False, False, False]
    assert not (low & big).any() and not (low & ecc).any() and not (big & ecc).any()


def _random_case(seed, n=60):
    rng = np.random.default_rng(seed)
    R = random_rotations(n, rng)
    scales = np.exp(rng.uniform(np.log(0.001), np.log(0.3), (n, 2)))
    s = SurfelSet.from_frames(rng.normal(size=(n, 3)), R[:, :, 0], R[:, :, 1], scales, rng.uniform(0.001, 0.99, n))
    stats = DensifyStats(n)
    for _ in range(3):
        stats.update(rng.exponential(2e-4, n), rng.integers(0, 3, n), rng.normal(size=(n, 3)))
    return s, stats


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), thr=st.floats(1.5, 20.0), extent=st.floats(0.5, 5.0),
       definition=st.sampled_from(["ratio", "alt"]))
def test_post_pass_invariants(seed, thr, extent, definition):
    s, stats = _random_case(seed)
    cfg = DensifyConfig(eccentricity_threshold=thr, eccentricity_definition=definition)
    out, ev, src = densify_and_prune(s, stats, cfg, 1000, extent, np.random.default_rng(seed))
    sc = out.scales
    assert (out.opacity >= cfg.opacity_prune_threshold).all()
    assert (sc.max(1) <= cfg.max_world_size * extent).all()
    assert (eccentricity(sc, definition) <= thr).all()
    assert len(out) == len(s) + ev.clones + ev.splits - ev.prunes
    assert len(src) == len(out)
    kept = src[src >= 0]
    assert np.array_equal(out.means[src >= 0], s.means[kept])
    assert np.isfinite(out.means).all() and np.isfinite(out.log_scales).all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_infinite_threshold_is_baseline(seed):
    s, stats = _random_case(seed)
    cfg = DensifyConfig(eccentricity_threshold=float("inf"))
    a, ea, sa = densify_and_prune(s, stats, cfg, 1000, 1.0, np.random.default_rng(seed))
    b, eb, sb = baseline_densify_and_prune(s, stats, DensifyConfig(), 1000, 1.0, np.random.default_rng(seed))
    for k in SurfelSet.PARAM_NAMES:
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()
    assert ea == eb and np.array_equal(sa, sb)


def test_clone_and_split_geometry():
    rng = np.random.default_rng(3)
    s = _set([[0.001, 0.001], [0.2, 0.1]], opacity=0.5, rng=rng)
    stats = DensifyStats(2)
    stats.update(np.array([1.0, 1.0]), np.array([1, 1]), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    out, ev, src = densify_and_prune(s, stats, DensifyConfig(), 1000, extent=10.0, rng=rng)
    assert (ev.clones, ev.splits) == (1, 1)
    assert src.tolist() == [0, -1, -1, -1]
    # the clone keeps its size and is moved against the gradient by half its largest scale
    assert np.allclose(out.means[1], s.means[0] - [0.0005, 0, 0])
    # split children: scales / 1.6, centres in the parent's tangent plane
    assert np.allclose(out.scales[2:], s.scales[1] / 1.6)
    n = s.normals[1]
    assert np.abs((out.means[2:] - s.means[1]) @ n).max() < 1e-12


def test_schedule_and_validation():
    cfg = DensifyConfig(interval=100, start_iteration=500, stop_iteration=1500)
    assert [i for i in range(0, 2000, 100) if cfg.due(i)] == list(range(500, 1500, 100))
    assert not DensifyConfig(enabled=False).due(1000)
    with pytest.raises(ValueError):
        DensifyConfig(eccentricity_threshold=0.5)
    with pytest.raises(ValueError):
        DensifyConfig(eccentricity_definition="x")


def test_stats_mean_counts_only_visible():
    st_ = DensifyStats(3)
    st_.update(np.array([1.0, 2.0, 3.0]), np.array([1, 0, 2]))
    st_.update(np.array([3.0, 2.0, 1.0]), np.array([1, 0, 0]))
    assert st_.mean().tolist() == [2.0, 0.0, 3.0]
