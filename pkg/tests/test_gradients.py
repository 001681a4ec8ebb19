import dataclasses

import numpy as np
import pytest

from surfel_avatar import losses as L
from surfel_avatar.gradients import (fd_gradient_oracle, gradient_check, pack, param_labels, scene_fd_gradient,
                                     unpack)
from surfel_avatar.scenes import gradient_scene


def test_pack_unpack_roundtrip(rng):
    _, s = gradient_scene(rng, n=3)
    back = unpack(pack(s), 3)
    for k in s.PARAM_NAMES:
        assert np.array_equal(getattr(back, k), getattr(s, k))
    assert len(param_labels(3)) == len(pack(s))


def test_fd_oracle_on_known_function():
    f = lambda v: float(np.sum(np.sin(v) * v))
    x = np.array([0.3, -1.2, 2.0])
    for i in range(3):
        assert abs(fd_gradient_oracle(f, x, i, 1e-5) - (np.cos(x[i]) * x[i] + np.sin(x[i]))) < 1e-9


@pytest.mark.parametrize("seed", [11, 12])
def test_full_chain_matches_fd(seed):
    rng = np.random.default_rng(seed)
    scene, s = gradient_scene(rng, n=4)
    sub = rng.choice(len(pack(s)), 60, replace=False)
    res = gradient_check(scene, s, indices=sub)
    assert res.pass_fraction(1e-3) >= 0.95
    assert res.worst() <= 1e-2


def test_each_term_separately(rng):
    scene, s = gradient_scene(rng, n=4)
    full = scene.loss_weights
    terms = {"l1": dict(), "dssim": dict(dssim=0.5), "lpips": dict(lpips=0.5), "normal": dict(normal=1.0),
             "area": dict(area=50.0), "opacity": dict(opacity=1.0), "mask": dict(mask=1.0)}
    zero = L.LossWeights(dssim=0, lpips=0, normal=0, self_sup=1.0, area=0, opacity=0, mask=0)
    x = pack(s)
    idx = np.r_[0:12, 12:20, 28:32, 40:44, 44:50]
    for name, kw in terms.items():
        sc = dataclasses.replace(scene, loss_weights=dataclasses.replace(zero, **kw))
        res = gradient_check(sc, s, indices=idx)
        assert res.pass_fraction(1e-3) >= 0.9, name
        assert res.worst() <= 1e-2, name
    assert full.lpips > 0 and full.normal > 0


def test_normal_ablation_removes_exactly_the_depth_path(rng):
    scene, s = gradient_scene(rng, n=6)
    no_path = dataclasses.replace(scene, normal_depth_grad=False).step(s)
    no_term = dataclasses.replace(scene, loss_weights=dataclasses.replace(scene.loss_weights, normal=0.0)).step(s)
    assert np.array_equal(no_path.grads.flat(), no_term.grads.flat())
    assert not no_path.image_grads["depth"].any()
    with_path = scene.step(s)
    assert with_path.image_grads["depth"].any()


def test_area_ablation_changes_only_log_scales(rng):
    scene, s = gradient_scene(rng, n=6)
    a = scene.step(s).grads
    b = dataclasses.replace(scene, loss_weights=dataclasses.replace(scene.loss_weights, area=0.0)).step(s).grads
    for k in ("means", "quats", "opacity_logits", "sh"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    w = scene.loss_weights
    expect = w.self_sup * w.area * L.area_loss_grad_log(s.scales)
    assert np.abs((a.log_scales - b.log_scales) - expect).max() < 1e-15


def test_numpy_backend_gradients_agree(rng):
    scene, s = gradient_scene(rng, n=6)
    a = dataclasses.replace(scene, backend="numba").step(s).grads.flat()
    b = dataclasses.replace(scene, backend="numpy").step(s).grads.flat()
    assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(a).max())


def test_bruteforce_mode_gradients(rng):
    scene, s = gradient_scene(rng, n=4)
    sc = dataclasses.replace(scene, mode="bruteforce")
    res = gradient_check(sc, s, indices=np.arange(0, len(pack(s)), 7))
    assert res.pass_fraction() >= 0.95


def test_screen_grad_and_touched(rng):
    scene, s = gradient_scene(rng, n=6)
    r = scene.step(s)
    assert r.screen_grad.shape == (6,) and (r.screen_grad >= 0).all()
    assert np.array_equal(r.touched, r.outputs.records.touched(6))
    assert r.grads.all_finite()


def test_scene_fd_helper_matches_flat_loss(rng):
    scene, s = gradient_scene(rng, n=3)
    x = pack(s)
    i = 5
    e = np.zeros_like(x)
    e[i] = 1e-6
    manual = (scene.flat_loss(x + e, 3) - scene.flat_loss(x - e, 3)) / 2e-6
    assert scene_fd_gradient(scene, s, i, 1e-6) == pytest.approx(manual, rel=1e-12)
