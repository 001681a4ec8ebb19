import numpy as np
import pytest

from surfel_avatar.geometry import SurfelSet, random_rotations
from surfel_avatar.optim import Adam, LearningRates


def _surfels(n, rng):
    R = random_rotations(n, rng)
    return SurfelSet.from_frames(rng.normal(size=(n, 3)), R[:, :, 0], R[:, :, 1], [0.1, 0.1], 0.5)


def test_first_step_moves_by_lr(rng):
    s = _surfels(3, rng)
    before = s.opacity_logits.copy()
    opt = Adam(s)
    g = {k: np.zeros_like(v) for k, v in s.params().items()}
    g["opacity_logits"] = np.array([2.0, -0.5, 0.0])
    opt.step(s, g)
    # bias-corrected Adam: the first update is lr * sign(g)
    assert np.allclose(s.opacity_logits - before, [-5e-2, 5e-2, 0.0])


def test_sh_rest_uses_reduced_lr(rng):
    s = _surfels(2, rng)
    sh0 = s.sh.copy()
    opt = Adam(s)
    g = {k: np.zeros_like(v) for k, v in s.params().items()}
    g["sh"] = np.ones_like(s.sh)
    opt.step(s, g)
    d = sh0 - s.sh
    assert np.allclose(d[:, 0], 2.5e-3) and np.allclose(d[:, 1:], 2.5e-3 * 0.05)


def test_means_lr_schedule():
    lr = LearningRates(means_decay_steps=100)
    assert lr.means_at(0) == pytest.approx(1.6e-4)
    assert lr.means_at(50) == pytest.approx(1.6e-5)
    assert lr.means_at(100) == pytest.approx(1.6e-6) == lr.means_at(1000)
    with pytest.raises(ValueError):
        LearningRates(quats=0.0)


def test_quats_stay_unit(rng):
    s = _surfels(5, rng)
    opt = Adam(s)
    for _ in range(10):
        g = {k: rng.normal(size=v.shape) for k, v in s.params().items()}
        opt.step(s, g)
    assert np.allclose(np.linalg.norm(s.quats, axis=1), 1.0)


def test_remap_zeroes_new_entries(rng):
    s = _surfels(3, rng)
    opt = Adam(s)
    opt.step(s, {k: np.ones_like(v) for k, v in s.params().items()})
    opt.remap(np.array([2, -1, 0]))
    assert np.allclose(opt.m["means"][0], 0.1)
    assert not opt.m["means"][1].any() and not opt.v["sh"][1].any()
    assert opt.m["means"].shape == (3, 3)


def test_state_roundtrip(rng):
    s = _surfels(4, rng)
    opt = Adam(s)
    opt.step(s, {k: rng.normal(size=v.shape) for k, v in s.params().items()})
    other = Adam(s)
    other.load_state_arrays(opt.state_arrays(), opt.step_count)
    for k in s.PARAM_NAMES:
        assert np.array_equal(other.m[k], opt.m[k]) and np.array_equal(other.v[k], opt.v[k])
    assert other.step_count == 1


def test_converges_on_quadratic(rng):
    s = _surfels(4, rng)
    target = rng.normal(size=(4, 3))
    opt = Adam(s, LearningRates(means=0.05, means_final=0.05))
    zero = {k: np.zeros_like(v) for k, v in s.params().items()}
    for _ in range(600):
        g = dict(zero, means=2 * (s.means - target))
        opt.step(s, g)
    assert np.abs(s.means - target).max() < 1e-2
