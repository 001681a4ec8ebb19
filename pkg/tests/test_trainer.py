import csv

import numpy as np
import pytest

from surfel_avatar import io
from surfel_avatar.config import TrainConfig, config_from_dict
from surfel_avatar.rig import RIG_CONFIG, novel_pose_iou, silhouette_iou
from surfel_avatar.trainer import (LOG_COLUMNS, Avatar, TrainingError, area_variance, evaluate, evaluate_pairs,
                                   initial_surfels, normal_error, render_pose, train)


def _cfg(root, tmp_path, **kw):
    d = dict(RIG_CONFIG, dataset=str(root), output=str(tmp_path / "run"), weight_field_resolution=16,
             diffusion_iters=10, log_interval=5, checkpoint_interval=10)
    d.update(kw)
    return config_from_dict(d)


def test_zero_iterations_returns_initialisation(tiny_rig, tmp_path):
    cfg = _cfg(tiny_rig, tmp_path, iterations=0)
    ds = io.load_dataset(tiny_rig)
    res = train(cfg, ds)
    init = initial_surfels(ds.template, cfg.init_opacity)
    for k in init.PARAM_NAMES:
        assert np.array_equal(getattr(res.checkpoint.surfels, k), getattr(init, k))
    assert res.checkpoint.iteration == 0 and res.checkpoint_path.exists()
    assert len(init) == len(ds.template.rest_vertices)
    assert np.allclose(init.opacity, 0.1)


def test_short_run_logs_and_checkpoints(tiny_rig, tmp_path):
    cfg = _cfg(tiny_rig, tmp_path, iterations=25)
    res = train(cfg)
    rows = list(csv.reader(open(res.log_path)))
    assert tuple(rows[0]) == LOG_COLUMNS
    steps = [r for r in rows[1:] if r[0] == "step"]
    assert [int(r[1]) for r in steps] == [5, 10, 15, 20, 25]
    assert (tmp_path / "run" / "ckpt_000010.bin").exists() and (tmp_path / "run" / "ckpt_000020.bin").exists()
    back = io.load_checkpoint(res.checkpoint_path)
    assert back.iteration == 25 and back.optimizer_step == 25
    assert back.config_hash == cfg.hash()
    assert io.checkpoint_bytes(back) == res.checkpoint_path.read_bytes()


def test_loss_goes_down(tiny_rig, tmp_path):
    res = train(_cfg(tiny_rig, tmp_path, iterations=60, log_interval=1), write=False)
    tot = np.array([h[1] for h in res.history])
    assert tot[-10:].mean() < tot[:10].mean()


def test_nan_target_aborts_naming_term(tiny_rig, tmp_path):
    ds = io.load_dataset(tiny_rig)
    for s in ds.samples.values():
        s.rgb = s.rgb.copy()
        s.rgb[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss at iteration 0: term.*l1"):
        train(_cfg(tiny_rig, tmp_path, iterations=3), ds, write=False)


def test_empty_train_split(tiny_rig, tmp_path):
    ds = io.load_dataset(tiny_rig)
    ds.split["train"] = {"views": [], "frames": ds.frames}
    with pytest.raises(TrainingError, match="empty"):
        train(_cfg(tiny_rig, tmp_path, iterations=3), ds, write=False)


def test_seed_determinism(tiny_rig, tmp_path):
    a = train(_cfg(tiny_rig, tmp_path / "a", iterations=15), write=False).checkpoint
    b = train(_cfg(tiny_rig, tmp_path / "b", iterations=15), write=False).checkpoint
    c = train(_cfg(tiny_rig, tmp_path / "c", iterations=15, seed=5), write=False).checkpoint
    assert io.checkpoint_bytes(a) == io.checkpoint_bytes(b)
    assert io.checkpoint_bytes(a) != io.checkpoint_bytes(c)


def test_evaluate_identical_images():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    rep = evaluate_pairs([("00", img, img, None), ("01", img, img, None)])
    assert rep.mean_psnr == 100.0 and rep.mean_ssim == pytest.approx(1.0)
    assert "mean" in rep.table()


def test_evaluate_averages_views_first():
    a = np.zeros((4, 4, 3))
    rep = evaluate_pairs([("00", a + 0.1, a, None), ("00", a + 0.1, a, None), ("01", a + 0.01, a, None)])
    assert rep.mean_psnr == pytest.approx((20.0 + 40.0) / 2)


def test_render_and_eval_from_checkpoint(tiny_rig, tmp_path):
    res = train(_cfg(tiny_rig, tmp_path, iterations=10))
    ds = io.load_dataset(tiny_rig)
    rep = render_pose(res.checkpoint, [ds.poses["0000"], ds.poses["0002"]], [ds.cameras["00"]], tmp_path / "r",
                      cache_dir=tmp_path / "cache", write_depth=True)
    assert rep.frames == 2 and rep.fps > 0
    assert io.read_png(tmp_path / "r" / "00" / "0001.png", "RGB").shape == (32, 32, 3)
    assert io.read_plane(tmp_path / "r" / "00" / "0001.depth").shape == (32, 32)
    ev = evaluate(res.checkpoint, ds, "test", cache_dir=tmp_path / "cache")
    assert [r[0] for r in ev.rows] == ["01"] and np.isfinite(ev.mean_psnr)
    assert normal_error(res.checkpoint, ds, "test", cache_dir=tmp_path / "cache") >= 0
    assert area_variance(res.checkpoint.surfels) >= 0


def test_render_empty_pose_list_and_bad_joints(tiny_rig, tmp_path):
    res = train(_cfg(tiny_rig, tmp_path, iterations=0), write=False)
    ds = io.load_dataset(tiny_rig)
    rep = render_pose(res.checkpoint, [], [ds.cameras["00"]], tmp_path / "r", cache_dir=tmp_path / "cache")
    assert rep.frames == 0 and rep.paths == []
    from surfel_avatar.skinning import PoseParams
    with pytest.raises(ValueError, match="joints"):
        render_pose(res.checkpoint, [PoseParams.identity(3)], [ds.cameras["00"]], tmp_path / "r",
                    cache_dir=tmp_path / "cache")


def test_silhouette_iou():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[1:3] = True
    assert silhouette_iou(a, b) == pytest.approx(1 / 3)
    assert silhouette_iou(a & False, b & False) == 1.0
