"""Random test scenes for equivalence tests, gradient checks and benchmarks."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .geometry import Camera, SurfelSet, look_at, random_rotations


def random_camera(rng, size=32, distance=(2.0, 3.0), fov_deg=(35.0, 55.0), target=(0.0, 0.0, 0.0)):
    d = rng.uniform(*distance)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    eye = np.asarray(target) + d * direction
    up = np.array([0.0, 1.0, 0.0]) if abs(direction[1]) < 0.95 else np.array([1.0, 0.0, 0.0])
    f = 0.5 * size / np.tan(np.radians(rng.uniform(*fov_deg)) / 2)
    return Camera(f, f, (size - 1) / 2 + rng.uniform(-1, 1), (size - 1) / 2 + rng.uniform(-1, 1), size, size,
                  look_at(eye, target, up), near=0.05, far=50.0)


def random_surfels(rng, n, spread=0.5, scale=(0.04, 0.15), opacity=(0.2, 0.95), sh_noise=0.1):
    R = random_rotations(n, rng)
    s = SurfelSet.from_frames(rng.uniform(-spread, spread, (n, 3)), R[:, :, 0], R[:, :, 1],
                              rng.uniform(*scale, (n, 2)), rng.uniform(*opacity, n),
                              colors_dc=rng.uniform(0.1, 0.9, (n, 3)))
    s.sh[:, 1:] = rng.normal(0, sh_noise, s.sh[:, 1:].shape)
    return s


def _footprint(s: SurfelSet, camera: Camera, cutoff=3.0):
    """Camera-z interval and a conservative pixel box for every surfel."""
    from .raster import RasterSettings, prepare, screen_bounds
    from .geometry import as_posed

    posed = as_posed(s)
    prep = prepare(posed, camera, np.zeros((len(s), 3)))
    ext = cutoff * np.sqrt(prep["ca"][:, 2] ** 2 + prep["cb"][:, 2] ** 2)
    z = prep["cc"][:, 2]
    box, vis = screen_bounds(prep, camera, RasterSettings(cutoff=cutoff))
    return np.stack([z - ext, z + ext], axis=1), box, vis


def unambiguous_scene(rng, n, camera: Camera, candidates=3000, scale=(0.015, 0.06), spread=0.7, **kw):
    """Up to ``n`` surfels in which any two with overlapping screen boxes have disjoint depth ranges.

    In such scenes centre-depth order equals per-pixel intersection order, so
    tiled and brute-force rendering must agree to rounding.
    """
    pool = random_surfels(rng, candidates, spread=spread, scale=scale, **kw)
    zr, box, vis = _footprint(pool, camera)
    kept = []
    for i in np.flatnonzero(vis & (zr[:, 0] > camera.near)):
        if kept:
            k = np.array(kept)
            over = ~((box[i, 1] < box[k, 0]) | (box[k, 1] < box[i, 0]) | (box[i, 3] < box[k, 2]) | (box[k, 3] < box[i, 2]))
            clash = over & ~((zr[i, 1] < zr[k, 0]) | (zr[k, 1] < zr[i, 0]))
            if clash.any():
                continue
        kept.append(i)
        if len(kept) == n:
            break
    return pool.select(np.array(kept, dtype=np.int64))


def stress_scene(rng, n=48, spread=0.15):
    """Many large, interpenetrating surfels around the origin: maximal sort ambiguity."""
    return random_surfels(rng, n, spread=spread, scale=(0.1, 0.3), opacity=(0.3, 0.8))


def benchmark_scene(n=10000, size=256, seed=0):
    """A cloud of small surfels filling most of the view of a fixed camera."""
    rng = np.random.default_rng(seed)
    cam = Camera(size * 1.1, size * 1.1, (size - 1) / 2, (size - 1) / 2, size, size,
                 look_at([0.0, 0.0, 2.5], [0.0, 0.0, 0.0]), near=0.05, far=50.0)
    s = random_surfels(rng, n, spread=0.5, scale=(0.005, 0.02), opacity=(0.3, 0.95))
    return s, cam


@lru_cache(maxsize=1)
def _rig_field():
    from .rig import cylinder_template
    from .skinning import build_weight_field

    t = cylinder_template()
    return t, build_weight_field(t, resolution=24, diffusion_iters=20)


def gradient_scene(rng, n=8, size=16):
    """A posed rig scene with every loss term switched on: (Scene, canonical surfels).

    Surfels straddle the elbow so both joints and the polar frame matter;
    the target image, mask and normal map are random.
    """
    from types import SimpleNamespace

    from .gradients import Scene
    from .losses import GradientMagnitudeProxy, LossWeights
    from .rig import bend_pose
    from .skinning import pose_to_joint_transforms, query_weights

    tmpl, wf = _rig_field()
    means = np.c_[rng.uniform(-0.1, 0.1, n), rng.uniform(0.2, 0.8, n), rng.uniform(-0.1, 0.1, n)]
    R = random_rotations(n, rng)
    s = SurfelSet.from_frames(means, R[:, :, 0], R[:, :, 1], rng.uniform(0.1, 0.2, (n, 2)), rng.uniform(0.5, 0.95, n),
                              colors_dc=rng.uniform(0.2, 0.8, (n, 3)))
    s.sh[:, 1:] = rng.normal(0, 0.1, s.sh[:, 1:].shape)
    eye = np.array([rng.uniform(-0.6, 0.6), rng.uniform(0.3, 0.9), 2.0])
    f = size * rng.uniform(1.1, 1.4)
    cam = Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size, look_at(eye, [0.0, 0.5, 0.0]), near=0.05)
    nm = rng.normal(size=(size, size, 3)) + [0.0, 0.0, -3.0]
    frame = SimpleNamespace(camera=cam, rgb=rng.uniform(0, 1, (size, size, 3)),
                            mask=rng.uniform(size=(size, size)) > 0.3,
                            normal_map=nm / np.linalg.norm(nm, axis=-1, keepdims=True))
    G = pose_to_joint_transforms(tmpl, bend_pose(rng.uniform(0, 90)))
    weights = LossWeights(dssim=0.2, lpips=0.1, normal=0.5, self_sup=1.0, area=10.0, opacity=0.3, mask=0.1)
    scene = Scene(frame, G, query_weights(wf, s.means), weights, perceptual=GradientMagnitudeProxy())
    return scene, s
