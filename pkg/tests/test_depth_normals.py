import numpy as np
import pytest

from surfel_avatar.geometry import Camera, SurfelSet, look_at
from surfel_avatar.raster import normals_from_depth, normals_from_depth_vjp, render_bruteforce


def _cam(size=24, f=30.0):
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size)


def plane_depth(cam, n, d):
    """Depth map of the camera-space plane n . X = d (rays have unit z)."""
    r = cam.ray_dirs()
    return d / (r @ n)


def test_fronto_parallel_plane():
    cam = _cam()
    n = normals_from_depth(np.full((24, 24), 2.0), cam)
    assert np.abs(n[:-1, :-1] - [0, 0, -1]).max() < 1e-12
    assert not n[-1].any() and not n[:, -1].any()


def test_tilted_plane():
    cam = _cam()
    nrm = np.array([0.3, -0.4, -1.0])
    nrm /= np.linalg.norm(nrm)
    depth = plane_depth(cam, nrm, -2.0)
    assert (depth > 0).all()
    n = normals_from_depth(depth, cam)
    assert np.abs(n[:-1, :-1] - nrm).max() < 1e-9


def test_background_neighbours_give_zero_normal():
    cam = _cam()
    depth = np.full((24, 24), 2.0)
    depth[10, 10] = 0.0
    n = normals_from_depth(depth, cam)
    assert not n[10, 10].any() and not n[9, 10].any() and not n[10, 9].any()
    assert n[9, 9].any()


def test_vjp_fd(rng):
    cam = _cam(8, 10.0)
    depth = 2.0 + 0.1 * rng.normal(size=(8, 8))
    depth[0, 3] = 0.0
    g = rng.normal(size=(8, 8, 3))
    gd = normals_from_depth_vjp(depth, cam, g)
    eps = 1e-6
    for idx in [(2, 2), (4, 5), (7, 7), (1, 3)]:
        e = np.zeros_like(depth)
        e[idx] = eps
        fd = (np.sum(g * normals_from_depth(depth + e, cam)) - np.sum(g * normals_from_depth(depth - e, cam))) / (2 * eps)
        assert abs(fd - gd[idx]) < 1e-6


def test_rendered_surfel_normal_matches_orientation():
    cam = Camera(40, 40, 15.5, 15.5, 32, 32, look_at([0, 0, 3], [0, 0, 0]))
    a = np.radians(25)
    ru = [np.cos(a), 0, np.sin(a)]
    s = SurfelSet.from_frames([[0, 0, 0]], [ru], [[0, 1, 0]], [[1.0, 1.0]], 0.99, colors_dc=[[1, 1, 1]])
    out = render_bruteforce(s, cam, 0)
    n_world = np.cross(ru, [0, 1, 0])
    n_cam = cam.rotation @ n_world
    n_cam = -n_cam if n_cam[2] > 0 else n_cam
    inner = out.normal[8:24, 8:24].reshape(-1, 3)
    assert np.abs(inner - n_cam).max() < 1e-6
