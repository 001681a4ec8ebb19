import numpy as np
import pytest

from surfel_avatar.geometry import (Camera, SurfelSet, axis_angle_to_rotmat, look_at, polar_rotation,
                                    quat_to_rotmat, quat_to_rotmat_vjp, random_rotations, rotmat_to_quat)


def test_quat_roundtrip(rng):
    R = random_rotations(50, rng)
    R2 = quat_to_rotmat(rotmat_to_quat(R))
    assert np.abs(R - R2).max() < 1e-12


def test_quat_to_rotmat_is_rotation(rng):
    R = quat_to_rotmat(rng.normal(size=(20, 4)))
    assert np.allclose(np.einsum("nij,nkj->nik", R, R), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)


def test_quat_vjp_matches_fd(rng):
    q = rng.normal(size=(1, 4))
    G = rng.normal(size=(1, 3, 3))
    g = quat_to_rotmat_vjp(q, G)
    eps = 1e-6
    for k in range(4):
        dq = np.zeros_like(q)
        dq[0, k] = eps
        fd = (np.sum(G * quat_to_rotmat(q + dq)) - np.sum(G * quat_to_rotmat(q - dq))) / (2 * eps)
        assert abs(fd - g[0, k]) < 1e-7


def test_axis_angle():
    R = axis_angle_to_rotmat(np.array([[0.0, 0.0, np.pi / 2]]))[0]
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0])
    assert np.allclose(axis_angle_to_rotmat(np.zeros((1, 3)))[0], np.eye(3))


def test_polar_rotation_recovers_rotation(rng):
    R = random_rotations(30, rng)
    S = np.einsum("nij,nkj->nik", *(2 * [rng.normal(size=(30, 3, 3))])) + 0.5 * np.eye(3)
    Rp, ok = polar_rotation(np.einsum("nij,njk->nik", R, S))
    assert ok.all()
    assert np.abs(Rp - R).max() < 1e-9


def test_polar_rotation_flags_degenerate():
    M = np.zeros((2, 3, 3))
    M[1] = np.eye(3)
    Rp, ok = polar_rotation(M)
    assert not ok[0] and ok[1]
    assert np.allclose(Rp[0], np.eye(3))


def test_look_at_points_forward():
    cam = Camera(50, 50, 15.5, 15.5, 32, 32, look_at([0, 0, 3], [0, 0, 0]))
    assert np.allclose(cam.to_camera(np.zeros((1, 3))), [[0, 0, 3]])
    assert np.allclose(cam.project(np.zeros((1, 3))), [[15.5, 15.5]])


def test_camera_dict_roundtrip():
    cam = Camera(40, 41, 15, 16, 32, 30, look_at([1, 2, 3], [0, 0, 0]))
    back = Camera.from_dict(cam.to_dict())
    assert np.allclose(back.world_to_cam, cam.world_to_cam)
    assert (back.width, back.height, back.fx) == (32, 30, 40)


def test_surfel_set_frames(rng):
    R = random_rotations(5, rng)
    s = SurfelSet.from_frames(rng.normal(size=(5, 3)), R[:, :, 0], R[:, :, 1], [0.1, 0.2], 0.3)
    assert np.allclose(s.rotations, R, atol=1e-12)
    assert np.allclose(s.scales, [0.1, 0.2]) and np.allclose(s.opacity, 0.3)
    assert len(s.concat(s)) == 10 and len(s.select([0, 2])) == 2
