import numpy as np
import pytest

from surfel_avatar.geometry import SurfelSet, random_rotations
from surfel_avatar.rig import bend_pose, cylinder_template
from surfel_avatar.skinning import (PoseParams, SkinnedTemplate, TemplateError, WeightField, build_weight_field,
                                    joint_order, load_template, pose_to_joint_transforms, query_weights,
                                    save_template, skin_point, skin_surfels)


@pytest.fixture(scope="module")
def template():
    return cylinder_template()


@pytest.fixture(scope="module")
def field(template):
    return build_weight_field(template, resolution=24, diffusion_iters=20)


def test_identity_pose_is_fixed_point(template, field, rng):
    G = pose_to_joint_transforms(template, PoseParams.identity(2))
    assert np.abs(G - np.eye(4)).max() < 1e-15
    pts = rng.uniform(-0.2, 1.0, (200, 3))
    assert np.abs(skin_point(pts, query_weights(field, pts), G) - pts).max() <= 1e-12


def test_single_joint_rigid(template, rng):
    pose = bend_pose(40.0, root_twist_deg=20.0)
    pose.translation[:] = [0.1, -0.2, 0.3]
    G = pose_to_joint_transforms(template, pose)
    pts = rng.normal(size=(50, 3))
    for k in range(2):
        w = np.zeros((50, 2))
        w[:, k] = 1.0
        expect = pts @ G[k, :3, :3].T + G[k, :3, 3]
        assert np.abs(skin_point(pts, w, G) - expect).max() < 1e-14


def test_elbow_stays_put_under_bend(template):
    G = pose_to_joint_transforms(template, bend_pose(90.0))
    elbow = np.array([[0.0, 0.5, 0.0]])
    assert np.allclose(skin_point(elbow, np.array([[0.0, 1.0]]), G), elbow)
    tip = skin_point(np.array([[0.0, 1.0, 0.0]]), np.array([[0.0, 1.0]]), G)
    # 90 deg about +z swings the upper half toward -x
    assert np.allclose(tip, [[-0.5, 0.5, 0.0]])


def test_partition_of_unity(field, rng):
    pts = rng.uniform(field.bbox_min - 0.05, field.bbox_max + 0.05, (10000, 3))
    idx, w = query_weights(field, pts)
    assert np.abs(w.sum(1) - 1).max() < 1e-5 and (w >= 0).all()


def test_query_backends_agree(field, rng):
    pts = rng.uniform(field.bbox_min, field.bbox_max, (500, 3))
    a = query_weights(field, pts, backend="numba")
    b = query_weights(field, pts, backend="numpy")
    da = np.zeros((500, 2))
    db = np.zeros((500, 2))
    np.add.at(da, (np.arange(500)[:, None].repeat(a[0].shape[1], 1), a[0]), a[1])
    np.add.at(db, (np.arange(500)[:, None].repeat(b[0].shape[1], 1), b[0]), b[1])
    assert np.abs(da - db).max() < 1e-12


def test_field_matches_vertex_weights(template, field):
    idx, w = query_weights(field, template.rest_vertices)
    dense = np.zeros((len(w), 2))
    np.add.at(dense, (np.arange(len(w))[:, None].repeat(w.shape[1], 1), idx), w)
    # trilinear blur of a linear crossover: close to the template's own weights
    assert np.abs(dense - template.dense_weights()).mean() < 0.05


def test_field_bytes_roundtrip(field):
    back = WeightField.frombytes(field.tobytes())
    assert np.array_equal(back.idx, field.idx) and np.array_equal(back.weights, field.weights)


def test_skin_surfels_rigid_frames(template, rng):
    R = random_rotations(10, rng)
    s = SurfelSet.from_frames(rng.normal(size=(10, 3)), R[:, :, 0], R[:, :, 1], [0.1, 0.2], 0.5)
    G = pose_to_joint_transforms(template, bend_pose(60.0))
    w = (np.ones((10, 1), np.int64), np.ones((10, 1)))
    p = skin_surfels(s, w, G)
    assert np.allclose(p.r_u, R[:, :, 0] @ G[1, :3, :3].T)
    assert np.allclose(p.r_v, R[:, :, 1] @ G[1, :3, :3].T)
    assert np.allclose(p.scales, s.scales)


def test_blended_frames_stay_orthonormal(template, field, rng):
    R = random_rotations(100, rng)
    means = np.column_stack([rng.uniform(-0.1, 0.1, 100), rng.uniform(0.3, 0.7, 100), rng.uniform(-0.1, 0.1, 100)])
    s = SurfelSet.from_frames(means, R[:, :, 0], R[:, :, 1], [0.01, 0.01], 0.5)
    p = skin_surfels(s, field, pose_to_joint_transforms(template, bend_pose(80.0)))
    assert np.abs(np.sum(p.r_u * p.r_v, 1)).max() < 1e-12
    assert np.abs(np.linalg.norm(p.r_u, axis=1) - 1).max() < 1e-12


def test_template_roundtrip(template, tmp_path):
    save_template(template, tmp_path / "t.skel")
    back = load_template(tmp_path / "t.skel")
    assert back.digest() == template.digest()
    assert np.array_equal(back.rest_vertices, template.rest_vertices)


def test_template_validation():
    with pytest.raises(TemplateError):
        joint_order(np.array([1, 0]))
    with pytest.raises(TemplateError):
        SkinnedTemplate(np.zeros((1, 3)), np.zeros((0, 3)), [-1], np.eye(4)[None], [[0]], [[0.5]]).validate()


def test_pose_joint_mismatch(template):
    with pytest.raises(ValueError):
        pose_to_joint_transforms(template, PoseParams.identity(3))
    with pytest.raises(ValueError):
        PoseParams(np.full((2, 3), np.nan), np.zeros(3))
