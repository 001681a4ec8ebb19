"""Procedural two-bone cylinder rig and the synthetic multi-view dataset built on it."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import Camera, SurfelSet, look_at, normalize
from .skinning import PoseParams, SkinnedTemplate, build_weight_field, pose_to_joint_transforms, save_template, skin_surfels


def cylinder_template(radius=0.15, length=1.0, n_around=24, n_along=21, cap_rings=3, blend=0.25):
    """Capped vertical cylinder (y from 0 to ``length``) driven by a root and an elbow joint.

    The elbow sits at mid-height; skinning weights cross over linearly in a
    band of ``blend * length`` around it.
    """
    theta = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    ys = np.linspace(0, length, n_along)
    side = np.stack([np.repeat(radius * np.cos(theta)[None], n_along, 0),
                     np.repeat(ys[:, None], n_around, 1),
                     np.repeat(radius * np.sin(theta)[None], n_along, 0)], axis=-1).reshape(-1, 3)
    verts = [side]
    faces = []
    for i in range(n_along - 1):
        for j in range(n_around):
            a, b = i * n_around + j, i * n_around + (j + 1) % n_around
            c, d = a + n_around, b + n_around
            faces += [(a, c, b), (b, c, d)]
    base = len(side)
    for y, ring0 in ((0.0, 0), (length, (n_along - 1) * n_around)):
        prev = [ring0 + j for j in range(n_around)]
        for r in range(cap_rings - 1, 0, -1):
            rr = radius * r / cap_rings
            ring = np.stack([rr * np.cos(theta), np.full(n_around, y), rr * np.sin(theta)], axis=-1)
            ids = list(range(base, base + n_around))
            verts.append(ring)
            base += n_around
            for j in range(n_around):
                faces += [(prev[j], ids[j], prev[(j + 1) % n_around]),
                          (prev[(j + 1) % n_around], ids[j], ids[(j + 1) % n_around])]
            prev = ids
        verts.append(np.array([[0.0, y, 0.0]]))
        centre = base
        base += 1
        for j in range(n_around):
            faces.append((prev[j], centre, prev[(j + 1) % n_around]))
    V = np.concatenate(verts)
    w1 = np.clip((V[:, 1] - (0.5 - blend / 2) * length) / (blend * length), 0.0, 1.0)
    rest = np.repeat(np.eye(4)[None], 2, 0)
    rest[1, 1, 3] = 0.5 * length
    return SkinnedTemplate(V, np.array(faces), [-1, 0], rest,
                           np.tile([0, 1], (len(V), 1)), np.stack([1 - w1, w1], axis=1))


def bend_pose(angle_deg, axis=(0.0, 0.0, 1.0), root_twist_deg=0.0):
    """Elbow bend about ``axis`` plus an optional twist of the whole rig about +y."""
    axis = normalize(np.asarray(axis, dtype=float))
    return PoseParams.from_axis_angle([np.radians(root_twist_deg) * np.array([0.0, 1.0, 0.0]),
                                       np.radians(angle_deg) * axis])


def texture(points, length=1.0):
    """Smooth procedural albedo on the cylinder surface (canonical coordinates)."""
    ang = np.arctan2(points[:, 2], points[:, 0])
    h = points[:, 1] / length
    r = 0.5 + 0.35 * np.sin(2 * ang + 3.0 * h)
    g = 0.5 + 0.3 * np.cos(4.0 * np.pi * h)
    b = 0.45 + 0.35 * np.sin(ang - 2.0 * h + 1.0)
    return np.clip(np.stack([r, g, b], axis=1), 0.02, 0.98)


def ground_truth_surfels(radius=0.15, length=1.0, n_around=96, n_along=80, cap_rings=8):
    """Dense, opaque, textured surfels tiling the cylinder surface and its caps."""
    theta = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    ys = (np.arange(n_along) + 0.5) / n_along * length
    T, Y = np.meshgrid(theta, ys)
    T, Y = T.ravel(), Y.ravel()
    pts = np.stack([radius * np.cos(T), Y, radius * np.sin(T)], axis=1)
    n_out = np.stack([np.cos(T), np.zeros_like(T), np.sin(T)], axis=1)
    r_u = np.stack([-np.sin(T), np.zeros_like(T), np.cos(T)], axis=1)
    r_v = np.cross(n_out, r_u)
    su = 2 * np.pi * radius / n_around * 0.75
    sv = length / n_along * 0.75
    scales = np.tile([su, sv], (len(pts), 1))
    caps_p, caps_u, caps_v, caps_s = [], [], [], []
    for y, sgn in ((0.0, -1.0), (length, 1.0)):
        for r in range(cap_rings):
            rr = radius * (r + 0.5) / cap_rings
            m = max(6, int(round(2 * np.pi * rr / (radius / cap_rings))))
            th = np.linspace(0, 2 * np.pi, m, endpoint=False)
            caps_p.append(np.stack([rr * np.cos(th), np.full(m, y), rr * np.sin(th)], axis=1))
            caps_u.append(np.stack([np.cos(th), np.zeros(m), np.sin(th)], axis=1))
            caps_v.append(np.stack([-np.sin(th), np.zeros(m), np.cos(th)], axis=1) * sgn)
            caps_s.append(np.tile([radius / cap_rings * 0.75, 2 * np.pi * rr / m * 0.75], (m, 1)))
    pts = np.concatenate([pts] + caps_p)
    r_u = np.concatenate([r_u] + caps_u)
    r_v = np.concatenate([r_v] + caps_v)
    scales = np.concatenate([scales] + caps_s)
    return SurfelSet.from_frames(pts, r_u, r_v, scales, 0.995, colors_dc=texture(pts, length))


def ring_cameras(n_views=8, size=64, distance=1.6, height=0.5, elevation=0.3, fov_deg=45.0):
    """Cameras on a horizontal ring around the rig, looking at its middle."""
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n_views):
        a = 2 * np.pi * i / n_views
        eye = np.array([distance * np.sin(a), height + elevation, distance * np.cos(a)])
        cams.append(Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size,
                           look_at(eye, [0.0, height, 0.0]), near=0.05, far=20.0))
    return cams


def frame_poses(n_frames=30, max_bend=75.0, seed=0):
    """Bend angles sweeping 0..max_bend with small random bend-axis and twist jitter."""
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n_frames):
        ang = max_bend * 0.5 * (1 - np.cos(np.pi * i / max(n_frames - 1, 1)))
        axis = normalize(np.array([rng.uniform(-0.3, 0.3), 0.0, 1.0]))
        poses.append(bend_pose(ang, axis, rng.uniform(-15, 15)))
    return poses


def rig_skin_weights(points, length=1.0, blend=0.25):
    """Analytic two-joint weights (the same crossover the template's vertices use)."""
    w1 = np.clip((np.asarray(points)[:, 1] - (0.5 - blend / 2) * length) / (blend * length), 0.0, 1.0)
    return np.tile([0, 1], (len(points), 1)), np.stack([1 - w1, w1], axis=1)


def render_ground_truth(gt: SurfelSet, transforms, camera, weights=None, mode="bruteforce"):
    """RGB, binary mask and camera-space normal map of the ground-truth rig for one pose."""
    from .raster import render

    posed = skin_surfels(gt, weights if weights is not None else rig_skin_weights(gt.means), transforms)
    rgb = render(posed, camera, 0, mode=mode)
    mask = rgb.alpha > 0.5
    Rc = camera.rotation
    n_cam = posed.normals @ Rc.T
    c_cam = camera.to_camera(posed.means)
    n_cam = np.where(np.sum(n_cam * c_cam, axis=1, keepdims=True) > 0, -n_cam, n_cam)
    nimg = render(posed, camera, 0, mode=mode, colors=n_cam).color
    nimg = np.where(mask[..., None], normalize(nimg), 0.0)
    return rgb.color, mask, nimg, rgb.alpha


RIG_CONFIG = {
    "iterations": 3000,
    "seed": 0,
    "checkpoint_interval": 1000,
    "sh_degree": 1,
    "sh_warmup_interval": 1000,
    "weight_field_resolution": 48,
    "diffusion_iters": 50,
    "lr": {"means_decay_steps": 3000},
    "density": {"stop_iteration": 1500, "start_iteration": 300, "interval": 100},
}


def generate_rig_dataset(out, n_views=8, n_frames=30, size=64, seed=0, test_views=None, mode="tiled"):
    """Write the synthetic two-bone cylinder dataset (layout in docs/formats.md).

    The last view is held out for testing by default. With a single view
    (the monocular regime) the last fifth of the frames is held out instead.
    """
    if n_views < 1 or n_frames < 1:
        raise ValueError("need at least one view and one frame")
    if test_views is None:
        test_views = (n_views - 1,) if n_views > 1 else ()
    if any(not 0 <= i < n_views for i in test_views):
        raise ValueError(f"test view index out of range for {n_views} views")
    from . import io

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tmpl = cylinder_template()
    save_template(tmpl, out / "template.skel")
    cams = ring_cameras(n_views, size)
    poses = frame_poses(n_frames, seed=seed)
    gt = ground_truth_surfels()
    gt_w = rig_skin_weights(gt.means)
    views = [f"{i:02d}" for i in range(n_views)]
    frames = [f"{j:04d}" for j in range(n_frames)]
    for v, cam in zip(views, cams):
        io.write_camera(out / "cameras" / f"{v}.json", cam)
    for fr, pose in zip(frames, poses):
        io.write_pose(out / "poses" / f"{fr}.json", pose)
        G = pose_to_joint_transforms(tmpl, pose)
        for v, cam in zip(views, cams):
            rgb, mask, nimg, _ = render_ground_truth(gt, G, cam, gt_w, mode)
            io.write_png(out / "frames" / v / f"{fr}.png", rgb)
            io.write_png(out / "masks" / v / f"{fr}.png", mask.astype(float))
            io.write_normals_png(out / "normals" / v / f"{fr}.png", nimg)
    test = [views[i] for i in test_views]
    if test:
        split = {"train": {"views": [v for v in views if v not in test], "frames": "all"},
                 "test": {"views": test, "frames": "all"}}
    else:
        cut = max(1, n_frames - max(1, n_frames // 5)) if n_frames > 1 else 1
        split = {"train": {"views": "all", "frames": frames[:cut]},
                 "test": {"views": "all", "frames": frames[cut:] or frames}}
    (out / "split.json").write_text(json.dumps(split, indent=1))
    meta = {"generator": "two-bone cylinder", "views": n_views, "frames": n_frames, "size": size, "seed": seed,
            "ground_truth_surfels": len(gt)}
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    cfg = dict(RIG_CONFIG, dataset=".", output="run")
    import yaml
    (out / "rig.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))
    return out


def silhouette_iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def novel_pose_iou(avatar, angle_deg=90.0, n_views=8, size=64, mode="tiled"):
    """Per-view silhouette IoU of a trained avatar against the ground-truth rig in a bend pose."""
    pose = bend_pose(angle_deg)
    gt = ground_truth_surfels()
    G = pose_to_joint_transforms(cylinder_template(), pose)
    w = rig_skin_weights(gt.means)
    ious = []
    for cam in ring_cameras(n_views, size):
        _, mask, _, _ = render_ground_truth(gt, G, cam, w, mode)
        ious.append(silhouette_iou(avatar.render(pose, cam).alpha > 0.5, mask))
    return ious
