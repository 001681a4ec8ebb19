"""Normals from a rendered depth map by finite differences of back-projected points."""
import numpy as np


def _backproject(depth, camera):
    H, W = depth.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    ray = np.stack([(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)], axis=-1)
    return depth[..., None] * ray, ray


def _valid(depth):
    v = np.zeros(depth.shape, dtype=bool)
    fg = depth > 0
    v[:-1, :-1] = fg[:-1, :-1] & fg[:-1, 1:] & fg[1:, :-1]
    return v


def normals_from_depth(depth, camera):
    """Camera-space unit normals facing the camera; zero where a neighbour is background.

    Uses the right and lower neighbours: ``n = normalize((p_y - p) x (p_x - p))``,
    which points toward the camera (negative z) for a visible surface.
    """
    depth = np.asarray(depth, dtype=float)
    P, _ = _backproject(depth, camera)
    n = np.zeros_like(P)
    valid = _valid(depth)
    ex = P[:-1, 1:] - P[:-1, :-1]
    ey = P[1:, :-1] - P[:-1, :-1]
    raw = np.cross(ey, ex)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    inner = valid[:-1, :-1] & (norm[..., 0] > 0)
    n[:-1, :-1] = np.where(inner[..., None], raw / np.where(norm > 0, norm, 1.0), 0.0)
    return n


def normals_from_depth_vjp(depth, camera, grad_normal):
    """Gradient of ``sum(grad_normal * normals_from_depth(depth))`` w.r.t. depth."""
    depth = np.asarray(depth, dtype=float)
    P, ray = _backproject(depth, camera)
    valid = _valid(depth)
    ex = P[:-1, 1:] - P[:-1, :-1]
    ey = P[1:, :-1] - P[:-1, :-1]
    raw = np.cross(ey, ex)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    inner = (valid[:-1, :-1] & (norm[..., 0] > 0))[..., None]
    safe = np.where(norm > 0, norm, 1.0)
    n = raw / safe
    gn = np.where(inner, grad_normal[:-1, :-1], 0.0)
    graw = (gn - n * np.sum(n * gn, axis=-1, keepdims=True)) / safe
    # raw = ey x ex
    g_ey = np.cross(ex, graw)
    g_ex = np.cross(graw, ey)
    gP = np.zeros_like(P)
    gP[:-1, 1:] += g_ex
    gP[1:, :-1] += g_ey
    gP[:-1, :-1] -= g_ex + g_ey
    return np.sum(gP * ray, axis=-1)
