"""Rotations, cameras and the 2D Gaussian surfel primitive."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _jit
from ._jit import njit

SH_MAX_DEGREE = 3
SH_COEFFS = (SH_MAX_DEGREE + 1) ** 2


# ----------------------------------------------------------------------------
# rotations
# ----------------------------------------------------------------------------

def normalize(v, axis=-1, eps=1e-12):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps)


def quat_to_rotmat(q):
    """Rotation matrices from (w, x, y, z) quaternions; input need not be unit."""
    q = normalize(np.asarray(q, dtype=float))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, grad_R):
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back onto the raw quaternion."""
    q = np.asarray(q, dtype=float)
    norm = np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = grad_R
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
              + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
              - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
              + y * g12 + x * g20 + y * g21)
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gqn - qn * np.sum(qn * gqn, axis=-1, keepdims=True)) / norm


def rotmat_to_quat(R):
    """Unit (w, x, y, z) quaternions with w >= 0 from rotation matrices."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            out[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            out[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            out[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    out *= np.where(out[:, :1] < 0, -1.0, 1.0)
    out = normalize(out)
    return out.reshape(R.shape[:-2] + (4,))


def axis_angle_to_rotmat(aa):
    """Rodrigues' formula, batched over leading axes."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    k = aa / np.maximum(np.linalg.norm(aa, axis=-1, keepdims=True), 1e-300)
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def random_rotations(n, rng):
    return quat_to_rotmat(rng.normal(size=(n, 4)))


def orthonormalize_frame(r_u, r_v):
    """Gram-Schmidt on a tangent pair; returns unit, mutually orthogonal axes."""
    r_u = normalize(r_u)
    r_v = r_v - np.sum(r_u * r_v, axis=-1, keepdims=True) * r_u
    return r_u, normalize(r_v)


@njit
def _polar_newton(M, R, ok):
    # scaled Newton iteration X <- (g X + (g X)^-T) / 2 converges to the polar factor
    for n in range(M.shape[0]):
        X = M[n].copy()
        d = (X[0, 0] * (X[1, 1] * X[2, 2] - X[1, 2] * X[2, 1]) - X[0, 1] * (X[1, 0] * X[2, 2] - X[1, 2] * X[2, 0])
             + X[0, 2] * (X[1, 0] * X[2, 1] - X[1, 1] * X[2, 0]))
        if not d > 1e-9:
            ok[n] = False
            for i in range(3):
                for j in range(3):
                    R[n, i, j] = 1.0 if i == j else 0.0
            continue
        ok[n] = True
        C = np.empty((3, 3))
        for _ in range(60):
            C[0, 0] = X[1, 1] * X[2, 2] - X[1, 2] * X[2, 1]
            C[0, 1] = X[1, 2] * X[2, 0] - X[1, 0] * X[2, 2]
            C[0, 2] = X[1, 0] * X[2, 1] - X[1, 1] * X[2, 0]
            C[1, 0] = X[0, 2] * X[2, 1] - X[0, 1] * X[2, 2]
            C[1, 1] = X[0, 0] * X[2, 2] - X[0, 2] * X[2, 0]
            C[1, 2] = X[0, 1] * X[2, 0] - X[0, 0] * X[2, 1]
            C[2, 0] = X[0, 1] * X[1, 2] - X[0, 2] * X[1, 1]
            C[2, 1] = X[0, 2] * X[1, 0] - X[0, 0] * X[1, 2]
            C[2, 2] = X[0, 0] * X[1, 1] - X[0, 1] * X[1, 0]
            d = X[0, 0] * C[0, 0] + X[0, 1] * C[0, 1] + X[0, 2] * C[0, 2]
            g = abs(d) ** (-1.0 / 3.0)
            diff = 0.0
            for i in range(3):
                for j in range(3):
                    v = 0.5 * (g * X[i, j] + C[i, j] / (g * d))
                    diff += (v - X[i, j]) ** 2
                    X[i, j] = v
            if diff < 1e-30:
                break
        for i in range(3):
            for j in range(3):
                R[n, i, j] = X[i, j]


def polar_rotation(M):
    """Rotation factor of the polar decomposition ``M = R P`` (batched 3x3).

    Returns ``(R, ok)``; rows with ``det(M) <= 1e-9`` come back as identity
    with ``ok`` False.
    """
    M = np.asarray(M, dtype=float)
    if _jit.USE_NUMBA:
        flat = np.ascontiguousarray(M.reshape(-1, 3, 3))
        R = np.empty_like(flat)
        ok = np.empty(len(flat), dtype=np.bool_)
        _polar_newton(flat, R, ok)
        return R.reshape(M.shape), ok.reshape(M.shape[:-2])
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    flip = np.linalg.det(R) < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, -1] *= -1
        R = U @ Vt
    ok = np.linalg.det(M) > 1e-9
    R = np.where(ok[..., None, None], R, np.eye(3))
    return R, ok


# ----------------------------------------------------------------------------
# camera
# ----------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    Pixel ``(x, y)`` samples the ray through image coordinate ``(x, y)``,
    so a pixel lies on the optical axis when ``x == cx`` and ``y == cy``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=float)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_camera(self, p):
        return np.asarray(p) @ self.rotation.T + self.translation

    def project(self, p_world):
        pc = self.to_camera(p_world)
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx,
                         self.fy * pc[..., 1] / pc[..., 2] + self.cy], axis=-1)

    def ray_dirs(self):
        """Camera-space ray directions with unit z, shape (H, W, 3)."""
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)

    def intrinsics_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy, self.near, self.far])

    def with_size(self, width, height):
        return replace(self, width=width, height=height)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "world_to_cam": self.world_to_cam.tolist(),
                "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.array(d["world_to_cam"], dtype=float),
                   float(d.get("near", 0.01)), float(d.get("far", 100.0)))


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera matrix for an OpenCV camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear upward in the image.
    """
    eye = np.asarray(eye, dtype=float)
    fwd = normalize(np.asarray(target, dtype=float) - eye)
    right = normalize(np.cross(fwd, np.asarray(up, dtype=float)))
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


# ----------------------------------------------------------------------------
# surfels
# ----------------------------------------------------------------------------

def gaussian_weight(u, v):
    return np.exp(-0.5 * (np.asarray(u) ** 2 + np.asarray(v) ** 2))


def surfel_matrix(center, r_u, r_v, scales):
    """The 4x4 map from homogeneous local (u, v, 1, 1) to world space."""
    H = np.zeros(np.shape(center)[:-1] + (4, 4))
    H[..., :3, 0] = np.asarray(scales)[..., 0:1] * r_u
    H[..., :3, 1] = np.asarray(scales)[..., 1:2] * r_v
    H[..., :3, 3] = center
    H[..., 3, 3] = 1.0
    return H


def surfel_point(center, r_u, r_v, scales, u, v):
    center, r_u, r_v, scales = (np.asarray(a, dtype=float) for a in (center, r_u, r_v, scales))
    u = np.asarray(u, dtype=float)[..., None]
    v = np.asarray(v, dtype=float)[..., None]
    return center + scales[..., 0:1] * r_u * u + scales[..., 1:2] * r_v * v


def surfel_normal(r_u, r_v):
    return normalize(np.cross(r_u, r_v))


@dataclass
class SurfelSet:
    """Structure-of-arrays store for N surfels, in the stored (unconstrained) parameterisation.

    ``quats`` are (w, x, y, z); columns 0 and 1 of the rotation are the
    tangent axes, column 2 the normal. ``sh`` always holds degree-3 storage
    (16 coefficients); the active degree is chosen at render time.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh")

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=float).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 2)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.sh = np.asarray(self.sh, dtype=float).reshape(n, SH_COEFFS, 3)

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, SH_COEFFS, 3)))

    @classmethod
    def from_frames(cls, means, r_u, r_v, scales, opacity, colors_dc=None, sh=None):
        """Build from explicit tangent frames, linear scales and opacities in (0, 1)."""
        means = np.asarray(means, dtype=float)
        r_u, r_v = orthonormalize_frame(np.asarray(r_u, dtype=float), np.asarray(r_v, dtype=float))
        R = np.stack([r_u, r_v, np.cross(r_u, r_v)], axis=-1)
        n = len(means)
        if sh is None:
            sh = np.zeros((n, SH_COEFFS, 3))
            if colors_dc is not None:
                sh[:, 0, :] = rgb_to_sh_dc(colors_dc)
        opacity = np.broadcast_to(np.asarray(opacity, dtype=float), (n,))
        return cls(means, rotmat_to_quat(R), np.log(np.broadcast_to(scales, (n, 2))),
                   logit(opacity), sh)

    def copy(self):
        return SurfelSet(*(getattr(self, k).copy() for k in self.PARAM_NAMES))

    def select(self, idx):
        return SurfelSet(*(getattr(self, k)[idx] for k in self.PARAM_NAMES))

    def concat(self, other):
        return SurfelSet(*(np.concatenate([getattr(self, k), getattr(other, k)]) for k in self.PARAM_NAMES))

    def params(self):
        return {k: getattr(self, k) for k in self.PARAM_NAMES}

    @property
    def rotations(self):
        return quat_to_rotmat(self.quats)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacity(self):
        return sigmoid(self.opacity_logits)

    @property
    def normals(self):
        return self.rotations[:, :, 2]

    def renormalize(self):
        """Project quaternions back to unit length (keeps the tangent pair orthonormal)."""
        self.quats = normalize(self.quats)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


SH_C0 = 0.28209479177387814


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


@dataclass
class PosedSurfels:
    """Surfels in world (posed) space with explicit tangent frames.

    ``frame_rot`` is the rotation that carried each canonical frame into
    this pose; view directions are pulled back through it before the SH
    lookup so appearance stays attached to the surface.
    """

    means: np.ndarray
    r_u: np.ndarray
    r_v: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    frame_rot: np.ndarray | None = None
    degenerate: np.ndarray | None = None
    linear: np.ndarray | None = None  # blended 3x3 map applied to canonical centres

    def __len__(self):
        return len(self.means)

    @classmethod
    def from_surfels(cls, surfels: SurfelSet):
        R = surfels.rotations
        n = len(surfels)
        return cls(surfels.means.copy(), R[:, :, 0], R[:, :, 1], surfels.scales, surfels.opacity,
                   surfels.sh, np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros(n, dtype=bool))

    @property
    def normals(self):
        return np.cross(self.r_u, self.r_v)

    def local_view_dirs(self, camera: Camera):
        d = normalize(self.means - camera.center)
        if self.frame_rot is None:
            return d
        return np.einsum("nji,nj->ni", self.frame_rot, d)

    def colors(self, camera: Camera, degree: int):
        from .sh import sh_to_color
        return sh_to_color(self.sh, self.local_view_dirs(camera), degree)


def as_posed(surfels):
    return surfels if isinstance(surfels, PosedSurfels) else PosedSurfels.from_surfels(surfels)
