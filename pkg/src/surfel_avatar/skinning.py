"""Linear blend skinning of surfels through a volumetric skinning-weight field."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import _jit
from ._jit import njit
from .geometry import PosedSurfels, SurfelSet, axis_angle_to_rotmat, polar_rotation

MAX_INFLUENCES = 8


class TemplateError(ValueError):
    pass


# ----------------------------------------------------------------------------
# template and pose
# ----------------------------------------------------------------------------

@dataclass
class SkinnedTemplate:
    """Fixed rest mesh with a joint tree and sparse per-vertex skinning weights."""

    rest_vertices: np.ndarray          # (V, 3)
    faces: np.ndarray                  # (F, 3) int
    joint_parents: np.ndarray          # (K,) int, root = -1
    rest_joint_transforms: np.ndarray  # (K, 4, 4) joint-to-canonical
    weight_idx: np.ndarray             # (V, M) int, unused slots point at joint 0 with weight 0
    weight_val: np.ndarray             # (V, M)

    def __post_init__(self):
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64).reshape(-1)
        self.rest_joint_transforms = np.asarray(self.rest_joint_transforms, dtype=float).reshape(-1, 4, 4)
        self.weight_idx = np.asarray(self.weight_idx, dtype=np.int64)
        self.weight_val = np.asarray(self.weight_val, dtype=float)
        self.validate()

    @property
    def joint_count(self):
        return len(self.joint_parents)

    def validate(self):
        K = self.joint_count
        if len(self.rest_joint_transforms) != K:
            raise TemplateError("rest_joint_transforms length must match joint_parents")
        if self.weight_idx.shape != self.weight_val.shape or self.weight_idx.shape[0] != len(self.rest_vertices):
            raise TemplateError("weight arrays must be (V, M) with V matching rest_vertices")
        if self.weight_idx.shape[1] > MAX_INFLUENCES:
            raise TemplateError(f"at most {MAX_INFLUENCES} influences per vertex")
        if np.any(self.weight_val < 0):
            raise TemplateError("skinning weights must be nonnegative")
        if np.any(np.abs(self.weight_val.sum(axis=1) - 1.0) > 1e-6):
            raise TemplateError("skinning weights must sum to 1 per vertex")
        if np.any((self.weight_idx < 0) | (self.weight_idx >= K)):
            raise TemplateError("weight joint index out of range")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.rest_vertices)):
            raise TemplateError("face index out of range")
        joint_order(self.joint_parents)
        if not np.allclose(self.rest_joint_transforms[:, 3], [0, 0, 0, 1]):
            raise TemplateError("rest joint transforms must be homogeneous")

    def dense_weights(self):
        W = np.zeros((len(self.rest_vertices), self.joint_count))
        np.add.at(W, (np.arange(len(W))[:, None], self.weight_idx), self.weight_val)
        return W

    def digest(self):
        """SHA-256 of the serialized ``.skel`` bytes (equals the hash of the file on disk)."""
        return hashlib.sha256(template_bytes(self)).hexdigest()


def joint_order(parents):
    """Topological order of a joint tree (parents first); raises on cycles."""
    parents = np.asarray(parents)
    K = len(parents)
    order, state = [], np.zeros(K, dtype=int)
    for k in range(K):
        path = []
        j = k
        while j >= 0 and state[j] == 0:
            state[j] = 1
            path.append(j)
            p = parents[j]
            if p >= K or p < -1:
                raise TemplateError(f"joint {j} has invalid parent {p}")
            j = p
        if j >= 0 and state[j] == 1 and j in path:
            raise TemplateError("joint_parents contains a cycle")
        for q in reversed(path):
            state[q] = 2
            order.append(q)
    if sum(1 for p in parents if p == -1) < 1:
        raise TemplateError("joint tree has no root")
    return order


@dataclass
class PoseParams:
    """Per-joint local rotations (K, 3, 3) and a global root translation."""

    rotations: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotations, dtype=float)
        if r.ndim == 2 and r.shape[1] == 3:
            r = axis_angle_to_rotmat(r)
        if r.ndim != 3 or r.shape[1:] != (3, 3):
            raise ValueError("rotations must be (K, 3) axis-angle or (K, 3, 3) matrices")
        if not np.all(np.isfinite(r)):
            raise ValueError("non-finite pose")
        self.rotations = r
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls, K):
        return cls(np.broadcast_to(np.eye(3), (K, 3, 3)).copy(), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, aa, translation=(0.0, 0.0, 0.0)):
        return cls(axis_angle_to_rotmat(np.asarray(aa, dtype=float).reshape(-1, 3)), translation)

    def __len__(self):
        return len(self.rotations)


def pose_to_joint_transforms(template: SkinnedTemplate, pose: PoseParams):
    """Canonical-to-posed rigid transforms G'_k, shape (K, 4, 4)."""
    K = template.joint_count
    if len(pose) != K:
        raise ValueError(f"pose has {len(pose)} joints, template has {K}")
    rest = template.rest_joint_transforms
    rest_inv = np.linalg.inv(rest)
    world = np.zeros((K, 4, 4))
    for k in joint_order(template.joint_parents):
        local = np.eye(4)
        local[:3, :3] = pose.rotations[k]
        p = template.joint_parents[k]
        if p < 0:
            root = rest[k].copy()
            root[:3, 3] += pose.translation
            world[k] = root @ local
        else:
            world[k] = world[p] @ (rest_inv[p] @ rest[k]) @ local
    return world @ rest_inv


# ----------------------------------------------------------------------------
# weight field
# ----------------------------------------------------------------------------

@dataclass
class WeightField:
    """Skinning weights sampled at voxel centres of an axis-aligned grid.

    Voxel ``(i, j, k)`` sits at ``bbox_min + (i, j, k) * spacing`` so the
    first and last centres lie on the box faces.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    idx: np.ndarray      # (nx, ny, nz, M) int16
    weights: np.ndarray  # (nx, ny, nz, M) float32
    joint_count: int

    @property
    def resolution(self):
        return self.idx.shape[:3]

    @property
    def spacing(self):
        n = np.maximum(np.array(self.resolution) - 1, 1)
        return (self.bbox_max - self.bbox_min) / n

    def centers(self):
        axes = [self.bbox_min[d] + np.arange(self.resolution[d]) * self.spacing[d] for d in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def dense(self):
        nx, ny, nz, M = self.idx.shape
        out = np.zeros((nx * ny * nz, self.joint_count))
        rows = np.repeat(np.arange(nx * ny * nz), M)
        np.add.at(out, (rows, self.idx.reshape(-1).astype(np.int64)), self.weights.reshape(-1).astype(float))
        return out.reshape(nx, ny, nz, self.joint_count)

    def tobytes(self):
        head = struct.pack("<3i2i", *self.resolution, self.idx.shape[3], self.joint_count)
        return (head + self.bbox_min.astype("<f8").tobytes() + self.bbox_max.astype("<f8").tobytes()
                + self.idx.astype("<i2").tobytes() + self.weights.astype("<f4").tobytes())

    @classmethod
    def frombytes(cls, buf):
        nx, ny, nz, M, K = struct.unpack_from("<3i2i", buf, 0)
        off = 20
        lo = np.frombuffer(buf, "<f8", 3, off)
        hi = np.frombuffer(buf, "<f8", 3, off + 24)
        off += 48
        n = nx * ny * nz * M
        idx = np.frombuffer(buf, "<i2", n, off).reshape(nx, ny, nz, M)
        w = np.frombuffer(buf, "<f4", n, off + 2 * n).reshape(nx, ny, nz, M)
        return cls(lo.copy(), hi.copy(), idx.copy(), w.copy(), K)


@njit
def _jacobi_numba(f, fixed, iters):
    nx, ny, nz = f.shape
    g = f.copy()
    for _ in range(iters):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if fixed[i, j, k]:
                        g[i, j, k] = f[i, j, k]
                        continue
                    s = (f[max(i - 1, 0), j, k] + f[min(i + 1, nx - 1), j, k]
                         + f[i, max(j - 1, 0), k] + f[i, min(j + 1, ny - 1), k]
                         + f[i, j, max(k - 1, 0)] + f[i, j, min(k + 1, nz - 1)])
                    g[i, j, k] = s / 6.0
        f, g = g, f
    return f


def _jacobi_numpy(f, fixed, iters):
    f = f.copy()
    for _ in range(iters):
        p = np.pad(f, 1, mode="edge")
        avg = (p[:-2, 1:-1, 1:-1] + p[2:, 1:-1, 1:-1] + p[1:-1, :-2, 1:-1] + p[1:-1, 2:, 1:-1]
               + p[1:-1, 1:-1, :-2] + p[1:-1, 1:-1, 2:]) / 6.0
        f = np.where(fixed, f, avg)
    return f


def diffuse(channel, fixed, iters, backend=None):
    """Jacobi smoothing of one weight channel; ``fixed`` voxels keep their value."""
    if iters <= 0:
        return channel.copy()
    if (backend or _jit.backend()) == "numba":
        return _jacobi_numba(np.ascontiguousarray(channel, dtype=float), np.ascontiguousarray(fixed), int(iters))
    return _jacobi_numpy(channel, fixed, iters)


def seed_field(template: SkinnedTemplate, resolution, margin=0.1, shell=None):
    """Nearest-vertex seeding; returns (bbox_min, bbox_max, seed_dense (nx,ny,nz,K), fixed mask)."""
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res <= 0):
        raise ValueError("weight-field resolution must be positive")
    V = template.rest_vertices
    lo = V.min(axis=0) - margin
    hi = V.max(axis=0) + margin
    axes = [np.linspace(lo[d], hi[d], res[d]) if res[d] > 1 else np.array([0.5 * (lo[d] + hi[d])])
            for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    dist, nn = cKDTree(V).query(grid)
    dense = template.dense_weights()[nn].reshape(*res, template.joint_count)
    spacing = (hi - lo) / np.maximum(res - 1, 1)
    if shell is None:
        shell = 0.5 * float(np.linalg.norm(spacing))
    fixed = (dist <= shell).reshape(*res)
    return lo, hi, dense, fixed


def build_weight_field(template: SkinnedTemplate, resolution=128, diffusion_iters=50, margin=0.1,
                       shell=None, backend=None) -> WeightField:
    """Seed every voxel from its nearest template vertex, then diffuse outward from the surface shell."""
    lo, hi, dense, fixed = seed_field(template, resolution, margin, shell)
    res = dense.shape[:3]
    K = template.joint_count
    M = min(MAX_INFLUENCES, K)
    top_w = np.full(res + (M,), -1.0)
    top_i = np.zeros(res + (M,), dtype=np.int64)
    present = np.nonzero(dense.reshape(-1, K).max(axis=0) > 0)[0]
    for k in present:
        ch = diffuse(dense[..., k], fixed, diffusion_iters, backend)
        slot = np.argmin(top_w, axis=-1)
        cur = np.take_along_axis(top_w, slot[..., None], -1)[..., 0]
        better = ch > cur
        np.put_along_axis(top_w, slot[..., None], np.where(better, ch, cur)[..., None], -1)
        old_i = np.take_along_axis(top_i, slot[..., None], -1)[..., 0]
        np.put_along_axis(top_i, slot[..., None], np.where(better, k, old_i)[..., None], -1)
    top_w = np.maximum(top_w, 0.0)
    top_w /= np.maximum(top_w.sum(axis=-1, keepdims=True), 1e-300)
    order = np.argsort(-top_w, axis=-1, kind="stable")
    top_w = np.take_along_axis(top_w, order, -1)
    top_i = np.take_along_axis(top_i, order, -1)
    return WeightField(lo, hi, top_i.astype(np.int16), top_w.astype(np.float32), K)


def field_total_variation(dense):
    """Mean L1 weight difference between face-adjacent voxels."""
    tv = [np.abs(np.diff(dense, axis=a)).sum(axis=-1).mean() for a in range(3) if dense.shape[a] > 1]
    return float(np.mean(tv))


@njit
def _query_numba(points, lo, spacing, idx, wts, K, out_i, out_w):
    nx, ny, nz, M = idx.shape
    acc = np.zeros(K)
    for n in range(points.shape[0]):
        acc[:] = 0.0
        f = np.empty(3)
        base = np.empty(3, np.int64)
        dims = (nx, ny, nz)
        for d in range(3):
            hi = dims[d] - 1
            t = (points[n, d] - lo[d]) / spacing[d] if hi > 0 else 0.0
            t = min(max(t, 0.0), float(hi))
            b = min(int(np.floor(t)), max(hi - 1, 0))
            base[d] = b
            f[d] = t - b
        for c in range(8):
            ox = c & 1
            oy = (c >> 1) & 1
            oz = (c >> 2) & 1
            i = min(base[0] + ox, nx - 1)
            j = min(base[1] + oy, ny - 1)
            k = min(base[2] + oz, nz - 1)
            tw = (f[0] if ox else 1.0 - f[0]) * (f[1] if oy else 1.0 - f[1]) * (f[2] if oz else 1.0 - f[2])
            if tw == 0.0:
                continue
            for m in range(M):
                acc[idx[i, j, k, m]] += tw * wts[i, j, k, m]
        order = np.argsort(-acc, kind="mergesort")
        s = 0.0
        for m in range(out_i.shape[1]):
            out_i[n, m] = order[m]
            out_w[n, m] = acc[order[m]]
            s += out_w[n, m]
        for m in range(out_i.shape[1]):
            out_w[n, m] /= s


def _query_numpy(points, lo, spacing, idx, wts, K, M_out):
    res = np.array(idx.shape[:3])
    hi = res - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(hi > 0, (points - lo) / spacing, 0.0)
    t = np.clip(t, 0.0, hi.astype(float))
    base = np.minimum(np.floor(t).astype(np.int64), np.maximum(hi - 1, 0))
    f = t - base
    acc = np.zeros((len(points), K))
    rows = np.arange(len(points))
    for c in range(8):
        o = np.array([c & 1, (c >> 1) & 1, (c >> 2) & 1])
        ijk = np.minimum(base + o, hi)
        tw = np.prod(np.where(o, f, 1.0 - f), axis=1)
        vi = idx[ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(np.int64)
        vw = wts[ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(float)
        np.add.at(acc, (rows[:, None], vi), tw[:, None] * vw)
    order = np.argsort(-acc, axis=1, kind="stable")[:, :M_out]
    w = np.take_along_axis(acc, order, 1)
    return order, w / w.sum(axis=1, keepdims=True)


def query_weights(field: WeightField, points, backend=None):
    """Trilinear weight rows at ``points`` (N, 3); returns (joint idx, weights), each (N, M).

    Points outside the box clamp to the boundary voxels.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    K = field.joint_count
    M_out = min(MAX_INFLUENCES, K)
    spacing = np.where(field.spacing > 0, field.spacing, 1.0)
    if (backend or _jit.backend()) == "numba":
        out_i = np.zeros((len(points), M_out), np.int64)
        out_w = np.zeros((len(points), M_out))
        _query_numba(np.ascontiguousarray(points), field.bbox_min, spacing, field.idx.astype(np.int64),
                     field.weights.astype(float), K, out_i, out_w)
        return out_i, out_w
    return _query_numpy(points, field.bbox_min, spacing, field.idx, field.weights, K, M_out)


# ----------------------------------------------------------------------------
# skinning
# ----------------------------------------------------------------------------

def blend_transforms(idx, weights, transforms):
    """Per-point blended 4x4 maps ``sum_k w_k G_k``."""
    return np.einsum("nm,nmij->nij", weights, transforms[idx])


def skin_point(p, weights, transforms):
    """LBS of points. ``weights`` is (idx, w) rows or a dense (N, K) matrix."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if isinstance(weights, tuple):
        A = blend_transforms(weights[0], weights[1], transforms)
    else:
        A = np.einsum("nk,kij->nij", np.atleast_2d(weights), transforms)
    return np.einsum("nij,nj->ni", A[:, :3, :3], p) + A[:, :3, 3]


def skin_surfels(surfels: SurfelSet, weights, transforms) -> PosedSurfels:
    """Carry canonical surfels into a pose.

    Centres follow the blended transform; tangent frames rotate by the polar
    rotation of its 3x3 part. ``weights`` is either a :class:`WeightField`
    (queried at the current centres) or precomputed ``(idx, w)`` rows.
    """
    if isinstance(weights, WeightField):
        weights = query_weights(weights, surfels.means)
    A = blend_transforms(weights[0], weights[1], transforms)
    L = A[:, :3, :3]
    means = np.einsum("nij,nj->ni", L, surfels.means) + A[:, :3, 3]
    Rp, ok = polar_rotation(L)
    R = surfels.rotations
    r_u = np.einsum("nij,nj->ni", Rp, R[:, :, 0])
    r_v = np.einsum("nij,nj->ni", Rp, R[:, :, 1])
    return PosedSurfels(means, r_u, r_v, surfels.scales, surfels.opacity, surfels.sh, Rp, ~ok, L)


# ----------------------------------------------------------------------------
# template file
# ----------------------------------------------------------------------------

SKEL_MAGIC = b"SKEL"
SKEL_VERSION = 1


def save_template(template: SkinnedTemplate, path):
    """Write the binary ``.skel`` container (layout in docs/formats.md)."""
    Path(path).write_bytes(template_bytes(template))


def load_template(path) -> SkinnedTemplate:
    return parse_template(Path(path).read_bytes(), path)


def template_bytes(template: SkinnedTemplate) -> bytes:
    V, F, K = len(template.rest_vertices), len(template.faces), template.joint_count
    M = template.weight_idx.shape[1]
    return b"".join([SKEL_MAGIC, struct.pack("<5I", SKEL_VERSION, V, F, K, M),
                     template.rest_vertices.astype("<f8").tobytes(), template.faces.astype("<i4").tobytes(),
                     template.joint_parents.astype("<i4").tobytes(),
                     template.rest_joint_transforms.astype("<f8").tobytes(),
                     template.weight_idx.astype("<i4").tobytes(), template.weight_val.astype("<f8").tobytes()])


def parse_template(buf, path="<bytes>") -> SkinnedTemplate:
    if buf[:4] != SKEL_MAGIC:
        raise TemplateError(f"{path}: not a .skel file")
    version, V, F, K, M = struct.unpack_from("<5I", buf, 4)
    if version != SKEL_VERSION:
        raise TemplateError(f"{path}: unsupported version {version}")
    off = 24

    def take(dtype, count):
        nonlocal off
        a = np.frombuffer(buf, dtype, count, off)
        off += a.nbytes
        return a.copy()

    try:
        rv = take("<f8", V * 3).reshape(V, 3)
        faces = take("<i4", F * 3).reshape(F, 3)
        parents = take("<i4", K)
        rest = take("<f8", K * 16).reshape(K, 4, 4)
        wi = take("<i4", V * M).reshape(V, M)
        wv = take("<f8", V * M).reshape(V, M)
    except ValueError as exc:
        raise TemplateError(f"{path}: truncated file") from exc
    return SkinnedTemplate(rv, faces, parents, rest, wi, wv)
