"""Surfel splatting: ray-splat intersection, front-to-back blending, median depth.

Two backends produce identical semantics:

* ``render_bruteforce`` intersects every surfel at every pixel and sorts the
  hits by their own intersection depth. It is the reference.
* ``render_tiled`` bins screen-space footprints into tiles and sorts each
  tile once by surfel-centre depth.

Either can run as compiled loops or as vectorised numpy (see ``_jit``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import _jit
from ..geometry import Camera, PosedSurfels, as_posed
from . import _numba_kernels as _nb
from . import _numpy_kernels as _np
from .depth import normals_from_depth, normals_from_depth_vjp

__all__ = [
    "RasterSettings", "BlendRecords", "RenderOutputs", "render", "render_tiled", "render_bruteforce",
    "ray_splat_intersect", "normals_from_depth", "normals_from_depth_vjp", "prepare", "bin_tiles",
    "camera_space_vjp",
]


@dataclass(frozen=True)
class RasterSettings:
    cutoff: float = 3.0
    lowpass_sigma: float = 0.5  # pixels; 0 disables the screen-space floor
    t_min: float = 1e-4
    alpha_max: float = 0.99
    tile_size: int = 16

    @property
    def cutoff2(self):
        return self.cutoff * self.cutoff

    @property
    def lowpass_k(self):
        return 0.0 if self.lowpass_sigma <= 0 else 1.0 / self.lowpass_sigma ** 2


@dataclass
class BlendRecords:
    """Per-pixel ordered blend lists in compressed-row form.

    Pixel ``p = y * width + x`` owns entries ``pix_start[p] : pix_start[p] +
    pix_count[p]``, front to back. ``sigma`` is the effective
    opacity-times-Gaussian used in blending; ``T`` is transmittance before
    the entry; ``branch`` is 1 where the screen-space low-pass won.
    """

    width: int
    height: int
    pix_start: np.ndarray
    pix_count: np.ndarray
    pix: np.ndarray
    ids: np.ndarray
    G: np.ndarray
    T: np.ndarray
    z: np.ndarray
    u: np.ndarray
    v: np.ndarray
    branch: np.ndarray
    depth_rec: np.ndarray
    sigma: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.ids)

    def pixel(self, x, y):
        """List of ``(surfel_id, G, sigma, T, z)`` tuples for one pixel."""
        p = y * self.width + x
        s, n = self.pix_start[p], self.pix_count[p]
        sl = slice(s, s + n)
        return list(zip(self.ids[sl].tolist(), self.G[sl].tolist(), self.sigma[sl].tolist(),
                        self.T[sl].tolist(), self.z[sl].tolist()))

    def touched(self, n_surfels):
        """Number of pixels each surfel contributed to."""
        return np.bincount(self.ids, minlength=n_surfels)


@dataclass
class RenderOutputs:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W), 0 where alpha < 0.5
    alpha: np.ndarray   # (H, W)
    normal: np.ndarray  # (H, W, 3) camera space, zero sentinel
    records: BlendRecords | None
    camera: Camera
    settings: RasterSettings
    prep: dict | None = None


def prepare(posed: PosedSurfels, camera: Camera, colors, dtype=np.float64):
    """Camera-space centre and scaled tangent axes used by the kernels."""
    R, t = camera.rotation, camera.translation
    cc = posed.means @ R.T + t
    ca = posed.scales[:, 0:1] * (posed.r_u @ R.T)
    cb = posed.scales[:, 1:2] * (posed.r_v @ R.T)
    return {
        "cc": np.ascontiguousarray(cc, dtype=dtype),
        "ca": np.ascontiguousarray(ca, dtype=dtype),
        "cb": np.ascontiguousarray(cb, dtype=dtype),
        "colors": np.ascontiguousarray(colors, dtype=dtype),
        "opac": np.ascontiguousarray(posed.opacity, dtype=dtype),
    }


def screen_bounds(prep, camera: Camera, settings: RasterSettings):
    """Conservative pixel-space boxes (xmin, xmax, ymin, ymax) and a visibility mask."""
    cc, ca, cb = (prep[k].astype(float) for k in ("cc", "ca", "cb"))
    n = len(cc)
    visible = cc[:, 2] >= camera.near
    ext = settings.cutoff * np.sqrt(ca * ca + cb * cb)
    lo, hi = cc - ext, cc + ext
    in_front = lo[:, 2] > camera.near * 0.5
    xs, ys = [], []
    for cx in (lo[:, 0], hi[:, 0]):
        for cz in (lo[:, 2], hi[:, 2]):
            xs.append(cx / np.where(in_front, cz, 1.0))
    for cy in (lo[:, 1], hi[:, 1]):
        for cz in (lo[:, 2], hi[:, 2]):
            ys.append(cy / np.where(in_front, cz, 1.0))
    xs, ys = np.stack(xs), np.stack(ys)
    box = np.stack([camera.fx * xs.min(0) + camera.cx, camera.fx * xs.max(0) + camera.cx,
                    camera.fy * ys.min(0) + camera.cy, camera.fy * ys.max(0) + camera.cy], axis=1)
    big = 1e9
    box[~in_front] = [-big, big, -big, big]
    if settings.lowpass_k > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            px = camera.fx * cc[:, 0] / cc[:, 2] + camera.cx
            py = camera.fy * cc[:, 1] / cc[:, 2] + camera.cy
        r = settings.cutoff * settings.lowpass_sigma
        lp = np.stack([px - r, px + r, py - r, py + r], axis=1)
        lp = np.where(visible[:, None], lp, box)
        box = np.stack([np.minimum(box[:, 0], lp[:, 0]), np.maximum(box[:, 1], lp[:, 1]),
                        np.minimum(box[:, 2], lp[:, 2]), np.maximum(box[:, 3], lp[:, 3])], axis=1)
    box[:, [0, 2]] -= 1.0
    box[:, [1, 3]] += 1.0
    visible &= (box[:, 1] >= 0) & (box[:, 0] <= camera.width - 1)
    visible &= (box[:, 3] >= 0) & (box[:, 2] <= camera.height - 1)
    visible &= np.isfinite(box).all(axis=1)
    return box, visible


def bin_tiles(prep, camera: Camera, settings: RasterSettings):
    """Per-tile surfel lists sorted by centre depth; returns (tile_start, tile_ids, boxes)."""
    ts = settings.tile_size
    tiles_x = (camera.width + ts - 1) // ts
    tiles_y = (camera.height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y
    box, visible = screen_bounds(prep, camera, settings)
    ids = np.nonzero(visible)[0]
    if len(ids) == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), box
    b = box[ids]
    tx0 = np.clip(np.floor(b[:, 0] / ts), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(b[:, 1] / ts), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(b[:, 2] / ts), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(b[:, 3] / ts), 0, tiles_y - 1).astype(np.int64)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    owner = np.repeat(np.arange(len(ids)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile = (ty0[owner] + local // nx[owner]) * tiles_x + tx0[owner] + local % nx[owner]
    sid = ids[owner]
    depth = prep["cc"][sid, 2].astype(float)
    order = np.lexsort((sid, depth, tile))
    tile, sid = tile[order], sid[order]
    tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(tile_start, tile + 1, 1)
    return np.cumsum(tile_start), np.ascontiguousarray(sid, dtype=np.int64), np.ascontiguousarray(box, dtype=float)


def _intr(camera):
    return float(camera.fx), float(camera.fy), float(camera.cx), float(camera.cy), float(camera.near)


def _run_numba(mode, prep, camera, settings, keep, tiles):
    W, H = camera.width, camera.height
    dt = prep["cc"].dtype
    out_color = np.zeros((H, W, 3), dt)
    out_alpha = np.zeros((H, W), dt)
    out_depth = np.zeros((H, W), dt)
    depth_rec = np.full(W * H, -1, np.int64)
    pix_start = np.zeros(W * H, np.int64)
    pix_count = np.zeros(W * H, np.int64)
    fx, fy, cx, cy, near = _intr(camera)
    capacity = 0
    if keep:
        capacity = max(1024, 8 * W * H) if tiles is None else max(1024, min(len(tiles[1]) * settings.tile_size ** 2, 16 * W * H))
    while True:
        rec = (np.empty(capacity, np.int64), np.empty(capacity, np.int64), np.empty(capacity, dt),
               np.empty(capacity, dt), np.empty(capacity, dt), np.empty(capacity, dt), np.empty(capacity, dt),
               np.empty(capacity, np.int8))
        common = (fx, fy, cx, cy, near, settings.cutoff2, settings.lowpass_k, settings.t_min, settings.alpha_max,
                  out_color, out_alpha, out_depth, depth_rec, pix_start, pix_count, keep, capacity) + rec
        if mode == "tiled":
            total = _nb.forward_tiled(prep["cc"], prep["ca"], prep["cb"], prep["colors"], prep["opac"],
                                      tiles[0], tiles[1], tiles[2], W, H, settings.tile_size, *common)
        else:
            total = _nb.forward_bruteforce(prep["cc"], prep["ca"], prep["cb"], prep["colors"], prep["opac"],
                                           W, H, *common)
        if not keep or total <= capacity:
            break
        capacity = total
    records = None
    if keep:
        rec = tuple(a[:total] for a in rec)
        records = BlendRecords(W, H, pix_start, pix_count, *rec, depth_rec=depth_rec)
    return out_color, out_alpha, out_depth, depth_rec, pix_start, pix_count, records


def _run_numpy(mode, prep, camera, settings, keep, tiles):
    W, H = camera.width, camera.height
    args = {k: prep[k].astype(float) for k in ("cc", "ca", "cb", "colors", "opac")}
    intr = _intr(camera)
    tail = (intr, settings.cutoff2, settings.lowpass_k, settings.t_min, settings.alpha_max, keep)
    if mode == "tiled":
        color, alpha, depth, rb = _np.forward_tiled(args["cc"], args["ca"], args["cb"], args["colors"], args["opac"],
                                                    tiles[0], tiles[1], W, H, settings.tile_size, *tail)
    else:
        color, alpha, depth, rb = _np.forward_bruteforce(args["cc"], args["ca"], args["cb"], args["colors"],
                                                         args["opac"], W, H, *tail)
    dt = prep["cc"].dtype
    records = None
    if keep:
        pix, ids, g, T, z, u, v, br = rb.arrays()
        records = BlendRecords(W, H, rb.pix_start, rb.pix_count, pix.astype(np.int64), ids.astype(np.int64),
                               g, T, z, u, v, br.astype(np.int8), depth_rec=rb.depth_rec)
    return (color.astype(dt), alpha.astype(dt), depth.astype(dt), rb.depth_rec, rb.pix_start, rb.pix_count, records)


def render(surfels, camera: Camera, sh_degree: int = 3, *, mode: str = "tiled", settings: RasterSettings | None = None,
           keep_records: bool = False, colors=None, precision: str = "f64", backend: str | None = None) -> RenderOutputs:
    """Render posed (or canonical, treated as world-space) surfels.

    ``colors`` overrides the SH evaluation with fixed per-surfel RGB.
    ``backend`` is "numba" or "numpy"; defaults to the environment switch.
    """
    settings = settings or RasterSettings()
    if mode == "tiled" and settings.tile_size < 8:
        raise ValueError("tile_size must be >= 8")
    posed = as_posed(surfels)
    if colors is None:
        colors = posed.colors(camera, sh_degree) if len(posed) else np.zeros((0, 3))
    dtype = {"f64": np.float64, "f32": np.float32}[precision]
    prep = prepare(posed, camera, colors, dtype)
    tiles = bin_tiles(prep, camera, settings) if mode == "tiled" else None
    backend = backend or _jit.backend()
    run = _run_numba if backend == "numba" else _run_numpy
    color, alpha, depth, depth_rec, pix_start, pix_count, records = run(mode, prep, camera, settings,
                                                                        keep_records, tiles)
    if records is not None:
        op = prep["opac"].astype(float)[records.ids]
        records.sigma = np.minimum(settings.alpha_max, op * records.G.astype(float))
    normal = normals_from_depth(depth.astype(float), camera).astype(dtype)
    prep["tiles"] = tiles
    return RenderOutputs(color, depth, alpha, normal, records, camera, settings, prep)


def render_tiled(surfels, camera, sh_degree=3, tile_size=16, **kw):
    settings = kw.pop("settings", None) or RasterSettings()
    if tile_size != settings.tile_size:
        settings = RasterSettings(settings.cutoff, settings.lowpass_sigma, settings.t_min, settings.alpha_max, tile_size)
    return render(surfels, camera, sh_degree, mode="tiled", settings=settings, **kw)


def render_bruteforce(surfels, camera, sh_degree=3, **kw):
    return render(surfels, camera, sh_degree, mode="bruteforce", **kw)


def raster_backward(out: RenderOutputs, grad_color, grad_alpha, grad_depth, backend: str | None = None):
    """Per-surfel camera-space gradients (N, 13) from image-space gradients.

    Columns: centre (3), scaled u axis (3), scaled v axis (3), colour (3),
    opacity (1).
    """
    rec = out.records
    if rec is None:
        raise RuntimeError("backward needs a render pass with keep_records=True")
    prep = out.prep
    n = len(prep["cc"])
    W, H = out.camera.width, out.camera.height
    grads = np.zeros((n, 13))
    f = {k: prep[k].astype(float) for k in ("cc", "ca", "cb", "colors", "opac")}
    cam = out.camera
    gC = np.ascontiguousarray(np.asarray(grad_color, float).reshape(W * H, 3))
    gA = np.ascontiguousarray(np.asarray(grad_alpha, float).reshape(W * H))
    gD = np.ascontiguousarray(np.asarray(grad_depth, float).reshape(W * H))
    alpha = np.ascontiguousarray(out.alpha.astype(float).reshape(W * H))
    common = (rec.ids, rec.G.astype(float), rec.T.astype(float), rec.u.astype(float), rec.v.astype(float),
              rec.branch, rec.depth_rec, alpha, gC, gA, gD, f["cc"], f["ca"], f["cb"], f["colors"], f["opac"], W,
              float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), out.settings.lowpass_k,
              out.settings.alpha_max, grads)
    backend = backend or _jit.backend()
    if backend == "numba":
        _nb.backward(rec.pix_start, rec.pix_count, *common)
    else:
        _np.backward(rec.pix_start, rec.pix_count, rec.pix, *common)
    return grads


def camera_space_vjp(grads13, posed: PosedSurfels, camera: Camera):
    """Map kernel gradients to world-space means, unit axes and linear scales."""
    R = camera.rotation
    g_means = grads13[:, 0:3] @ R
    ga_w = grads13[:, 3:6] @ R
    gb_w = grads13[:, 6:9] @ R
    s = posed.scales
    g_ru = s[:, 0:1] * ga_w
    g_rv = s[:, 1:2] * gb_w
    g_scales = np.stack([np.sum(ga_w * posed.r_u, axis=1), np.sum(gb_w * posed.r_v, axis=1)], axis=1)
    return {"means": g_means, "r_u": g_ru, "r_v": g_rv, "scales": g_scales,
            "colors": grads13[:, 9:12], "opacity": grads13[:, 12]}


def ray_splat_intersect(camera: Camera, pixel, center, r_u, r_v, scales, cutoff=3.0):
    """Local (u, v) and camera depth where a pixel ray meets a surfel, or None on a miss."""
    x, y = pixel
    R, t = camera.rotation, camera.translation
    c = R @ np.asarray(center, float) + t
    if c[2] < camera.near:
        return None
    a = scales[0] * (R @ np.asarray(r_u, float))
    b = scales[1] * (R @ np.asarray(r_v, float))
    dx, dy = (x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy
    M = np.array([[a[0] - dx * a[2], b[0] - dx * b[2]], [a[1] - dy * a[2], b[1] - dy * b[2]]])
    e = -np.array([c[0] - dx * c[2], c[1] - dy * c[2]])
    det = np.linalg.det(M)
    if abs(det) <= _nb.GRAZE * np.linalg.norm(np.cross(a, b)) * np.sqrt(dx * dx + dy * dy + 1):
        return None
    u, v = np.linalg.solve(M, e)
    z = c[2] + a[2] * u + b[2] * v
    if u * u + v * v > cutoff * cutoff or z < camera.near:
        return None
    return float(u), float(v), float(z)
