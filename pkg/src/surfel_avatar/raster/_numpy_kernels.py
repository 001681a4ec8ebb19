"""Vectorised numpy twins of the compiled kernels (used when numba is disabled).

Each pass evaluates a dense (pixels x candidates) block and blends with
cumulative products, so results match the loops up to summation order.
"""
import numpy as np

from ._numba_kernels import GRAZE

_BLOCK = 1 << 21


def eval_block(cc, ca, cb, ids, xs, ys, intr, cutoff2, lp_k):
    """Intersections of pixels (P,) against surfels ``ids`` (L,); arrays (P, L)."""
    fx, fy, cx0, cy0, near = intr
    dx = ((xs - cx0) / fx)[:, None]
    dy = ((ys - cy0) / fy)[:, None]
    c, a, b = cc[ids], ca[ids], cb[ids]
    m11 = a[:, 0] - dx * a[:, 2]
    m12 = b[:, 0] - dx * b[:, 2]
    m21 = a[:, 1] - dy * a[:, 2]
    m22 = b[:, 1] - dy * b[:, 2]
    e1 = -(c[:, 0] - dx * c[:, 2])
    e2 = -(c[:, 1] - dy * c[:, 2])
    det = m11 * m22 - m12 * m21
    nrm = np.linalg.norm(np.cross(a, b), axis=1)
    tol = GRAZE * nrm * np.sqrt(dx * dx + dy * dy + 1.0)
    ok = np.abs(det) > tol
    sdet = np.where(ok, det, 1.0)
    u = np.where(ok, (e1 * m22 - m12 * e2) / sdet, 0.0)
    v = np.where(ok, (m11 * e2 - e1 * m21) / sdet, 0.0)
    rho = np.where(ok, u * u + v * v, np.inf)
    z = np.where(ok, c[:, 2] + a[:, 2] * u + b[:, 2] * v, c[:, 2])
    branch = np.zeros(rho.shape, dtype=np.int8)
    if lp_k > 0:
        ex = xs[:, None] - (fx * c[:, 0] / c[:, 2] + cx0)
        ey = ys[:, None] - (fy * c[:, 1] / c[:, 2] + cy0)
        rho2 = (ex * ex + ey * ey) * lp_k
        use2 = rho2 < rho
        rho = np.where(use2, rho2, rho)
        z = np.where(use2, c[:, 2], z)
        branch[use2] = 1
    hit = (rho <= cutoff2) & (z >= near)
    g = np.where(hit, np.exp(-0.5 * np.where(hit, rho, 0.0)), 0.0)
    return hit, g, z, u, v, branch


def blend_block(hit, g, z, u, v, branch, ids_block, colors, opac, t_min, alpha_max):
    """Front-to-back blend of ordered candidates; returns per-pixel outputs and record mask."""
    sig = np.where(hit, np.minimum(alpha_max, opac[ids_block] * g), 0.0)
    one_minus = 1.0 - sig
    T_after = np.cumprod(one_minus, axis=1)
    T_before = np.concatenate([np.ones((len(sig), 1)), T_after[:, :-1]], axis=1)
    include = hit & (T_before >= t_min)
    w = np.where(include, sig * T_before, 0.0)
    color = np.einsum("pl,plc->pc", w, colors[ids_block])
    t_final = np.prod(np.where(include, one_minus, 1.0), axis=1)
    alpha = 1.0 - t_final
    sel = include & (T_before > 0.5)
    L = sel.shape[1]
    any_sel = sel.any(axis=1)
    last = L - 1 - np.argmax(sel[:, ::-1], axis=1)
    rows = np.arange(len(sel))
    depth = np.where(any_sel, z[rows, np.where(any_sel, last, 0)], 0.0)
    fg = alpha >= 0.5
    depth = np.where(fg, depth, 0.0)
    last = np.where(any_sel & fg, last, -1)
    return color, alpha, depth, last, include, T_before


class _RecordBuilder:
    def __init__(self, n_pix, keep):
        self.keep = keep
        self.pix_start = np.zeros(n_pix, dtype=np.int64)
        self.pix_count = np.zeros(n_pix, dtype=np.int64)
        self.depth_rec = np.full(n_pix, -1, dtype=np.int64)
        self.parts = []
        self.offset = 0

    def add(self, pix, include, ids_block, g, T_before, z, u, v, branch, last):
        counts = include.sum(axis=1)
        starts = self.offset + np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.pix_start[pix] = starts
        self.pix_count[pix] = counts
        # rank of each included entry within its row
        has = last >= 0
        if include.shape[1] == 0:
            self.depth_rec[pix] = -1
        else:
            rank = np.cumsum(include, axis=1) - 1
            rows = np.arange(len(pix))
            self.depth_rec[pix] = np.where(has, starts + rank[rows, np.where(has, last, 0)], -1)
        if self.keep:
            r, c = np.nonzero(include)
            self.parts.append((pix[r], ids_block[r, c], g[r, c], T_before[r, c], z[r, c],
                               u[r, c], v[r, c], branch[r, c]))
        self.offset += int(counts.sum())

    def arrays(self):
        if not self.parts:
            return (np.zeros(0, np.int64), np.zeros(0, np.int64)) + tuple(np.zeros(0) for _ in range(5)) + (np.zeros(0, np.int8),)
        cols = list(zip(*self.parts))
        return tuple(np.concatenate(c) for c in cols)


def forward_tiled(cc, ca, cb, colors, opac, tile_start, tile_ids, width, height, tile_size,
                  intr, cutoff2, lp_k, t_min, alpha_max, keep):
    out_color = np.zeros((height, width, 3))
    out_alpha = np.zeros((height, width))
    out_depth = np.zeros((height, width))
    rb = _RecordBuilder(width * height, keep)
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            ids = tile_ids[tile_start[t]:tile_start[t + 1]]
            ys, xs = np.mgrid[ty * tile_size:min((ty + 1) * tile_size, height),
                              tx * tile_size:min((tx + 1) * tile_size, width)]
            xs, ys = xs.ravel(), ys.ravel()
            pix = ys * width + xs
            if len(ids) == 0:
                rb.add(pix, np.zeros((len(pix), 0), bool), np.zeros((len(pix), 0), np.int64),
                       *(np.zeros((len(pix), 0)) for _ in range(5)), np.zeros((len(pix), 0), np.int8),
                       np.full(len(pix), -1))
                continue
            hit, g, z, u, v, br = eval_block(cc, ca, cb, ids, xs.astype(float), ys.astype(float),
                                             intr, cutoff2, lp_k)
            ids_block = np.broadcast_to(ids, hit.shape)
            color, alpha, depth, last, include, T_before = blend_block(
                hit, g, z, u, v, br, ids_block, colors, opac, t_min, alpha_max)
            out_color[ys, xs] = color
            out_alpha[ys, xs] = alpha
            out_depth[ys, xs] = depth
            rb.add(pix, include, ids_block, g, T_before, z, u, v, br, last)
    return out_color, out_alpha, out_depth, rb


def forward_bruteforce(cc, ca, cb, colors, opac, width, height, intr, cutoff2, lp_k, t_min, alpha_max, keep):
    out_color = np.zeros((height, width, 3))
    out_alpha = np.zeros((height, width))
    out_depth = np.zeros((height, width))
    rb = _RecordBuilder(width * height, keep)
    ids = np.nonzero(cc[:, 2] >= intr[4])[0]
    n_pix = width * height
    chunk = max(1, _BLOCK // max(1, len(ids)))
    for p0 in range(0, n_pix, chunk):
        pix = np.arange(p0, min(n_pix, p0 + chunk))
        xs, ys = pix % width, pix // width
        if len(ids) == 0:
            rb.add(pix, np.zeros((len(pix), 0), bool), np.zeros((len(pix), 0), np.int64),
                   *(np.zeros((len(pix), 0)) for _ in range(5)), np.zeros((len(pix), 0), np.int8),
                   np.full(len(pix), -1))
            continue
        hit, g, z, u, v, br = eval_block(cc, ca, cb, ids, xs.astype(float), ys.astype(float),
                                         intr, cutoff2, lp_k)
        order = np.argsort(np.where(hit, z, np.inf), axis=1, kind="stable")
        take = lambda a: np.take_along_axis(a, order, axis=1)
        hit, g, z, u, v, br = map(take, (hit, g, z, u, v, br))
        ids_block = ids[order]
        color, alpha, depth, last, include, T_before = blend_block(
            hit, g, z, u, v, br, ids_block, colors, opac, t_min, alpha_max)
        out_color[ys, xs] = color
        out_alpha[ys, xs] = alpha
        out_depth[ys, xs] = depth
        rb.add(pix, include, ids_block, g, T_before, z, u, v, br, last)
    return out_color, out_alpha, out_depth, rb


def backward(pix_start, pix_count, rec_pix, rec_id, rec_g, rec_t, rec_u, rec_v, rec_branch, depth_rec,
             alpha, grad_color, grad_alpha, grad_depth, cc, ca, cb, colors, opac, width,
             fx, fy, cx0, cy0, lp_k, alpha_max, out):
    n_rec = len(rec_id)
    if n_rec == 0:
        return
    # records of one pixel are contiguous; order within the pixel is front to back
    p = rec_pix
    j = rec_id
    g, T = rec_g, rec_t
    raw = opac[j] * g
    clamped = raw > alpha_max
    sig = np.where(clamped, alpha_max, raw)
    gC = grad_color[p]
    cdot = np.sum(colors[j] * gC, axis=1)
    w = sig * T
    contrib = cdot * w
    # suffix sum of contributions strictly behind each record, within its pixel
    csum = np.cumsum(contrib[::-1])[::-1]
    seg_end = pix_start[p] + pix_count[p]
    tail = np.where(seg_end < n_rec, np.concatenate([csum, [0.0]])[np.minimum(seg_end, n_rec)], 0.0)
    behind = csum - contrib - tail
    t_final = 1.0 - alpha[p]
    gsig = cdot * T - behind / (1.0 - sig) + grad_alpha[p] * t_final / (1.0 - sig)
    is_depth = depth_rec[p] == np.arange(n_rec)
    gz = np.where(is_depth, grad_depth[p], 0.0)
    gG = np.where(clamped, 0.0, gsig * opac[j])
    g_op = np.where(clamped, 0.0, gsig * g)
    grho = -0.5 * g * gG

    px = (p % width).astype(float)
    py = (p // width).astype(float)
    dx = (px - cx0) / fx
    dy = (py - cy0) / fy
    grad = np.zeros((n_rec, 13))
    grad[:, 9:12] = gC * w[:, None]
    grad[:, 12] = g_op

    b0 = rec_branch == 0
    a, b, c = ca[j], cb[j], cc[j]
    u, v = rec_u, rec_v
    gu = grho * 2.0 * u + gz * a[:, 2]
    gv = grho * 2.0 * v + gz * b[:, 2]
    m11 = a[:, 0] - dx * a[:, 2]
    m12 = b[:, 0] - dx * b[:, 2]
    m21 = a[:, 1] - dy * a[:, 2]
    m22 = b[:, 1] - dy * b[:, 2]
    det = np.where(b0, m11 * m22 - m12 * m21, 1.0)
    l1 = (m22 * gu - m21 * gv) / det
    l2 = (-m12 * gu + m11 * gv) / det
    g11, g12, g21, g22 = -l1 * u, -l1 * v, -l2 * u, -l2 * v
    tri = np.stack([-l1, -l2, gz + dx * l1 + dy * l2,
                    g11, g21, gz * u - dx * g11 - dy * g21,
                    g12, g22, gz * v - dx * g12 - dy * g22], axis=1)
    ex = px - (fx * c[:, 0] / c[:, 2] + cx0)
    ey = py - (fy * c[:, 1] / c[:, 2] + cy0)
    gpx = -2.0 * lp_k * ex * grho
    gpy = -2.0 * lp_k * ey * grho
    lp = np.zeros((n_rec, 9))
    lp[:, 0] = gpx * fx / c[:, 2]
    lp[:, 1] = gpy * fy / c[:, 2]
    lp[:, 2] = gz - (gpx * fx * c[:, 0] + gpy * fy * c[:, 1]) / (c[:, 2] ** 2)
    grad[:, :9] = np.where(b0[:, None], tri, lp)
    np.add.at(out, j, grad)
