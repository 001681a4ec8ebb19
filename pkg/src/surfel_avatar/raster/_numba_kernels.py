"""Compiled per-pixel loops. Mirrors ``_numpy_kernels`` entry for entry."""
import math

import numpy as np

from .._jit import njit

GRAZE = 1e-6


@njit
def _eval_pair(cc, ca, cb, j, x, y, fx, fy, cx0, cy0, near, cutoff2, lp_k):
    dx = (x - cx0) / fx
    dy = (y - cy0) / fy
    pcx = cc[j, 0]
    pcy = cc[j, 1]
    pcz = cc[j, 2]
    m11 = ca[j, 0] - dx * ca[j, 2]
    m12 = cb[j, 0] - dx * cb[j, 2]
    m21 = ca[j, 1] - dy * ca[j, 2]
    m22 = cb[j, 1] - dy * cb[j, 2]
    e1 = -(pcx - dx * pcz)
    e2 = -(pcy - dy * pcz)
    det = m11 * m22 - m12 * m21
    nx = ca[j, 1] * cb[j, 2] - ca[j, 2] * cb[j, 1]
    ny = ca[j, 2] * cb[j, 0] - ca[j, 0] * cb[j, 2]
    nz = ca[j, 0] * cb[j, 1] - ca[j, 1] * cb[j, 0]
    tol = GRAZE * math.sqrt(nx * nx + ny * ny + nz * nz) * math.sqrt(dx * dx + dy * dy + 1.0)
    rho = math.inf
    u = 0.0
    v = 0.0
    z = pcz
    branch = 0
    if abs(det) > tol:
        u = (e1 * m22 - m12 * e2) / det
        v = (m11 * e2 - e1 * m21) / det
        rho = u * u + v * v
        z = pcz + ca[j, 2] * u + cb[j, 2] * v
    if lp_k > 0.0:
        ex = x - (fx * pcx / pcz + cx0)
        ey = y - (fy * pcy / pcz + cy0)
        rho2 = (ex * ex + ey * ey) * lp_k
        if rho2 < rho:
            rho = rho2
            z = pcz
            branch = 1
    if rho > cutoff2 or z < near:
        return False, 0.0, 0.0, 0.0, 0.0, 0
    return True, math.exp(-0.5 * rho), z, u, v, branch


@njit
def _pixel_span(lo, hi, first, last):
    a = max(math.ceil(max(lo, -1e9)), first)
    b = min(math.floor(min(hi, 1e9)), last)
    return int(a), int(b)


@njit
def forward_tiled(cc, ca, cb, colors, opac, tile_start, tile_ids, box, width, height, tile_size,
                  fx, fy, cx0, cy0, near, cutoff2, lp_k, t_min, alpha_max,
                  out_color, out_alpha, out_depth, depth_rec, pix_start, pix_count,
                  keep, capacity, rec_pix, rec_id, rec_g, rec_t, rec_z, rec_u, rec_v, rec_branch):
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    npx = tile_size * tile_size
    cnt = np.zeros(npx + 1, np.int64)
    plist = np.empty(1024, np.int64)
    offset = 0
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            s0 = tile_start[t]
            s1 = tile_start[t + 1]
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width) - 1
            y1 = min(y0 + tile_size, height) - 1
            # scatter the depth-sorted tile list into per-pixel candidate lists;
            # the conservative screen box is an exact reject
            cnt[:] = 0
            for k in range(s0, s1):
                j = tile_ids[k]
                ax, bx = _pixel_span(box[j, 0], box[j, 1], x0, x1)
                ay, by = _pixel_span(box[j, 2], box[j, 3], y0, y1)
                for py in range(ay, by + 1):
                    for px in range(ax, bx + 1):
                        cnt[(py - y0) * tile_size + (px - x0) + 1] += 1
            for q in range(npx):
                cnt[q + 1] += cnt[q]
            if cnt[npx] > plist.shape[0]:
                plist = np.empty(2 * cnt[npx], np.int64)
            fill = cnt[:npx].copy()
            for k in range(s0, s1):
                j = tile_ids[k]
                ax, bx = _pixel_span(box[j, 0], box[j, 1], x0, x1)
                ay, by = _pixel_span(box[j, 2], box[j, 3], y0, y1)
                for py in range(ay, by + 1):
                    for px in range(ax, bx + 1):
                        q = (py - y0) * tile_size + (px - x0)
                        plist[fill[q]] = j
                        fill[q] += 1
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    p = py * width + px
                    q = (py - y0) * tile_size + (px - x0)
                    T = 1.0
                    r0 = 0.0
                    r1 = 0.0
                    r2 = 0.0
                    dz = 0.0
                    drec = -1
                    n = 0
                    pix_start[p] = offset
                    for k in range(cnt[q], cnt[q + 1]):
                        if T < t_min:
                            break
                        j = plist[k]
                        hit, g, z, u, v, br = _eval_pair(cc, ca, cb, j, float(px), float(py),
                                                         fx, fy, cx0, cy0, near, cutoff2, lp_k)
                        if not hit:
                            continue
                        sig = min(alpha_max, opac[j] * g)
                        w = sig * T
                        r0 += colors[j, 0] * w
                        r1 += colors[j, 1] * w
                        r2 += colors[j, 2] * w
                        if T > 0.5:
                            dz = z
                            drec = offset
                        if keep and offset < capacity:
                            rec_pix[offset] = p
                            rec_id[offset] = j
                            rec_g[offset] = g
                            rec_t[offset] = T
                            rec_z[offset] = z
                            rec_u[offset] = u
                            rec_v[offset] = v
                            rec_branch[offset] = br
                        offset += 1
                        n += 1
                        T = T * (1.0 - sig)
                    pix_count[p] = n
                    out_color[py, px, 0] = r0
                    out_color[py, px, 1] = r1
                    out_color[py, px, 2] = r2
                    a = 1.0 - T
                    out_alpha[py, px] = a
                    if a < 0.5:
                        dz = 0.0
                        drec = -1
                    out_depth[py, px] = dz
                    depth_rec[p] = drec
    return offset


@njit
def forward_bruteforce(cc, ca, cb, colors, opac, width, height,
                       fx, fy, cx0, cy0, near, cutoff2, lp_k, t_min, alpha_max,
                       out_color, out_alpha, out_depth, depth_rec, pix_start, pix_count,
                       keep, capacity, rec_pix, rec_id, rec_g, rec_t, rec_z, rec_u, rec_v, rec_branch):
    n_s = cc.shape[0]
    hz = np.empty(n_s)
    hid = np.empty(n_s, np.int64)
    hg = np.empty(n_s)
    hu = np.empty(n_s)
    hv = np.empty(n_s)
    hb = np.empty(n_s, np.int64)
    offset = 0
    for py in range(height):
        for px in range(width):
            p = py * width + px
            m = 0
            for j in range(n_s):
                if cc[j, 2] < near:
                    continue
                hit, g, z, u, v, br = _eval_pair(cc, ca, cb, j, float(px), float(py),
                                                 fx, fy, cx0, cy0, near, cutoff2, lp_k)
                if hit:
                    hz[m] = z
                    hid[m] = j
                    hg[m] = g
                    hu[m] = u
                    hv[m] = v
                    hb[m] = br
                    m += 1
            order = np.argsort(hz[:m], kind="mergesort")
            T = 1.0
            r0 = 0.0
            r1 = 0.0
            r2 = 0.0
            dz = 0.0
            drec = -1
            n = 0
            pix_start[p] = offset
            for q in range(m):
                if T < t_min:
                    break
                k = order[q]
                j = hid[k]
                g = hg[k]
                sig = min(alpha_max, opac[j] * g)
                w = sig * T
                r0 += colors[j, 0] * w
                r1 += colors[j, 1] * w
                r2 += colors[j, 2] * w
                if T > 0.5:
                    dz = hz[k]
                    drec = offset
                if keep and offset < capacity:
                    rec_pix[offset] = p
                    rec_id[offset] = j
                    rec_g[offset] = g
                    rec_t[offset] = T
                    rec_z[offset] = hz[k]
                    rec_u[offset] = hu[k]
                    rec_v[offset] = hv[k]
                    rec_branch[offset] = hb[k]
                offset += 1
                n += 1
                T = T * (1.0 - sig)
            pix_count[p] = n
            out_color[py, px, 0] = r0
            out_color[py, px, 1] = r1
            out_color[py, px, 2] = r2
            a = 1.0 - T
            out_alpha[py, px] = a
            if a < 0.5:
                dz = 0.0
                drec = -1
            out_depth[py, px] = dz
            depth_rec[p] = drec
    return offset


@njit
def backward(pix_start, pix_count, rec_id, rec_g, rec_t, rec_u, rec_v, rec_branch, depth_rec,
             alpha, grad_color, grad_alpha, grad_depth, cc, ca, cb, colors, opac, width,
             fx, fy, cx0, cy0, lp_k, alpha_max, out):
    """Accumulate per-surfel gradients into ``out`` (N, 13).

    Columns: camera-space centre (3), scaled u axis (3), scaled v axis (3),
    colour (3), opacity (1).
    """
    n_pix = pix_start.shape[0]
    for p in range(n_pix):
        cnt = pix_count[p]
        if cnt == 0:
            continue
        gc0 = grad_color[p, 0]
        gc1 = grad_color[p, 1]
        gc2 = grad_color[p, 2]
        ga = grad_alpha[p]
        gd = grad_depth[p]
        t_final = 1.0 - alpha[p]
        px = float(p % width)
        py = float(p // width)
        dx = (px - cx0) / fx
        dy = (py - cy0) / fy
        acc = 0.0
        s = pix_start[p]
        for r in range(s + cnt - 1, s - 1, -1):
            j = rec_id[r]
            g = rec_g[r]
            T = rec_t[r]
            raw = opac[j] * g
            clamped = raw > alpha_max
            sig = alpha_max if clamped else raw
            cdot = colors[j, 0] * gc0 + colors[j, 1] * gc1 + colors[j, 2] * gc2
            w = sig * T
            out[j, 9] += gc0 * w
            out[j, 10] += gc1 * w
            out[j, 11] += gc2 * w
            gsig = cdot * T - acc / (1.0 - sig) + ga * t_final / (1.0 - sig)
            acc += cdot * w
            gz = gd if r == depth_rec[p] else 0.0
            gG = 0.0
            if not clamped:
                out[j, 12] += gsig * g
                gG = gsig * opac[j]
            grho = -0.5 * g * gG
            if rec_branch[r] == 0:
                u = rec_u[r]
                v = rec_v[r]
                gu = grho * 2.0 * u + gz * ca[j, 2]
                gv = grho * 2.0 * v + gz * cb[j, 2]
                out[j, 2] += gz
                out[j, 5] += gz * u
                out[j, 8] += gz * v
                m11 = ca[j, 0] - dx * ca[j, 2]
                m12 = cb[j, 0] - dx * cb[j, 2]
                m21 = ca[j, 1] - dy * ca[j, 2]
                m22 = cb[j, 1] - dy * cb[j, 2]
                det = m11 * m22 - m12 * m21
                l1 = (m22 * gu - m21 * gv) / det
                l2 = (-m12 * gu + m11 * gv) / det
                g11 = -l1 * u
                g12 = -l1 * v
                g21 = -l2 * u
                g22 = -l2 * v
                out[j, 3] += g11
                out[j, 4] += g21
                out[j, 5] += -dx * g11 - dy * g21
                out[j, 6] += g12
                out[j, 7] += g22
                out[j, 8] += -dx * g12 - dy * g22
                out[j, 0] += -l1
                out[j, 1] += -l2
                out[j, 2] += dx * l1 + dy * l2
            else:
                pcx = cc[j, 0]
                pcy = cc[j, 1]
                pcz = cc[j, 2]
                ex = px - (fx * pcx / pcz + cx0)
                ey = py - (fy * pcy / pcz + cy0)
                gpx = -2.0 * lp_k * ex * grho
                gpy = -2.0 * lp_k * ey * grho
                out[j, 0] += gpx * fx / pcz
                out[j, 1] += gpy * fy / pcz
                out[j, 2] += gz - (gpx * fx * pcx + gpy * fy * pcy) / (pcz * pcz)
