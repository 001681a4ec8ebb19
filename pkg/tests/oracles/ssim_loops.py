"""Brute-force SSIM: explicit window sums per pixel, no separable filtering."""
import math

import numpy as np


def ssim_loops(a, b, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    H, W = a.shape
    r = size // 2
    g1 = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-r, r + 1)]
    s = sum(g1)
    g1 = [x / s for x in g1]
    total = 0.0
    for y in range(H):
        for x in range(W):
            ma = mb = maa = mbb = mab = 0.0
            for dy in range(-r, r + 1):
                yy = y + dy
                if yy < 0 or yy >= H:
                    continue
                for dx in range(-r, r + 1):
                    xx = x + dx
                    if xx < 0 or xx >= W:
                        continue
                    w = g1[dy + r] * g1[dx + r]
                    va, vb = a[yy, xx], b[yy, xx]
                    ma += w * va
                    mb += w * vb
                    maa += w * va * va
                    mbb += w * vb * vb
                    mab += w * va * vb
            va_, vb_, cov = maa - ma * ma, mbb - mb * mb, mab - ma * mb
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va_ + vb_ + c2))
    return total / (H * W)
