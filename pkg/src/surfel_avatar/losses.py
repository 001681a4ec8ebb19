"""Training objectives and image-quality metrics.

Every loss has a matching ``*_grad`` returning the gradient of the
unweighted term with respect to its first argument.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MASK_EPS = 1e-6
PSNR_CAP = 100.0


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


# ----------------------------------------------------------------------------
# SSIM / PSNR
# ----------------------------------------------------------------------------

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filt(img):
    w = gaussian_window()
    out = correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def _as_hwc(img):
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


def _ssim_parts(a, b):
    mu_a, mu_b = _filt(a), _filt(b)
    m_aa, m_bb, m_ab = _filt(a * a), _filt(b * b), _filt(a * b)
    var_a = m_aa - mu_a ** 2
    var_b = m_bb - mu_b ** 2
    cov = m_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    return (A1 * A2) / (B1 * B2), (mu_a, mu_b, A1, A2, B1, B2)


def ssim_map(a, b):
    """Per-pixel, per-channel SSIM with an 11x11 Gaussian window (sigma 1.5), zero padded."""
    _check_same(a, b)
    S, _ = _ssim_parts(_as_hwc(a), _as_hwc(b))
    return S


def ssim(a, b, mask=None):
    S = ssim_map(a, b)
    if mask is None:
        return float(S.mean())
    m = np.asarray(mask, bool)
    return float(S[m].mean()) if m.any() else 1.0


def ssim_grad(a, b):
    """d mean(SSIM(a, b)) / d a."""
    _check_same(a, b)
    squeeze = np.ndim(a) == 2
    a, b = _as_hwc(a), _as_hwc(b)
    S, (mu_a, mu_b, A1, A2, B1, B2) = _ssim_parts(a, b)
    g = 1.0 / S.size
    d_mu = g * S * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2)
    d_maa = -g * S / B2
    d_mab = g * 2 * S / A2
    out = _filt(d_mu) + 2 * a * _filt(d_maa) + b * _filt(d_mab)
    return out[..., 0] if squeeze else out


def mse(a, b, mask=None):
    _check_same(a, b)
    d = (np.asarray(a, float) - np.asarray(b, float)) ** 2
    if mask is not None:
        m = np.asarray(mask, bool)
        d = d[m]
    return float(d.mean()) if d.size else 0.0


def psnr(a, b, mask=None):
    """10 log10(1 / MSE), capped at 100 dB once MSE drops below 1e-10."""
    e = mse(a, b, mask)
    if e < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / e))


# ----------------------------------------------------------------------------
# perceptual term
# ----------------------------------------------------------------------------

class PerceptualProvider(Protocol):
    def __call__(self, rendered: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
        """Return the scalar distance and its gradient w.r.t. ``rendered``."""


class GradientMagnitudeProxy:
    """Multi-scale L1 between image-gradient magnitudes.

    A cheap stand-in for a learned perceptual metric: it penalises
    blurred or missing edges, which is the failure mode the learned metric
    is mostly there to catch.
    """

    def __init__(self, scales=(1, 2, 4), eps=1e-6):
        self.scales = scales
        self.eps = eps

    @staticmethod
    def _pool(img, f):
        H, W = img.shape[0] // f * f, img.shape[1] // f * f
        x = img[:H, :W]
        return x.reshape(H // f, f, W // f, f, -1).mean(axis=(1, 3))

    @staticmethod
    def _unpool(g, f, shape):
        out = np.zeros(shape)
        h, w = g.shape[0] * f, g.shape[1] * f
        out[:h, :w] = np.repeat(np.repeat(g, f, axis=0), f, axis=1) / (f * f)
        return out

    def _gm(self, x):
        gx = np.zeros_like(x)
        gy = np.zeros_like(x)
        gx[:, :-1] = x[:, 1:] - x[:, :-1]
        gy[:-1, :] = x[1:, :] - x[:-1, :]
        return np.sqrt(gx * gx + gy * gy + self.eps), gx, gy

    def __call__(self, rendered, target):
        r, t = _as_hwc(rendered), _as_hwc(target)
        total = 0.0
        grad = np.zeros_like(r)
        for f in self.scales:
            rp, tp = self._pool(r, f), self._pool(t, f)
            if rp.size == 0:
                continue
            mr, gx, gy = self._gm(rp)
            mt, _, _ = self._gm(tp)
            diff = mr - mt
            total += np.abs(diff).mean() / len(self.scales)
            gm = np.sign(diff) / diff.size / len(self.scales)
            ggx, ggy = gm * gx / mr, gm * gy / mr
            gp = np.zeros_like(rp)
            gp[:, 1:] += ggx[:, :-1]
            gp[:, :-1] -= ggx[:, :-1]
            gp[1:, :] += ggy[:-1, :]
            gp[:-1, :] -= ggy[:-1, :]
            grad += self._unpool(gp, f, r.shape)
        return float(total), grad.reshape(np.shape(rendered))


# ----------------------------------------------------------------------------
# loss terms
# ----------------------------------------------------------------------------

@dataclass
class LossWeights:
    dssim: float = 0.2
    lpips: float = 0.0
    normal: float = 0.05
    self_sup: float = 1.0
    area: float = 0.01
    opacity: float = 0.01
    mask: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass
class LossBreakdown:
    l1: float
    dssim: float
    lpips: float
    photometric: float
    normal: float
    area: float
    opacity: float
    self_sup: float
    mask: float
    total: float

    def as_dict(self):
        return asdict(self)


def l1_loss(a, b):
    _check_same(a, b)
    return float(np.abs(np.asarray(a, float) - b).mean())


def l1_grad(a, b):
    return np.sign(np.asarray(a, float) - b) / np.size(a)


def photometric_loss(rendered, target, weights: LossWeights, perceptual: PerceptualProvider | None = None):
    """L1 + dssim * (1 - SSIM) / 2 + lpips * perceptual."""
    _check_same(rendered, target)
    value = l1_loss(rendered, target) + weights.dssim * (1.0 - ssim(rendered, target)) / 2.0
    if weights.lpips > 0 and perceptual is not None:
        value += weights.lpips * perceptual(rendered, target)[0]
    return value


def normal_loss(rendered_normals, target_normals, foreground_mask=None):
    """Mean of (1 - n_rendered . n_target) over pixels where both normals are set."""
    valid = _normal_valid(rendered_normals, target_normals, foreground_mask)
    if not valid.any():
        return 0.0
    cos = np.sum(rendered_normals * target_normals, axis=-1)
    return float(np.mean(1.0 - cos[valid]))


def _normal_valid(rn, tn, mask):
    valid = (np.abs(rn).sum(-1) > 0) & (np.abs(tn).sum(-1) > 0)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    return valid


def normal_loss_grad(rendered_normals, target_normals, foreground_mask=None):
    valid = _normal_valid(rendered_normals, target_normals, foreground_mask)
    n = valid.sum()
    if n == 0:
        return np.zeros_like(rendered_normals, dtype=float)
    return np.where(valid[..., None], -np.asarray(target_normals, float) / n, 0.0)


def area_loss(scales):
    """Population variance of the per-surfel scale products s_u * s_v."""
    prod = np.prod(np.asarray(scales, float), axis=-1)
    return float(np.var(prod)) if prod.size else 0.0


def area_loss_grad_log(scales):
    """Gradient w.r.t. log-scales (N, 2)."""
    scales = np.asarray(scales, float)
    prod = np.prod(scales, axis=-1)
    if prod.size == 0:
        return np.zeros_like(scales)
    d = 2.0 * (prod - prod.mean()) / prod.size * prod
    return np.stack([d, d], axis=-1)


def opacity_loss(opacity):
    """Mean of exp(-(a - 0.5)^2 / 0.05); pushes opacities toward 0 or 1."""
    a = np.asarray(opacity, float)
    return float(np.mean(np.exp(-((a - 0.5) ** 2) / 0.05))) if a.size else 0.0


def opacity_loss_grad(opacity):
    a = np.asarray(opacity, float)
    if a.size == 0:
        return a.copy()
    return np.exp(-((a - 0.5) ** 2) / 0.05) * (-2.0 * (a - 0.5) / 0.05) / a.size


def mask_loss(alpha_map, target_mask):
    """Mean binary cross-entropy with the alpha map clamped to [1e-6, 1 - 1e-6]."""
    _check_same(alpha_map, target_mask)
    a = np.clip(np.asarray(alpha_map, float), MASK_EPS, 1 - MASK_EPS)
    m = np.asarray(target_mask, float)
    return float(np.mean(-(m * np.log(a) + (1 - m) * np.log(1 - a))))


def mask_loss_grad(alpha_map, target_mask):
    a_raw = np.asarray(alpha_map, float)
    a = np.clip(a_raw, MASK_EPS, 1 - MASK_EPS)
    m = np.asarray(target_mask, float)
    g = (a - m) / (a * (1 - a)) / a.size
    return np.where((a_raw > MASK_EPS) & (a_raw < 1 - MASK_EPS), g, 0.0)


def total_loss(render_outputs, frame, surfels, weights: LossWeights, perceptual: PerceptualProvider | None = None):
    """Weighted objective with each term reported unweighted.

    ``surfels`` is the canonical :class:`SurfelSet` (the self-supervised
    terms read its scales and opacities).
    """
    rgb = frame.rgb
    l1 = l1_loss(render_outputs.color, rgb)
    ds = (1.0 - ssim(render_outputs.color, rgb)) / 2.0
    lp = perceptual(render_outputs.color, rgb)[0] if (weights.lpips > 0 and perceptual is not None) else 0.0
    photo = l1 + weights.dssim * ds + weights.lpips * lp
    ln = normal_loss(render_outputs.normal, frame.normal_map, frame.mask)
    la = area_loss(surfels.scales)
    lo = opacity_loss(surfels.opacity)
    ls = weights.area * la + weights.opacity * lo
    lm = mask_loss(render_outputs.alpha, frame.mask.astype(float))
    total = photo + weights.normal * ln + weights.self_sup * ls + weights.mask * lm
    return LossBreakdown(l1, ds, lp, photo, ln, la, lo, ls, lm, total)
