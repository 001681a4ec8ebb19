"""Hand-derived reverse pass through losses, blending, intersection and skinning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .geometry import SH_COEFFS, PosedSurfels, SurfelSet, normalize, quat_to_rotmat_vjp
from .raster import RasterSettings, camera_space_vjp, normals_from_depth_vjp, raster_backward, render
from .sh import sh_to_color, sh_to_color_vjp
from .skinning import skin_surfels


@dataclass
class ParamGradients:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def flat(self):
        return np.concatenate([getattr(self, k).ravel() for k in SurfelSet.PARAM_NAMES])

    def items(self):
        return ((k, getattr(self, k)) for k in SurfelSet.PARAM_NAMES)

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for _, v in self.items())


def pack(surfels: SurfelSet):
    return np.concatenate([getattr(surfels, k).ravel() for k in SurfelSet.PARAM_NAMES])


def unpack(vec, n):
    shapes = {"means": (n, 3), "quats": (n, 4), "log_scales": (n, 2), "opacity_logits": (n,), "sh": (n, SH_COEFFS, 3)}
    out, off = {}, 0
    for k in SurfelSet.PARAM_NAMES:
        size = int(np.prod(shapes[k]))
        out[k] = np.asarray(vec[off:off + size], dtype=float).reshape(shapes[k])
        off += size
    return SurfelSet(**out)


def param_labels(n):
    """(name, surfel index, component) for each entry of :func:`pack`."""
    labels = []
    for k, width in (("means", 3), ("quats", 4), ("log_scales", 2), ("opacity_logits", 1), ("sh", SH_COEFFS * 3)):
        for i in range(n):
            for c in range(width):
                labels.append((k, i, c))
    return labels


@dataclass
class StepResult:
    breakdown: L.LossBreakdown
    grads: ParamGradients | None
    posed: PosedSurfels
    outputs: object
    screen_grad: np.ndarray | None = None
    touched: np.ndarray | None = None
    image_grads: dict = field(default_factory=dict)


@dataclass
class Scene:
    """Everything needed to evaluate the objective for one observation.

    ``skin_weights`` are frozen ``(idx, w)`` rows, i.e. the field queried
    once at the start of the step.
    """

    frame: object
    transforms: np.ndarray
    skin_weights: tuple
    loss_weights: L.LossWeights
    sh_degree: int = 3
    settings: RasterSettings = field(default_factory=RasterSettings)
    mode: str = "tiled"
    perceptual: L.PerceptualProvider | None = None
    normal_depth_grad: bool = True
    precision: str = "f64"
    backend: str | None = None

    def forward(self, surfels: SurfelSet, keep_records=False):
        posed = skin_surfels(surfels, self.skin_weights, self.transforms)
        cam = self.frame.camera
        dirs = posed.local_view_dirs(cam)
        colors = sh_to_color(posed.sh, dirs, self.sh_degree) if len(posed) else np.zeros((0, 3))
        out = render(posed, cam, self.sh_degree, mode=self.mode, settings=self.settings, keep_records=keep_records,
                     colors=colors, precision=self.precision, backend=self.backend)
        return posed, dirs, out

    def loss(self, surfels: SurfelSet) -> float:
        _, _, out = self.forward(surfels)
        return L.total_loss(out, self.frame, surfels, self.loss_weights, self.perceptual).total

    def flat_loss(self, vec, n):
        return self.loss(unpack(vec, n))

    def step(self, surfels: SurfelSet, compute_grads=True) -> StepResult:
        posed, dirs, out = self.forward(surfels, keep_records=compute_grads)
        bd = L.total_loss(out, self.frame, surfels, self.loss_weights, self.perceptual)
        if not compute_grads or not np.isfinite(bd.total):
            # a non-finite loss has no gradient; the caller reports which term broke
            return StepResult(bd, None, posed, out)
        grads, extra = backward(bd, out, self.frame, surfels, posed, dirs, self.loss_weights, self.sh_degree,
                                self.perceptual, self.normal_depth_grad, self.backend)
        return StepResult(bd, grads, posed, out, extra["screen_grad"], extra["touched"], extra["image"])


def image_gradients(out, frame, weights: L.LossWeights, perceptual=None, normal_depth_grad=True):
    """Gradients of the weighted objective w.r.t. colour, alpha and depth maps."""
    color = out.color.astype(float)
    g_color = L.l1_grad(color, frame.rgb)
    if weights.dssim > 0:
        g_color = g_color - 0.5 * weights.dssim * L.ssim_grad(color, frame.rgb)
    if weights.lpips > 0 and perceptual is not None:
        g_color = g_color + weights.lpips * perceptual(color, frame.rgb)[1]
    g_alpha = weights.mask * L.mask_loss_grad(out.alpha.astype(float), frame.mask.astype(float))
    g_depth = np.zeros(out.depth.shape)
    if weights.normal > 0 and normal_depth_grad:
        g_n = weights.normal * L.normal_loss_grad(out.normal.astype(float), frame.normal_map, frame.mask)
        g_depth = normals_from_depth_vjp(out.depth.astype(float), out.camera, g_n)
    return g_color, g_alpha, g_depth


def backward(breakdown, out, frame, surfels: SurfelSet, posed: PosedSurfels, local_dirs, weights: L.LossWeights,
             sh_degree=3, perceptual=None, normal_depth_grad=True, backend=None):
    """Reverse-mode gradients of ``breakdown.total`` w.r.t. every stored surfel parameter.

    The skinning weights are held fixed; depth receives gradient only through
    the surfel selected as the median-depth sample of each pixel.
    """
    if out.records is None:
        raise RuntimeError("backward requires blend records (render with keep_records=True)")
    if not np.isfinite(breakdown.total):
        raise FloatingPointError("non-finite loss")
    cam = out.camera
    n = len(surfels)
    g_color, g_alpha, g_depth = image_gradients(out, frame, weights, perceptual, normal_depth_grad)
    g13 = raster_backward(out, g_color, g_alpha, g_depth, backend=backend)
    w = camera_space_vjp(g13, posed, cam)

    # colour -> SH and view direction
    g_sh, g_dir_local = sh_to_color_vjp(posed.sh, local_dirs, sh_degree, w["colors"])
    Rp = posed.frame_rot
    g_dir = np.einsum("nij,nj->ni", Rp, g_dir_local)
    offs = posed.means - cam.center
    dist = np.maximum(np.linalg.norm(offs, axis=1, keepdims=True), 1e-12)
    d = offs / dist
    g_means_posed = w["means"] + (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / dist

    # posed -> canonical (weights frozen, so the blended map is constant)
    g_means = np.einsum("nji,nj->ni", posed.linear, g_means_posed)
    g_R = np.zeros((n, 3, 3))
    g_R[:, :, 0] = np.einsum("nji,nj->ni", Rp, w["r_u"])
    g_R[:, :, 1] = np.einsum("nji,nj->ni", Rp, w["r_v"])
    g_quats = quat_to_rotmat_vjp(surfels.quats, g_R)

    scales = surfels.scales
    g_log = w["scales"] * scales
    opac = surfels.opacity
    g_opac = w["opacity"]
    reg = weights.self_sup
    if reg > 0 and weights.area > 0:
        g_log = g_log + reg * weights.area * L.area_loss_grad_log(scales)
    if reg > 0 and weights.opacity > 0:
        g_opac = g_opac + reg * weights.opacity * L.opacity_loss_grad(opac)
    g_logit = g_opac * opac * (1 - opac)

    grads = ParamGradients(g_means, g_quats, g_log, g_logit, g_sh)
    touched = out.records.touched(n)
    cz = out.prep["cc"][:, 2].astype(float)
    screen = np.hypot(g13[:, 0] * cz * cam.width / (2 * cam.fx), g13[:, 1] * cz * cam.height / (2 * cam.fy))
    extra = {"screen_grad": screen, "touched": touched,
             "image": {"color": g_color, "alpha": g_alpha, "depth": g_depth}}
    return grads, extra


def fd_gradient_oracle(func, x, index, eps=1e-4):
    """Central difference of ``func`` along coordinate ``index`` of the flat vector ``x``."""
    x = np.array(x, dtype=float, copy=True)
    orig = x.flat[index]
    x.flat[index] = orig + eps
    fp = func(x)
    x.flat[index] = orig - eps
    fm = func(x)
    return (fp - fm) / (2 * eps)


def scene_fd_gradient(scene: Scene, surfels: SurfelSet, index, eps=1e-4):
    """Finite-difference derivative of the scene objective w.r.t. one packed parameter."""
    n = len(surfels)
    return fd_gradient_oracle(lambda v: scene.flat_loss(v, n), pack(surfels), index, eps)


def _kink_signature(scene: Scene, surfels: SurfelSet):
    """Discrete state of every non-smooth switch the objective passes through."""
    posed, dirs, out = scene.forward(surfels, keep_records=True)
    rec = out.records
    col = sh_to_color(posed.sh, dirs, scene.sh_degree) if len(posed) else np.zeros((0, 3))
    a = out.alpha.astype(float)
    return (rec.pix_start.tobytes(), rec.ids.tobytes(), rec.branch.tobytes(), rec.depth_rec.tobytes(),
            (rec.sigma >= scene.settings.alpha_max).tobytes(), (col > 0).tobytes(),
            np.sign(out.color.astype(float) - scene.frame.rgb).tobytes(),
            ((a > L.MASK_EPS) & (a < 1 - L.MASK_EPS)).tobytes())


@dataclass
class GradCheck:
    labels: list
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    boundary: np.ndarray  # True where +-eps crosses a truncation or clamp switch

    @property
    def checked(self):
        return ~self.boundary

    def pass_fraction(self, tol=1e-3):
        c = self.checked
        return float(np.mean(self.rel_err[c] <= tol)) if c.any() else 1.0

    def worst(self):
        c = self.checked
        return float(self.rel_err[c].max()) if c.any() else 0.0


def gradient_check(scene: Scene, surfels: SurfelSet, eps=1e-6, floor=1e-6, indices=None) -> GradCheck:
    """Analytic vs central-difference gradient for every packed parameter.

    Relative error is ``|a - f| / max(|a|, |f|, floor)``. A parameter is a
    boundary parameter when either perturbed state changes the set of blend
    records, their branch, the median-depth pick, or any clamp or sign
    switch; the objective is not differentiable across those and the
    central difference measures the jump, not the slope.
    """
    n = len(surfels)
    g = scene.step(surfels).grads.flat()
    x = pack(surfels)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    base = _kink_signature(scene, surfels)
    num = np.zeros(len(idx))
    bnd = np.zeros(len(idx), dtype=bool)
    for j, i in enumerate(idx):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        sp, sm = unpack(xp, n), unpack(xm, n)
        num[j] = (scene.loss(sp) - scene.loss(sm)) / (2 * eps)
        bnd[j] = _kink_signature(scene, sp) != base or _kink_signature(scene, sm) != base
    a = g[idx]
    err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
    labels = param_labels(n)
    return GradCheck([labels[i] for i in idx], a, num, err, bnd)
