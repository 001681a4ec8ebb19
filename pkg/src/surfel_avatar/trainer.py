"""Optimization loop, pose-driven rendering and evaluation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .config import TrainConfig
from .density import DensifyStats, densify_and_prune
from .geometry import Camera, SurfelSet, normalize, rgb_to_sh_dc
from .gradients import Scene
from .losses import psnr, ssim
from .optim import Adam
from .raster import RasterSettings, render
from .skinning import PoseParams, SkinnedTemplate, pose_to_joint_transforms, query_weights, skin_surfels

log = logging.getLogger(__name__)

LOG_COLUMNS = ("kind", "iteration", "l1", "dssim", "lpips", "photometric", "normal", "area", "opacity", "self_sup",
               "mask", "total", "surfels", "sh_degree", "clones", "splits", "prunes_opacity", "prunes_size",
               "prunes_eccentricity")


class TrainingError(RuntimeError):
    pass


def vertex_normals(template: SkinnedTemplate):
    V, F = template.rest_vertices, template.faces
    fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    vn = np.zeros_like(V)
    for k in range(3):
        np.add.at(vn, F[:, k], fn)
    return normalize(vn)


def initial_surfels(template: SkinnedTemplate, opacity=0.1, k_neighbors=3):
    """One surfel per template vertex, tangent to the mesh, sized by neighbour spacing, grey."""
    V = template.rest_vertices
    d, _ = cKDTree(V).query(V, k=k_neighbors + 1)
    s = np.maximum(d[:, 1:].mean(axis=1), 1e-6)
    n = vertex_normals(template)
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    r_u = normalize(np.cross(helper, n))
    r_v = np.cross(n, r_u)
    return SurfelSet.from_frames(V, r_u, r_v, np.stack([s, s], axis=1), opacity,
                                 colors_dc=np.full((len(V), 3), 0.5))


def scene_extent(template: SkinnedTemplate):
    """Bounding-sphere radius of the rest mesh (about its centroid)."""
    V = template.rest_vertices
    return float(np.linalg.norm(V - V.mean(axis=0), axis=1).max())


def settings_for(cfg: TrainConfig):
    return RasterSettings(tile_size=cfg.tile_size)


@dataclass
class TrainResult:
    checkpoint: io.Checkpoint
    checkpoint_path: Path | None
    log_path: Path | None
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    seconds: float = 0.0


def _meta(cfg: TrainConfig, extent, sh_degree):
    d = cfg.as_dict()
    d.pop("output")
    d.pop("dataset")
    return {"config": d, "extent": extent, "sh_degree": sh_degree,
            "weight_field_resolution": cfg.weight_field_resolution, "diffusion_iters": cfg.diffusion_iters}


def _fix_numbers(d):
    # JSON cannot carry inf; the checkpoint meta keeps it as a string
    if isinstance(d, dict):
        return {k: _fix_numbers(v) for k, v in d.items()}
    if isinstance(d, float) and not np.isfinite(d):
        return str(d)
    return d


def train(cfg: TrainConfig, dataset: io.Dataset | None = None, write=True, progress=None) -> TrainResult:
    """Fit canonical surfels to the training split of ``cfg.dataset``."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    ds = dataset or io.load_dataset(cfg.dataset, cfg.split)
    samples = ds.subset("train")
    if not samples:
        raise TrainingError("training split is empty")
    template = ds.template
    field_, _ = io.load_or_build_field(template, cfg.weight_field_resolution, cfg.diffusion_iters,
                                       Path(ds.root) / "cache", ds.template_key)
    extent = cfg.extent or scene_extent(template)
    surfels = initial_surfels(template, cfg.init_opacity)
    opt = Adam(surfels, cfg.lr)
    stats = DensifyStats(len(surfels))
    settings = settings_for(cfg)
    transforms = {}

    out_dir = Path(cfg.output) if write else None
    log_path = None
    writer = None
    fh = None
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

    history, events = [], []
    order = rng.permutation(len(samples))
    cursor = 0
    degree = 0
    try:
        for it in range(cfg.iterations):
            degree = min(cfg.sh_degree, it // cfg.sh_warmup_interval)
            if cursor == len(order):
                order = rng.permutation(len(samples))
                cursor = 0
            sample = samples[order[cursor]]
            cursor += 1
            if sample.frame not in transforms:
                transforms[sample.frame] = pose_to_joint_transforms(template, sample.pose)
            # weights follow the current canonical positions
            w = query_weights(field_, surfels.means)
            scene = Scene(sample, transforms[sample.frame], w, cfg.loss, degree, settings, cfg.render_mode,
                          normal_depth_grad=cfg.normal_depth_grad, precision=cfg.precision)
            res = scene.step(surfels)
            bd = res.breakdown
            bad = [k for k, v in bd.as_dict().items() if not np.isfinite(v)]
            if bad:
                raise TrainingError(f"non-finite loss at iteration {it}: term(s) {', '.join(bad)}")
            if not res.grads.all_finite():
                bad = [k for k, v in res.grads.items() if not np.all(np.isfinite(v))]
                raise TrainingError(f"non-finite gradient at iteration {it}: parameter(s) {', '.join(bad)}")
            stats.update(res.screen_grad, res.touched, res.grads.means)
            opt.step(surfels, dict(res.grads.items()))
            step = it + 1
            if cfg.density.due(step):
                surfels, ev, src = densify_and_prune(surfels, stats, cfg.density, step, extent, rng)
                opt.remap(src)
                stats.reset(len(surfels))
                events.append(ev)
                if writer:
                    writer.writerow(["density", step] + [""] * 10 + [ev.total_surfels, degree, ev.clones, ev.splits,
                                                                      ev.prunes_opacity, ev.prunes_size,
                                                                      ev.prunes_eccentricity])
            if step % cfg.log_interval == 0 or step == cfg.iterations:
                row = bd.as_dict()
                history.append((step, row["total"], len(surfels)))
                if writer:
                    writer.writerow(["step", step] + [f"{row[k]:.9g}" for k in LOG_COLUMNS[2:12]]
                                    + [len(surfels), degree, "", "", "", "", ""])
                if progress:
                    progress(step, bd, len(surfels))
            if write and step % cfg.checkpoint_interval == 0 and step != cfg.iterations:
                _save(out_dir / f"ckpt_{step:06d}.bin", surfels, opt, step, cfg, extent, degree, template)
    finally:
        if fh:
            fh.close()
    final_degree = min(cfg.sh_degree, max(cfg.iterations - 1, 0) // cfg.sh_warmup_interval)
    ck = _checkpoint(surfels, opt, cfg.iterations, cfg, extent, final_degree, template)
    ck_path = None
    if write:
        ck_path = out_dir / "final.bin"
        io.save_checkpoint(ck, ck_path)
    return TrainResult(ck, ck_path, log_path, history, events, time.perf_counter() - t_start)


def _checkpoint(surfels, opt, iteration, cfg, extent, degree, template):
    from .skinning import template_bytes
    return io.Checkpoint(surfels.copy(), iteration, opt.step_count,
                         {k: v.copy() for k, v in opt.state_arrays().items()}, cfg.hash(),
                         _fix_numbers(_meta(cfg, extent, degree)), template_bytes(template))


def _save(path, surfels, opt, iteration, cfg, extent, degree, template):
    io.save_checkpoint(_checkpoint(surfels, opt, iteration, cfg, extent, degree, template), path)


# ----------------------------------------------------------------------------
# rendering a trained model
# ----------------------------------------------------------------------------

@dataclass
class Avatar:
    """A trained model ready to be posed: canonical surfels, template and weight field."""

    surfels: SurfelSet
    template: SkinnedTemplate
    weight_field: object
    sh_degree: int = 3
    settings: RasterSettings = field(default_factory=RasterSettings)

    @classmethod
    def from_checkpoint(cls, ck: io.Checkpoint, cache_dir=None):
        template = ck.template()
        if template is None:
            raise ValueError("checkpoint carries no template")
        res = int(ck.meta.get("weight_field_resolution", 128))
        iters = int(ck.meta.get("diffusion_iters", 50))
        wf, _ = io.load_or_build_field(template, res, iters, cache_dir)
        tile = int(ck.meta.get("config", {}).get("tile_size", 16))
        return cls(ck.surfels, template, wf, int(ck.meta.get("sh_degree", 3)), RasterSettings(tile_size=tile))

    def posed(self, pose: PoseParams):
        if pose.rotations.shape[0] != self.template.joint_count:
            raise ValueError(f"pose has {pose.rotations.shape[0]} joints, template has {self.template.joint_count}")
        G = pose_to_joint_transforms(self.template, pose)
        return skin_surfels(self.surfels, query_weights(self.weight_field, self.surfels.means), G)

    def render(self, pose: PoseParams, camera: Camera, mode="tiled", precision="f64"):
        return render(self.posed(pose), camera, self.sh_degree, mode=mode, settings=self.settings,
                      precision=precision)


@dataclass
class RenderReport:
    paths: list
    frames: int
    seconds: float

    @property
    def fps(self):
        return self.frames / self.seconds if self.seconds > 0 else 0.0


def render_pose(ck: io.Checkpoint, poses, cameras, out_dir, cache_dir=None, precision="f64", write_depth=False):
    """Render every pose from every camera to ``out_dir/<camera>/<pose>.png``; report wall-clock FPS."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    av = Avatar.from_checkpoint(ck, cache_dir)
    for p in poses:
        if p.rotations.shape[0] != av.template.joint_count:
            raise ValueError(f"pose has {p.rotations.shape[0]} joints, template has {av.template.joint_count}")
    paths = []
    t0 = time.perf_counter()
    n = 0
    for i, pose in enumerate(poses):
        posed = av.posed(pose)
        for c, cam in enumerate(cameras):
            out = render(posed, cam, av.sh_degree, settings=av.settings, precision=precision)
            n += 1
            p = out_dir / f"{c:02d}" / f"{i:04d}.png"
            io.write_png(p, out.color)
            if write_depth:
                io.write_plane(p.with_suffix(".depth"), out.depth)
            paths.append(p)
    return RenderReport(paths, n, time.perf_counter() - t0)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list          # (view, frames, psnr, ssim)
    mean_psnr: float
    mean_ssim: float

    def table(self):
        lines = [f"{'view':>6} {'frames':>6} {'PSNR':>8} {'SSIM':>8}"]
        for v, n, p, s in self.rows:
            lines.append(f"{v:>6} {n:>6d} {p:8.3f} {s:8.4f}")
        lines.append(f"{'mean':>6} {'':>6} {self.mean_psnr:8.3f} {self.mean_ssim:8.4f}")
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "frames", "psnr", "ssim"])
            for r in self.rows:
                w.writerow([r[0], r[1], f"{r[2]:.9f}", f"{r[3]:.9f}"])
            w.writerow(["mean", sum(r[1] for r in self.rows), f"{self.mean_psnr:.9f}", f"{self.mean_ssim:.9f}"])


def evaluate_pairs(pairs):
    """``pairs``: iterable of (view, predicted rgb, target rgb, mask). Per-view means, then mean over views."""
    per = {}
    for view, pred, target, mask in pairs:
        per.setdefault(view, []).append((psnr(pred, target, mask), ssim(pred, target, mask)))
    rows = [(v, len(x), float(np.mean([a for a, _ in x])), float(np.mean([b for _, b in x])))
            for v, x in sorted(per.items())]
    if not rows:
        return EvalReport([], float("nan"), float("nan"))
    return EvalReport(rows, float(np.mean([r[2] for r in rows])), float(np.mean([r[3] for r in rows])))


def evaluate(ck: io.Checkpoint, dataset: io.Dataset, split="test", cache_dir=None, precision="f64"):
    av = Avatar.from_checkpoint(ck, cache_dir if cache_dir is not None else Path(dataset.root) / "cache")
    samples = dataset.subset(split)

    def gen():
        for s in samples:
            out = av.render(s.pose, s.camera, precision=precision)
            yield s.view, out.color.astype(float), s.rgb, s.mask

    return evaluate_pairs(gen())


def normal_error(ck: io.Checkpoint, dataset: io.Dataset, split="test", cache_dir=None):
    """Mean angular error (degrees) between rendered and ground-truth normal maps.

    Averaged over foreground pixels where both maps carry a normal, pooled
    over every sample of the split.
    """
    av = Avatar.from_checkpoint(ck, cache_dir if cache_dir is not None else Path(dataset.root) / "cache")
    total, count = 0.0, 0
    for s in dataset.subset(split):
        if s.normal_map is None:
            continue
        out = av.render(s.pose, s.camera)
        rn, tn = out.normal.astype(float), s.normal_map
        valid = (np.abs(rn).sum(-1) > 0) & (np.abs(tn).sum(-1) > 0) & s.mask
        cos = np.clip(np.sum(rn * tn, axis=-1)[valid], -1.0, 1.0)
        total += float(np.degrees(np.arccos(cos)).sum())
        count += int(valid.sum())
    return total / count if count else float("nan")


def area_variance(surfels: SurfelSet):
    """Population variance of s_u * s_v over the canonical surfels."""
    prod = np.prod(surfels.scales, axis=1)
    return float(np.var(prod)) if len(prod) else 0.0
