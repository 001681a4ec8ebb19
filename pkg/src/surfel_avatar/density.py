"""Adaptive densification and pruning, including the eccentricity filter."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import SurfelSet, logit


class DensityError(RuntimeError):
    pass


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.01
    opacity_prune_threshold: float = 0.005
    max_world_size: float = 0.1
    eccentricity_threshold: float = 9.0
    interval: int = 100
    stop_iteration: int = 15000
    start_iteration: int = 500
    eccentricity_definition: str = "ratio"
    enabled: bool = True

    def __post_init__(self):
        for k in ("grad_threshold", "split_scale_threshold", "opacity_prune_threshold", "max_world_size"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if not self.eccentricity_threshold > 1:
            raise ValueError("eccentricity_threshold must be > 1")
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        if self.eccentricity_definition not in ("ratio", "alt"):
            raise ValueError("eccentricity_definition must be 'ratio' or 'alt'")

    def due(self, iteration):
        return (self.enabled and iteration > 0 and iteration % self.interval == 0
                and self.start_iteration <= iteration < self.stop_iteration)

    def as_dict(self):
        return asdict(self)


def eccentricity(scales, definition="ratio"):
    """Axis ratio s_max / s_min (``"alt"``: sqrt(s_max^2 - s_min^2) / s_min)."""
    s = np.asarray(scales, dtype=float)
    hi, lo = s.max(axis=-1), s.min(axis=-1)
    if definition == "ratio":
        return hi / lo
    if definition == "alt":
        return np.sqrt(np.maximum(hi * hi - lo * lo, 0.0)) / lo
    raise ValueError(f"unknown eccentricity definition {definition!r}")


class DensifyStats:
    """Running mean of per-surfel screen-space positional gradient magnitude."""

    def __init__(self, n):
        self.grad_accum = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)
        self.last_grad = np.zeros((n, 3))

    def __len__(self):
        return len(self.count)

    def update(self, screen_grad, touched, mean_grad=None):
        vis = np.asarray(touched) > 0
        self.grad_accum[vis] += screen_grad[vis]
        self.count[vis] += 1
        if mean_grad is not None:
            self.last_grad[vis] = mean_grad[vis]

    def mean(self):
        return np.where(self.count > 0, self.grad_accum / np.maximum(self.count, 1), 0.0)

    def reset(self, n):
        self.__init__(n)


@dataclass
class DensifyEvents:
    iteration: int
    clones: int
    splits: int
    prunes_opacity: int
    prunes_size: int
    prunes_eccentricity: int
    total_surfels: int

    @property
    def prunes(self):
        return self.prunes_opacity + self.prunes_size + self.prunes_eccentricity

    def as_dict(self):
        return asdict(self)


def prune_reasons(surfels: SurfelSet, config: DensifyConfig, extent: float, eccentricity_filter=True):
    """Boolean masks (opacity, size, eccentricity); each surfel is charged to its first failing test."""
    opac = surfels.opacity
    s = surfels.scales
    low = opac < config.opacity_prune_threshold
    big = ~low & (s.max(axis=1) > config.max_world_size * extent)
    if eccentricity_filter and np.isfinite(config.eccentricity_threshold):
        ecc = ~low & ~big & (eccentricity(s, config.eccentricity_definition) > config.eccentricity_threshold)
    else:
        ecc = np.zeros(len(surfels), dtype=bool)
    return low, big, ecc


def densify_and_prune(surfels: SurfelSet, stats: DensifyStats, config: DensifyConfig, iteration: int,
                      extent: float, rng: np.random.Generator, eccentricity_filter=True):
    """Clone small high-gradient surfels, split large ones, then prune.

    Returns ``(new_surfels, events, keep_map)`` where ``keep_map[j]`` is the
    index of the source surfel of output ``j`` or -1 for a newly created one
    (whose optimizer moments start at zero).
    """
    n = len(surfels)
    if len(stats) != n:
        raise ValueError("stats size does not match surfel count")
    g = stats.mean()
    hot = g > config.grad_threshold
    smax = surfels.scales.max(axis=1)
    big = smax >= config.split_scale_threshold * extent
    clone_ids = np.flatnonzero(hot & ~big)
    split_ids = np.flatnonzero(hot & big)

    # clones: copy nudged against its last positional gradient, by a fraction of its size
    clones = surfels.select(clone_ids)
    lg = stats.last_grad[clone_ids]
    ln = np.linalg.norm(lg, axis=1, keepdims=True)
    step = np.where(ln > 0, lg / np.maximum(ln, 1e-30), 0.0)
    clones.means = clones.means - 0.5 * smax[clone_ids, None] * step

    # splits: two children sampled from the parent footprint, scales / 1.6
    parents = surfels.select(split_ids)
    R = parents.rotations
    s = parents.scales
    kids = []
    for _ in range(2):
        z = rng.standard_normal((len(split_ids), 2)) * s
        child = parents.copy()
        child.means = parents.means + R[:, :, 0] * z[:, :1] + R[:, :, 1] * z[:, 1:2]
        child.log_scales = np.log(s / 1.6)
        kids.append(child)

    keep_parent = np.ones(n, dtype=bool)
    keep_parent[split_ids] = False
    out = surfels.select(np.flatnonzero(keep_parent)).concat(clones).concat(kids[0]).concat(kids[1])
    src = np.concatenate([np.flatnonzero(keep_parent), np.full(len(clone_ids) + 2 * len(split_ids), -1)])

    low, large, ecc = prune_reasons(out, config, extent, eccentricity_filter)
    keep = ~(low | large | ecc)
    if not keep.any():
        raise DensityError(f"density control at iteration {iteration} removed every surfel")
    out = out.select(np.flatnonzero(keep))
    events = DensifyEvents(iteration, len(clone_ids), len(split_ids), int(low.sum()), int(large.sum()),
                           int(ecc.sum()), len(out))
    return out, events, src[keep]


def baseline_densify_and_prune(surfels, stats, config, iteration, extent, rng):
    """Clone/split/prune without the eccentricity filter."""
    return densify_and_prune(surfels, stats, config, iteration, extent, rng, eccentricity_filter=False)


def clamp_opacity(surfels: SurfelSet, lo=1e-4):
    """Raise logits so that no opacity is below ``lo`` (used after loading external sets)."""
    surfels.opacity_logits = np.maximum(surfels.opacity_logits, logit(lo))
    return surfels
