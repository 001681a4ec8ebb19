"""Adam with per-parameter-group learning rates and resizable state."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import SurfelSet


@dataclass
class LearningRates:
    means: float = 1.6e-4
    means_final: float = 1.6e-6
    means_decay_steps: int = 30000
    quats: float = 1e-3
    log_scales: float = 5e-3
    opacity_logits: float = 5e-2
    sh: float = 2.5e-3
    sh_rest_factor: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"learning rate {k} must be positive")

    def means_at(self, step):
        t = np.clip(step / self.means_decay_steps, 0.0, 1.0)
        return float(np.exp((1 - t) * np.log(self.means) + t * np.log(self.means_final)))


class Adam:
    def __init__(self, surfels: SurfelSet, lrs: LearningRates | None = None, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = lrs or LearningRates()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in surfels.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in surfels.params().items()}

    def _lr(self, name):
        if name == "means":
            return self.lrs.means_at(self.step_count)
        return getattr(self.lrs, name)

    def step(self, surfels: SurfelSet, grads):
        b1, b2 = self.beta1, self.beta2
        t = self.step_count + 1
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + self.eps)
            lr = self._lr(name)
            p = getattr(surfels, name)
            if name == "sh":
                p[:, :1] -= lr * upd[:, :1]
                p[:, 1:] -= lr * self.lrs.sh_rest_factor * upd[:, 1:]
            else:
                p -= lr * upd
        self.step_count = t
        surfels.renormalize()

    def remap(self, src):
        """Reindex state after densification; ``src[j] == -1`` marks a new surfel."""
        src = np.asarray(src)
        new = src < 0
        for d in (self.m, self.v):
            for k, arr in d.items():
                out = arr[np.where(new, 0, src)] if len(arr) else np.zeros((len(src),) + arr.shape[1:])
                out[new] = 0.0
                d[k] = out

    def state_arrays(self):
        out = {}
        for k in SurfelSet.PARAM_NAMES:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, step_count):
        for k in SurfelSet.PARAM_NAMES:
            self.m[k] = np.array(arrays[f"m.{k}"], dtype=float)
            self.v[k] = np.array(arrays[f"v.{k}"], dtype=float)
        self.step_count = int(step_count)
