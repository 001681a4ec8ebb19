"""Training configuration (YAML) with every default spelled out."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .density import DensifyConfig
from .losses import LossWeights
from .optim import LearningRates


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    output: str = "run"
    iterations: int = 30000
    seed: int = 0
    deterministic: bool = True
    precision: str = "f64"
    checkpoint_interval: int = 5000
    log_interval: int = 10
    sh_degree: int = 3
    sh_warmup_interval: int = 1000
    weight_field_resolution: int = 128
    diffusion_iters: int = 50
    render_mode: str = "tiled"
    tile_size: int = 16
    init_opacity: float = 0.1
    extent: float | None = None
    normal_depth_grad: bool = True
    split: str = "split.json"
    lr: LearningRates = field(default_factory=LearningRates)
    loss: LossWeights = field(default_factory=LossWeights)
    density: DensifyConfig = field(default_factory=DensifyConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in 0..3")
        if self.render_mode not in ("tiled", "bruteforce"):
            raise ConfigError("render_mode must be tiled or bruteforce")
        if not 0 < self.init_opacity < 1:
            raise ConfigError("init_opacity must be in (0, 1)")
        if self.sh_warmup_interval <= 0 or self.log_interval <= 0 or self.checkpoint_interval <= 0:
            raise ConfigError("intervals must be positive")

    def as_dict(self):
        return asdict(self)

    def hash(self):
        """SHA-256 of the canonical JSON form (paths excluded so reruns elsewhere match)."""
        d = self.as_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_NESTED = {"lr": LearningRates, "loss": LossWeights, "density": DensifyConfig}


def config_from_dict(d, base_dir=None):
    d = dict(d or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        if k in _NESTED:
            cls = _NESTED[k]
            sub_known = {f.name for f in fields(cls)}
            bad = set(v or {}) - sub_known
            if bad:
                raise ConfigError(f"unknown keys in {k}: {sorted(bad)}")
            v = dict(v or {})
            if isinstance(v.get("eccentricity_threshold"), str):
                v["eccentricity_threshold"] = float(v["eccentricity_threshold"])
            try:
                kw[k] = cls(**v)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{k}: {e}") from e
        else:
            kw[k] = v
    cfg = TrainConfig(**kw)
    if base_dir is not None:
        base = Path(base_dir)
        for k in ("dataset", "output"):
            p = getattr(cfg, k)
            if p and not Path(p).is_absolute():
                setattr(cfg, k, str((base / p).resolve()))
    return cfg


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        d = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(d, base_dir=path.parent)


def dump_config(cfg: TrainConfig, path=None):
    text = yaml.safe_dump(cfg.as_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
