"""File formats: images, float planes, checkpoints, weight-field cache and the dataset layout.

Byte layouts are documented in docs/formats.md.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import SH_COEFFS, Camera, SurfelSet
from .skinning import (PoseParams, SkinnedTemplate, TemplateError, WeightField, build_weight_field, load_template,
                       parse_template)


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------
# images
# ----------------------------------------------------------------------------

def write_png(path, img):
    a = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    a = np.round(a * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path)


def read_png(path, mode=None):
    try:
        with Image.open(path) as im:
            if mode is not None:
                im = im.convert(mode)
            return np.asarray(im, dtype=float) / 255.0
    except FileNotFoundError:
        raise DatasetError(f"missing image: {path}") from None
    except OSError as e:
        raise DatasetError(f"unreadable image {path}: {e}") from e


def encode_normals(n):
    """(n + 1) / 2; zero normals become mid-grey."""
    return (np.asarray(n, dtype=float) + 1.0) * 0.5


def decode_normals(rgb):
    v = np.asarray(rgb, dtype=float) * 2.0 - 1.0
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = norm > 0.5
    return np.where(ok, v / np.where(ok, norm, 1.0), 0.0)


def write_normals_png(path, n):
    write_png(path, encode_normals(n))


def read_normals_png(path):
    return decode_normals(read_png(path, "RGB"))


PLANE_MAGIC = b"FPLN"


def write_plane(path, arr):
    """Raw float32 image: magic, u32 width, height, channels, then row-major data."""
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    H, W, C = a.shape
    with open(path, "wb") as fh:
        fh.write(PLANE_MAGIC + struct.pack("<3I", W, H, C))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_plane(path):
    buf = Path(path).read_bytes()
    if buf[:4] != PLANE_MAGIC:
        raise ValueError(f"{path}: not a float plane")
    W, H, C = struct.unpack_from("<3I", buf, 4)
    a = np.frombuffer(buf, "<f4", W * H * C, 16).reshape(H, W, C)
    return a[..., 0].copy() if C == 1 else a.copy()


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

CKPT_MAGIC = b"SAVCKPT\x00"
CKPT_VERSION = 1
_OPT_KEYS = tuple(f"{p}.{k}" for p in ("m", "v") for k in SurfelSet.PARAM_NAMES)


@dataclass
class Checkpoint:
    surfels: SurfelSet
    iteration: int = 0
    optimizer_step: int = 0
    optimizer_state: dict = field(default_factory=dict)
    config_hash: str = "0" * 64
    meta: dict = field(default_factory=dict)
    template_bytes: bytes = b""

    def template(self) -> SkinnedTemplate | None:
        return parse_template(self.template_bytes, "checkpoint") if self.template_bytes else None


def _param_shapes(n):
    return {"means": (n, 3), "quats": (n, 4), "log_scales": (n, 2), "opacity_logits": (n,), "sh": (n, SH_COEFFS, 3)}


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    n = len(ck.surfels)
    meta = json.dumps(ck.meta, sort_keys=True, separators=(",", ":")).encode()
    has_opt = 1 if ck.optimizer_state else 0
    parts = [CKPT_MAGIC,
             struct.pack("<4I2Q", CKPT_VERSION, n, SH_COEFFS, has_opt, ck.iteration, ck.optimizer_step),
             bytes.fromhex(ck.config_hash),
             struct.pack("<2I", len(meta), len(ck.template_bytes)), meta, ck.template_bytes]
    shapes = _param_shapes(n)
    for k in SurfelSet.PARAM_NAMES:
        parts.append(np.ascontiguousarray(getattr(ck.surfels, k), dtype="<f8").reshape(shapes[k]).tobytes())
    if has_opt:
        for k in _OPT_KEYS:
            parts.append(np.ascontiguousarray(ck.optimizer_state[k], dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(ck: Checkpoint, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, n, nc, has_opt, it, ostep = struct.unpack_from("<4I2Q", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if nc != SH_COEFFS:
        raise CheckpointError(f"{path}: expected {SH_COEFFS} SH coefficients, found {nc}")
    off = 8 + 32
    chash = buf[off:off + 32].hex()
    off += 32
    lm, lt = struct.unpack_from("<2I", buf, off)
    off += 8
    meta = json.loads(buf[off:off + lm].decode())
    off += lm
    tbytes = bytes(buf[off:off + lt])
    off += lt
    shapes = _param_shapes(n)

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        if off + 8 * count > len(buf):
            raise CheckpointError(f"{path}: truncated")
        a = np.frombuffer(buf, "<f8", count, off).reshape(shape).astype(float)
        off += 8 * count
        return a

    params = {k: take(shapes[k]) for k in SurfelSet.PARAM_NAMES}
    opt = {}
    if has_opt:
        for k in _OPT_KEYS:
            opt[k] = take(shapes[k.split(".", 1)[1]])
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return Checkpoint(SurfelSet(**params), it, ostep, opt, chash, meta, tbytes)


# ----------------------------------------------------------------------------
# weight-field cache
# ----------------------------------------------------------------------------

def template_hash(path_or_template):
    if isinstance(path_or_template, (str, Path)):
        return hashlib.sha256(Path(path_or_template).read_bytes()).hexdigest()
    return path_or_template.digest()


def load_or_build_field(template: SkinnedTemplate, resolution, diffusion_iters, cache_dir=None, key=None):
    """Weight field for ``template``, cached on disk by template hash, resolution and iterations."""
    key = key or template.digest()
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"wfield_{key[:16]}_r{resolution}_i{diffusion_iters}.bin"
        if path.exists():
            return WeightField.frombytes(path.read_bytes()), True
    wf = build_weight_field(template, resolution=resolution, diffusion_iters=diffusion_iters)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(wf.tobytes())
        tmp.replace(path)
    return wf, False


# ----------------------------------------------------------------------------
# cameras and poses
# ----------------------------------------------------------------------------

def write_camera(path, cam: Camera):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cam.to_dict(), indent=1))


def read_camera(path) -> Camera:
    try:
        return Camera.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise DatasetError(f"missing camera: {path}") from None
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"invalid camera file {path}: {e}") from e


def pose_to_dict(pose: PoseParams):
    return {"rotations": pose.rotations.tolist(), "translation": pose.translation.tolist()}


def pose_from_dict(d) -> PoseParams:
    if "rotations" in d:
        return PoseParams(np.asarray(d["rotations"], dtype=float), np.asarray(d.get("translation", [0, 0, 0]), float))
    if "axis_angle" in d:
        return PoseParams.from_axis_angle(np.asarray(d["axis_angle"], dtype=float),
                                          np.asarray(d.get("translation", [0, 0, 0]), float))
    raise ValueError("pose needs 'rotations' or 'axis_angle'")


def write_pose(path, pose: PoseParams):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(pose_to_dict(pose)))


def read_pose(path) -> PoseParams:
    try:
        return pose_from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise DatasetError(f"missing pose: {path}") from None
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"invalid pose file {path}: {e}") from e


def read_pose_sequence(path):
    """A JSON list of poses, or an object with a ``poses`` list."""
    d = json.loads(Path(path).read_text())
    if isinstance(d, dict):
        d = d.get("poses", [d] if ("rotations" in d or "axis_angle" in d) else [])
    return [pose_from_dict(p) for p in d]


def read_camera_list(path):
    """A single camera JSON, a list of them, or a directory of ``*.json`` files."""
    p = Path(path)
    if p.is_dir():
        return [read_camera(f) for f in sorted(p.glob("*.json"))]
    d = json.loads(p.read_text())
    if isinstance(d, dict) and "cameras" in d:
        d = d["cameras"]
    if isinstance(d, dict):
        d = [d]
    return [Camera.from_dict(c) for c in d]


# ----------------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------------

@dataclass
class FrameSample:
    view: str
    frame: str
    rgb: np.ndarray
    mask: np.ndarray
    normal_map: np.ndarray
    camera: Camera
    pose: PoseParams


@dataclass
class Dataset:
    root: Path
    template: SkinnedTemplate
    template_key: str
    views: list
    frames: list
    cameras: dict
    poses: dict
    split: dict
    samples: dict = field(default_factory=dict)

    def subset(self, name):
        if name not in self.split:
            raise DatasetError(f"split file has no '{name}' entry")
        s = self.split[name]
        return [self.samples[(v, f)] for v in s["views"] for f in s["frames"]]

    def __len__(self):
        return len(self.samples)


def _split_lists(d, views, frames, path):
    out = {}
    for name, spec in d.items():
        vs = views if spec.get("views", "all") == "all" else [str(v) for v in spec["views"]]
        fs = frames if spec.get("frames", "all") == "all" else [str(f) for f in spec["frames"]]
        for v in vs:
            if v not in views:
                raise DatasetError(f"{path}: split '{name}' names unknown view {v}")
        for f in fs:
            if f not in frames:
                raise DatasetError(f"{path}: split '{name}' names unknown frame {f}")
        out[name] = {"views": vs, "frames": fs}
    return out


def load_dataset(path, split_file="split.json", load_images=True) -> Dataset:
    """Load and validate a dataset directory (layout in docs/formats.md)."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    tpath = root / "template.skel"
    if not tpath.exists():
        raise DatasetError(f"missing template: {tpath}")
    try:
        template = load_template(tpath)
    except TemplateError as e:
        raise DatasetError(f"invalid template {tpath}: {e}") from e
    key = template_hash(tpath)
    cam_files = sorted((root / "cameras").glob("*.json"))
    if not cam_files:
        raise DatasetError(f"no cameras found in {root / 'cameras'}")
    views = [f.stem for f in cam_files]
    cameras = {v: read_camera(f) for v, f in zip(views, cam_files)}
    pose_files = sorted((root / "poses").glob("*.json"))
    if not pose_files:
        raise DatasetError(f"no poses found in {root / 'poses'}")
    frames = [f.stem for f in pose_files]
    poses = {}
    for fr, f in zip(frames, pose_files):
        p = read_pose(f)
        if p.rotations.shape[0] != template.joint_count:
            raise DatasetError(f"{f}: pose has {p.rotations.shape[0]} joints, template has {template.joint_count}")
        poses[fr] = p
    spath = root / split_file
    if not spath.exists():
        raise DatasetError(f"missing split file: {spath}")
    split = _split_lists(json.loads(spath.read_text()), views, frames, spath)

    ds = Dataset(root, template, key, views, frames, cameras, poses, split)
    # check existence first so the error names the first missing file of each kind
    for kind in ("frames", "masks", "normals"):
        for v in views:
            for fr in frames:
                p = root / kind / v / f"{fr}.png"
                if not p.exists():
                    what = {"frames": "frame", "masks": "mask", "normals": "normal map"}[kind]
                    raise DatasetError(f"missing {what}: {p}")
    if load_images:
        for v in views:
            cam = cameras[v]
            for fr in frames:
                ds.samples[(v, fr)] = load_sample(root, v, fr, cam, poses[fr])
    return ds


def load_sample(root, view, frame, camera, pose) -> FrameSample:
    root = Path(root)
    fp = root / "frames" / view / f"{frame}.png"
    mp = root / "masks" / view / f"{frame}.png"
    npth = root / "normals" / view / f"{frame}.png"
    rgb = read_png(fp, "RGB")
    mask = read_png(mp, "L") > 0.5
    nrm = read_normals_png(npth)
    shape = (camera.height, camera.width)
    for p, a in ((fp, rgb), (mp, mask), (npth, nrm)):
        if a.shape[:2] != shape:
            raise DatasetError(f"{p}: size {a.shape[1]}x{a.shape[0]} does not match camera {shape[1]}x{shape[0]}")
    if not mask.any():
        raise DatasetError(f"{mp}: empty foreground mask")
    return FrameSample(view, frame, rgb, mask, nrm, camera, pose)
