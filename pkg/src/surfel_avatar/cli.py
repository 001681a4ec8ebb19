"""Command-line entry point: train, render, eval, gen-rig."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .config import ConfigError, load_config

log = logging.getLogger("surfel_avatar")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="override the random seed")
    p.add_argument("--deterministic", action="store_true", help="sequential reductions only (the default kernels already are)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None, help="render-path precision")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="surfel-avatar", description="2D Gaussian surfel avatars")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model to a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--eccentricity-definition", choices=("ratio", "alt"), default=None)
    _common(p)

    p = sub.add_parser("render", help="render a trained model in new poses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True, help="JSON pose list")
    p.add_argument("--cameras", required=True, help="camera JSON file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", action="store_true", help="also write float depth planes")
    _common(p)

    p = sub.add_parser("eval", help="PSNR/SSIM on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--split-file", default="split.json")
    p.add_argument("--csv", default=None, help="where to write the metrics CSV (default next to the checkpoint)")
    _common(p)

    p = sub.add_parser("gen-rig", help="write the synthetic two-bone cylinder dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--oracle", action="store_true", help="render ground truth with the brute-force rasterizer")
    _common(p)
    return ap


def cmd_train(a):
    from .trainer import train
    cfg = load_config(a.config)
    if a.seed is not None:
        cfg.seed = a.seed
    if a.precision:
        cfg.precision = a.precision
    if a.deterministic:
        cfg.deterministic = True
    if a.iterations is not None:
        cfg.iterations = a.iterations
    if a.output:
        cfg.output = str(Path(a.output).resolve())
    if a.eccentricity_definition:
        cfg.density.eccentricity_definition = a.eccentricity_definition

    def progress(step, bd, n):
        if step % 100 == 0:
            log.info("iter %d  loss %.5f  l1 %.5f  surfels %d", step, bd.total, bd.l1, n)

    res = train(cfg, progress=progress)
    print(f"wrote {res.checkpoint_path} ({len(res.checkpoint.surfels)} surfels, {res.seconds:.1f} s)")
    return 0


def cmd_render(a):
    from .trainer import render_pose
    ck = io.load_checkpoint(a.checkpoint)
    poses = io.read_pose_sequence(a.poses)
    cams = io.read_camera_list(a.cameras)
    rep = render_pose(ck, poses, cams, a.out, cache_dir=Path(a.checkpoint).parent / "cache",
                      precision=a.precision or "f64", write_depth=a.depth)
    print(f"rendered {rep.frames} images in {rep.seconds:.3f} s ({rep.fps:.1f} FPS)")
    return 0


def cmd_eval(a):
    from .trainer import evaluate
    ck = io.load_checkpoint(a.checkpoint)
    ds = io.load_dataset(a.dataset, a.split_file)
    rep = evaluate(ck, ds, a.split, precision=a.precision or "f64")
    print(rep.table())
    out = Path(a.csv) if a.csv else Path(a.checkpoint).with_suffix(f".{a.split}.csv")
    rep.write_csv(out)
    print(f"wrote {out}")
    return 0


def cmd_gen_rig(a):
    from .rig import generate_rig_dataset
    out = generate_rig_dataset(a.out, n_views=a.views, n_frames=a.frames, size=a.size,
                               seed=a.seed if a.seed is not None else 0,
                               mode="bruteforce" if a.oracle else "tiled")
    print(f"wrote {a.views * a.frames} samples to {out}")
    return 0


def main(argv=None):
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    handlers = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval, "gen-rig": cmd_gen_rig}
    try:
        return handlers[a.command](a)
    except (ConfigError, io.DatasetError, io.CheckpointError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
