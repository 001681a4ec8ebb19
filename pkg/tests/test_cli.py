import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from surfel_avatar import io
from surfel_avatar.cli import main


def test_gen_rig_train_render_eval(tmp_path, capsys):
    ds = tmp_path / "rig"
    assert main(["gen-rig", "--out", str(ds), "--views", "2", "--frames", "2", "--size", "24"]) == 0
    cfg = yaml.safe_load((ds / "rig.yaml").read_text())
    assert cfg["dataset"] == "."
    split = json.loads((ds / "split.json").read_text())
    split["test"]["views"] = ["01"]
    split["train"]["views"] = ["00"]
    (ds / "split.json").write_text(json.dumps(split))
    cfg.update(weight_field_resolution=12, diffusion_iters=5)
    (ds / "small.yaml").write_text(yaml.safe_dump(cfg))

    assert main(["train", "--config", str(ds / "small.yaml"), "--iterations", "6", "--seed", "3",
                 "--precision", "f64", "--deterministic", "--output", str(tmp_path / "run")]) == 0
    ck = tmp_path / "run" / "final.bin"
    assert io.load_checkpoint(ck).iteration == 6

    assert main(["render", "--checkpoint", str(ck), "--poses", str(ds / "poses" / "0001.json"),
                 "--cameras", str(ds / "cameras"), "--out", str(tmp_path / "out"), "--precision", "f32"]) == 0
    assert (tmp_path / "out" / "01" / "0000.png").exists()
    assert "FPS" in capsys.readouterr().out

    assert main(["eval", "--checkpoint", str(ck), "--dataset", str(ds), "--split", "test"]) == 0
    out = capsys.readouterr().out
    assert "PSNR" in out and (tmp_path / "run" / "final.test.csv").exists()


def test_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["render", "--checkpoint", str(tmp_path / "x.bin"), "--poses", "p", "--cameras", "c",
                 "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.yaml").write_text("itterations: 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_missing_dataset_dir(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"dataset": "nowhere", "iterations": 1}))
    assert main(["train", "--config", str(tmp_path / "c.yaml")]) == 2
    assert "dataset directory not found" in capsys.readouterr().err


def test_module_help():
    r = subprocess.run([sys.executable, "-m", "surfel_avatar", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-rig" in r.stdout


SNIPPET = """
import numpy as np
from surfel_avatar import backend
from surfel_avatar.raster import render
from surfel_avatar.scenes import random_camera, stress_scene
rng = np.random.default_rng(0)
cam = random_camera(rng, 20)
s = stress_scene(rng, 16)
out = render(s, cam, 3, keep_records=True)
print(backend())
np.save({path!r}, out.color)
"""


def test_disable_jit_flag_switches_to_numpy(tmp_path):
    res = {}
    for flag in ("0", "1"):
        path = str(tmp_path / f"c{flag}.npy")
        env = dict(os.environ, SURFEL_AVATAR_DISABLE_JIT=flag)
        r = subprocess.run([sys.executable, "-c", SNIPPET.format(path=path)], capture_output=True, text=True,
                           env=env)
        assert r.returncode == 0, r.stderr
        res[flag] = (r.stdout.strip(), np.load(path))
    assert res["0"][0] == "numba" and res["1"][0] == "numpy"
    assert np.abs(res["0"][1] - res["1"][1]).max() < 1e-12
