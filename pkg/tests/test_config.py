import math

import pytest
import yaml

from surfel_avatar.config import ConfigError, TrainConfig, config_from_dict, dump_config, load_config


def test_defaults_cover_documented_values():
    c = TrainConfig()
    assert (c.lr.means, c.lr.means_final, c.lr.sh, c.lr.opacity_logits, c.lr.log_scales, c.lr.quats) == \
        (1.6e-4, 1.6e-6, 2.5e-3, 5e-2, 5e-3, 1e-3)
    assert c.density.eccentricity_threshold == 9.0
    assert c.loss.dssim == 0.2


def test_yaml_roundtrip(tmp_path):
    c = TrainConfig(dataset="/data", iterations=12)
    c.density.eccentricity_threshold = float("inf")
    p = tmp_path / "c.yaml"
    dump_config(c, p)
    back = load_config(p)
    assert back.iterations == 12 and math.isinf(back.density.eccentricity_threshold)
    assert back.hash() == c.hash()


def test_relative_paths_resolve_against_file(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.yaml"
    p.write_text(yaml.safe_dump({"dataset": "..", "output": "out"}))
    c = load_config(p)
    assert c.dataset == str(tmp_path.resolve()) and c.output == str((tmp_path / "sub" / "out").resolve())


def test_hash_ignores_output_only():
    a = TrainConfig(output="x")
    b = TrainConfig(output="y")
    assert a.hash() == b.hash()
    assert TrainConfig(seed=1).hash() != a.hash()


@pytest.mark.parametrize("bad", [
    {"itterations": 3},
    {"loss": {"aera": 1.0}},
    {"precision": "f16"},
    {"density": {"eccentricity_threshold": 0.5}},
    {"loss": {"area": -1}},
    {"iterations": -1},
])
def test_rejects_bad_configs(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_string_infinity_threshold():
    c = config_from_dict({"density": {"eccentricity_threshold": "inf"}})
    assert math.isinf(c.density.eccentricity_threshold)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_shipped_default_config_matches_code():
    from pathlib import Path
    p = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    c = load_config(p)
    ref = TrainConfig(dataset=c.dataset, output=c.output)
    assert c.as_dict() == ref.as_dict()
