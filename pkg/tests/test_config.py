import pytest
import yaml

from msdetr.config import RunConfig, dump_config, load_config
from msdetr.model import ConfigError


def test_defaults_are_valid():
    cfg = RunConfig().validate()
    assert cfg.split_ratios == (0.70, 0.15, 0.15)
    assert cfg.flip_p == 0.5 and cfg.scale_jitter == (0.8, 1.2)


def test_yaml_round_trip(tmp_path):
    cfg = RunConfig(seed=5, lr=3e-4).replace(model={"n_queries": 12})
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    assert load_config(path) == cfg


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    assert load_config(path) == RunConfig()


@pytest.mark.parametrize("text, match", [
    ("bogus: 1\n", "bogus"),
    ("model: {bogus: 1}\n", "bogus"),
    ("model: 3\n", "mapping"),
    ("- 1\n- 2\n", "mapping"),
    ("split_ratios: [0.5, 0.2, 0.2]\n", "split_ratios"),
    ("flip_p: 1.5\n", "flip_p"),
    ("precision: 16\n", "precision"),
    ("batch_size: 0\n", "batch_size"),
    ("model: {d_model: 30, n_heads: 4}\n", "d_model"),
    ("model: {image_size: 100}\n", "image_size"),
    ("scale_jitter: [1.2, 0.8]\n", "scale_jitter"),
    ("cls_lr_mult: 0\n", "cls_lr_mult"),
    ("a: [\n", "YAML"),
])
def test_invalid_configs(tmp_path, text, match):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(path)


def test_replace_merges_model_fields():
    cfg = RunConfig().replace(seed=9, model={"rep": False})
    assert cfg.seed == 9 and cfg.model.rep is False and cfg.model.da is True


def test_shipped_configs_load():
    import pathlib
    root = pathlib.Path(__file__).resolve().parents[1] / "configs"
    paths = sorted(root.glob("*.yaml"))
    assert paths
    for p in paths:
        assert isinstance(load_config(p), RunConfig)
        yaml.safe_load(p.read_text())
