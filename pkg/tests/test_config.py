import pytest

from adavla.config import RunConfig, load_config
from adavla.numerics import ConfigError, InputError


def test_defaults_without_file():
    cfg = load_config(None)
    assert isinstance(cfg, RunConfig)
    assert cfg.backbone.num_layers == 8
    assert cfg.engine.mode == "routed"
    assert cfg.bc.steps == 4000
    assert cfg.cache.capacity == 64


def test_missing_file_raises(tmp_path):
    with pytest.raises(InputError):
        load_config(tmp_path / "absent.ini")


def test_partial_file_overrides_only_named_keys(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("""
[engine]
mode = fixed
n_lay = 5
keep_ratio = 0.25

[bc]
steps = 12
""")
    cfg = load_config(path)
    assert cfg.engine.mode == "fixed"
    assert cfg.engine.n_lay == 5
    assert cfg.engine.keep_ratio == 0.25
    assert cfg.engine.tau_cache == 0.2   # untouched default
    assert cfg.bc.steps == 12
    assert cfg.bc.episodes == 120        # untouched default
    assert cfg.backbone.d_model == 64


def test_type_coercion(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("""
[engine]
use_cache = false
n_lay = none

[head]
beta_range = 0.1, 0.5

[distill]
lambda_temp = 0.0
""")
    cfg = load_config(path)
    assert cfg.engine.use_cache is False
    assert cfg.engine.n_lay is None
    assert cfg.head.beta_range == (0.1, 0.5)
    assert cfg.distill.lambda_temp == 0.0


def test_bool_parse_variants(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[engine]\nuse_tokens = on\nuse_layers = 0\n")
    cfg = load_config(path)
    assert cfg.engine.use_tokens is True
    assert cfg.engine.use_layers is False


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[rocket]\nthrust = 11\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[engine]\nwarp_speed = 9\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_bad_bool_value_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[engine]\nuse_cache = maybe\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_invalid_value_surfaces_dataclass_validation(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[engine]\nmode = warp\n")
    with pytest.raises(ConfigError):
        load_config(path)
