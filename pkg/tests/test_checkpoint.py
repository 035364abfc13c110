import pytest
import torch

from adavla.action_head import HeadConfig
from adavla.backbone import BackboneConfig
from adavla.cache import CacheConfig
from adavla.checkpoint import load_checkpoint, save_checkpoint
from adavla.engine import build_policy
from adavla.numerics import InputError


def small_bundle(seed=0):
    bb = BackboneConfig(num_layers=2, d_model=16, num_heads=2)
    return build_policy(seed, bb_cfg=bb,
                        hd_cfg=HeadConfig(d_z=16, horizon=4, hidden=32),
                        cache_cfg=CacheConfig(capacity=7, tau_cache=0.35))


def test_round_trip_bit_exact(tmp_path):
    bundle = small_bundle(seed=3)
    with torch.no_grad():
        bundle.router.cache_b.fill_(0.123)  # make sure non-init values survive
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, bundle, extra={"phase": "test", "steps": 17})

    loaded, extra = load_checkpoint(path)
    assert extra == {"phase": "test", "steps": 17}

    for name in ("backbone", "router", "head"):
        orig = getattr(bundle, name).state_dict()
        rest = getattr(loaded, name).state_dict()
        assert orig.keys() == rest.keys()
        for key in orig:
            assert torch.equal(orig[key], rest[key]), f"{name}.{key} differs"


def test_round_trip_preserves_configs(tmp_path):
    bundle = small_bundle(seed=4)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, bundle)
    loaded, _ = load_checkpoint(path)
    assert loaded.backbone.cfg == bundle.backbone.cfg
    assert loaded.router.cfg == bundle.router.cfg
    assert loaded.head.cfg == bundle.head.cfg
    assert loaded.cache_cfg == bundle.cache_cfg
    assert loaded.cache_cfg.capacity == 7
    assert loaded.head.cfg.beta_range == bundle.head.cfg.beta_range
    assert isinstance(loaded.head.cfg.beta_range, tuple)


def test_loaded_bundle_behaves_identically(tmp_path):
    from adavla.engine import EngineConfig, run_episode
    from adavla.envsim import EnvConfig

    bundle = small_bundle(seed=5)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, bundle)
    loaded, _ = load_checkpoint(path)

    env = EnvConfig(max_steps=10)
    cfg = EngineConfig(mode="routed")
    r1 = run_episode(bundle, seed=8, config=cfg, env_cfg=env, record_trace=True)
    r2 = run_episode(loaded, seed=8, config=cfg, env_cfg=env, record_trace=True)
    assert r1.trace == r2.trace


def test_missing_file_raises():
    with pytest.raises(InputError):
        load_checkpoint("/nonexistent/nowhere.npz")


def test_non_checkpoint_npz_rejected(tmp_path):
    import numpy as np
    path = tmp_path / "other.npz"
    np.savez(path, something=np.zeros(3))
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_wrong_format_version_rejected(tmp_path):
    import json
    import numpy as np
    path = tmp_path / "old.npz"
    np.savez(path, __manifest__=np.array(json.dumps({"format": 99})))
    with pytest.raises(InputError):
        load_checkpoint(path)
