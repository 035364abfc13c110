"""Checkpoint format: one .npz holding every parameter and buffer, plus a JSON
manifest with the configs needed to rebuild the modules.

Round trips are bit-exact: arrays are stored raw, never recompressed through
text. The manifest also carries a caller-supplied `extra` dict (training
metadata, seeds) that rides along untouched.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .action_head import ActionHead, HeadConfig
from .backbone import Backbone, BackboneConfig
from .cache import CacheConfig
from .engine import PolicyBundle
from .numerics import InputError, Rng
from .router import Router, RouterConfig

FORMAT_VERSION = 1
_MODULES = ("backbone", "router", "head")


def save_checkpoint(path: str | Path, bundle: PolicyBundle,
                    extra: dict | None = None) -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name in _MODULES:
        module = getattr(bundle, name)
        for key, tensor in module.state_dict().items():
            arrays[f"{name}.{key}"] = tensor.detach().cpu().numpy()
    manifest = {
        "format": FORMAT_VERSION,
        "configs": {
            "backbone": dataclasses.asdict(bundle.backbone.cfg),
            "router": dataclasses.asdict(bundle.router.cfg),
            "head": dataclasses.asdict(bundle.head.cfg),
            "cache": dataclasses.asdict(bundle.cache_cfg),
        },
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __manifest__=np.array(json.dumps(manifest)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[PolicyBundle, dict]:
    """Rebuild a policy bundle; returns (bundle, manifest 'extra' dict)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    data = np.load(path, allow_pickle=False)
    if "__manifest__" not in data:
        raise InputError(f"{path} is not a policy checkpoint (missing manifest)")
    manifest = json.loads(str(data["__manifest__"]))
    if manifest.get("format") != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format {manifest.get('format')!r}")

    cfgs = manifest["configs"]
    hd_kwargs = dict(cfgs["head"])
    hd_kwargs["beta_range"] = tuple(hd_kwargs["beta_range"])
    bb_cfg = BackboneConfig(**cfgs["backbone"])
    rt_cfg = RouterConfig(**cfgs["router"])
    hd_cfg = HeadConfig(**hd_kwargs)
    cache_cfg = CacheConfig(**cfgs["cache"])

    rng = Rng(0)
    bundle = PolicyBundle(
        backbone=Backbone(bb_cfg, rng),
        router=Router(rt_cfg, rng),
        head=ActionHead(hd_cfg, rng),
        cache_cfg=cache_cfg,
    )
    for name in _MODULES:
        module = getattr(bundle, name)
        state = {}
        prefix = f"{name}."
        for key in data.files:
            if key.startswith(prefix):
                state[key[len(prefix):]] = torch.from_numpy(data[key])
        module.load_state_dict(state, strict=True)
    return bundle, manifest["extra"]
