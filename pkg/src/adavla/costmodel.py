"""Analytic per-step MAC model, composed from the same kernel cost table the
runtime counters use.

The engine instruments every counted kernel call; this module predicts what
those counters must read for a given set of routing decisions. Tests demand
integer equality between the two, so any new counted kernel in the live path
must be mirrored here.

Component lanes:
  router   patch tokenizer (runs every step) + condition/gate heads
  backbone gated transformer stack over the compacted sequence
  head     K denoise iterations of the action MLP
  cache    key projection, paid only when a reuse request computes a key
"""

from __future__ import annotations

from .action_head import HeadConfig
from .backbone import BackboneConfig
from .cache import CacheConfig
from .numerics import count_macs
from .router import RouterConfig


def tokenizer_macs(bb: BackboneConfig) -> int:
    return count_macs("linear", bb.n_vision_tokens, bb.obs_channels, bb.d_v)


def condition_macs(rt: RouterConfig) -> int:
    d = rt.d_router
    macs = 0
    for d_in in (rt.d_a, rt.d_v, rt.d_text, rt.d_step_embed, rt.d_cue):
        macs += count_macs("linear", 1, d_in, d)
    macs += count_macs("linear", 1, 5 * d, d)
    macs += count_macs("linear", 1, d, d)
    return macs


def gate_head_macs(rt: RouterConfig, n_tokens: int) -> int:
    macs = count_macs("linear", 1, rt.d_router, 1)                 # cache gate
    macs += count_macs("linear", n_tokens, rt.d_v, rt.d_match)     # token-side match
    macs += count_macs("linear", 1, rt.d_router, rt.d_match)       # condition-side match
    macs += count_macs("matmul", 1, n_tokens, rt.d_match, 1)       # score product
    macs += count_macs("linear", 1, rt.d_router, rt.num_layers)    # layer gate
    return macs


def block_macs(bb: BackboneConfig, seq_len: int) -> int:
    d = bb.d_model
    macs = 3 * count_macs("linear", seq_len, d, d)                 # q, k, v
    macs += count_macs("attention", bb.num_heads, seq_len, seq_len, bb.head_dim)
    macs += count_macs("linear", seq_len, d, d)                    # output proj
    macs += count_macs("linear", seq_len, d, bb.mlp_ratio * d)     # mlp up
    macs += count_macs("linear", seq_len, bb.mlp_ratio * d, d)     # mlp down
    return macs


def head_macs(hd: HeadConfig) -> int:
    d_in = hd.d_z + hd.chunk_dim + hd.step_embed_dim
    per_step = (count_macs("linear", 1, d_in, hd.hidden)
                + count_macs("linear", 1, hd.hidden, hd.hidden)
                + count_macs("linear", 1, hd.hidden, hd.chunk_dim))
    return hd.denoise_steps * per_step


def key_macs(bb: BackboneConfig, cc: CacheConfig) -> int:
    return count_macs("linear", 1, bb.d_v, cc.projection_dim)


def predict_step_macs(bb: BackboneConfig, rt: RouterConfig, hd: HeadConfig,
                      cc: CacheConfig, *, kept_tokens: int, executed_layers: int,
                      routing_active: bool, reuse_requested: bool,
                      cache_hit: bool, text_len: int | None = None) -> dict[str, int]:
    """Exact per-component MACs for one control step's decisions."""
    text = bb.max_text_len if text_len is None else text_len
    router = tokenizer_macs(bb)
    if routing_active:
        router += condition_macs(rt) + gate_head_macs(rt, bb.n_vision_tokens)
    if cache_hit:
        backbone = 0
    else:
        seq_len = kept_tokens + text + 1
        backbone = executed_layers * block_macs(bb, seq_len)
    cache = key_macs(bb, cc) if reuse_requested else 0
    out = {
        "backbone": backbone,
        "router": router,
        "head": head_macs(hd),
        "cache": cache,
    }
    out["total"] = sum(out.values())
    return out


def dense_step_macs(bb: BackboneConfig, rt: RouterConfig, hd: HeadConfig,
                    cc: CacheConfig) -> dict[str, int]:
    """Reference cost of the unrouted pipeline (full tokens, all layers)."""
    return predict_step_macs(
        bb, rt, hd, cc,
        kept_tokens=bb.n_vision_tokens, executed_layers=bb.num_layers,
        routing_active=False, reuse_requested=False, cache_hit=False)
