"""Closed-loop control: one routed (or dense) inference step and episode rollout.

A control step tokenizes the observation, builds the routing condition, emits
gates, consults the cognition cache, and — on a miss — runs the compacted,
layer-gated backbone before sampling an action chunk. Dense mode bypasses
every gating branch and must stay bitwise-equal to the plain reference
pipeline.

Per-step accounting lives in StepStats. Gate decisions are recorded even on a
cache hit (where the backbone never runs); the hit flag plus a zero backbone
FLOP count distinguish decision from execution.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch

from . import numerics
from .action_head import ActionHead, HeadConfig
from .backbone import Backbone, BackboneConfig
from .cache import CacheConfig, CognitionCache, delta_proxy, quantize_norm, reuse_requested
from .compaction import cognition_position, compact, patch_positions, text_positions
from .envsim import EnvConfig, Instruction, render, reset, step_env
from .numerics import ConfigError, FlopCounter, Rng
from .router import (ConditionInputs, Router, RouterConfig, binarize_layers,
                     build_cache_cue, geom_center_prior, pool_text, pool_vision,
                     top_n_layers, topk_mask)

MODES = ("dense", "routed", "fixed")


@dataclass
class EngineConfig:
    mode: str = "routed"
    keep_ratio: float = 0.4
    n_lay: int | None = None      # fixed layer count; required in fixed mode
    layer_floor: int = 2          # minimum executed layers under thresholding
    tau_cache: float = 0.2
    use_cache: bool = True
    use_tokens: bool = True
    use_layers: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "fixed" and self.n_lay is None:
            raise ConfigError("fixed mode requires n_lay")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError("keep_ratio must lie in (0, 1]")


@dataclass
class StepStats:
    flops_total: int
    flops_backbone: int
    flops_router: int
    flops_head: int
    flops_cache: int
    kept_tokens: int
    executed_layers: list[int]
    reuse_requested: bool
    cache_hit: bool
    wall_time: float

    @classmethod
    def from_counter(cls, counter: FlopCounter, **kw) -> "StepStats":
        return cls(
            flops_total=counter.flops,
            flops_backbone=counter.component_flops("backbone"),
            flops_router=counter.component_flops("router"),
            flops_head=counter.component_flops("head"),
            flops_cache=counter.component_flops("cache"),
            **kw,
        )


@dataclass
class EpisodeResult:
    success: bool
    steps_used: int
    stats: list[StepStats]
    trace: list[dict] | None = None


@dataclass
class PolicyBundle:
    """The three learned modules plus their shared cache config."""

    backbone: Backbone
    router: Router
    head: ActionHead
    cache_cfg: CacheConfig = field(default_factory=CacheConfig)


def build_policy(seed: int, bb_cfg: BackboneConfig | None = None,
                 rt_cfg: RouterConfig | None = None,
                 hd_cfg: HeadConfig | None = None,
                 cache_cfg: CacheConfig | None = None) -> PolicyBundle:
    bb_cfg = bb_cfg or BackboneConfig()
    rt_cfg = rt_cfg or RouterConfig(d_v=bb_cfg.d_v, d_text=bb_cfg.d_model,
                                    num_layers=bb_cfg.num_layers)
    hd_cfg = hd_cfg or HeadConfig(d_z=bb_cfg.d_model)
    rng = Rng(seed)
    return PolicyBundle(
        backbone=Backbone(bb_cfg, rng),
        router=Router(rt_cfg, rng),
        head=ActionHead(hd_cfg, rng),
        cache_cfg=cache_cfg or CacheConfig(),
    )


class Engine:
    """Single-episode policy driver; one instance per episode, not shared."""

    def __init__(self, bundle: PolicyBundle, config: EngineConfig,
                 env_cfg: EnvConfig | None = None):
        self.bundle = bundle
        self.config = config
        self.env_cfg = env_cfg or EnvConfig()
        self.cache = CognitionCache(bundle.cache_cfg, bundle.backbone.cfg.d_v)
        self._geom_prior = (geom_center_prior(self.env_cfg.grid)
                            if bundle.router.cfg.use_geom_prior else None)
        # per-step routing detail for trace/token-map export
        self.last_mask: torch.Tensor | None = None
        self.last_p_topk: torch.Tensor | None = None
        self.last_p_lay: torch.Tensor | None = None
        self.last_p_cache: float | None = None

    # -- one control step ------------------------------------------------------

    def control_step(self, obs: torch.Tensor, instruction: Instruction,
                     a_prev: torch.Tensor, a_prev2: torch.Tensor,
                     step_rng: Rng) -> tuple[torch.Tensor, StepStats]:
        t0 = time.perf_counter()
        cfg = self.config
        bb = self.bundle.backbone
        router = self.bundle.router
        head = self.bundle.head
        n_v = bb.cfg.n_vision_tokens
        n_layers = bb.cfg.num_layers

        routing = cfg.mode != "dense"
        tokens_on = routing and cfg.use_tokens
        layers_on = routing and cfg.use_layers
        cache_on = routing and cfg.use_cache and self.bundle.cache_cfg.enabled

        counter = FlopCounter()
        vision = bb.tokenize_vision(obs, counter)
        text = bb.embed_text(instruction.token_ids)

        with torch.no_grad():
            if not routing:
                mask = torch.ones(n_v, dtype=torch.long)
                layer_gates = [1.0] * n_layers
                requested, hit = False, False
                z = self._forward(vision.features, text, mask, layer_gates, counter)
            else:
                dbin = quantize_norm(delta_proxy(a_prev, a_prev2),
                                     self.bundle.cache_cfg.delta_bin_width)
                cue = build_cache_cue(
                    dbin,
                    self.cache.stats.hit_rate if cache_on else 0.0,
                    self.cache.has_delta_bin(dbin) if cache_on else False,
                    router.cfg.n_delta_bins)
                inputs = ConditionInputs(
                    prev_action=a_prev,
                    vision_summary=pool_vision(vision.features),
                    text_summary=pool_text(text, instruction.mask),
                    step_embed=numerics.sinusoidal_encode(0, router.cfg.d_step_embed),
                    cache_cue=cue,
                )
                gates = router(inputs, vision.features, self._geom_prior, counter)

                mask = (topk_mask(gates.p_topk, cfg.keep_ratio) if tokens_on
                        else torch.ones(n_v, dtype=torch.long))
                if not layers_on:
                    layer_gates = [1.0] * n_layers
                elif cfg.n_lay is not None:
                    layer_gates = [float(g) for g in top_n_layers(gates.p_lay, cfg.n_lay)]
                else:
                    layer_gates = [float(g) for g in
                                   binarize_layers(gates.p_lay, cfg.layer_floor)]

                requested = reuse_requested(float(gates.p_cache), cfg.tau_cache, cache_on)
                hit, z = False, None
                if requested:
                    key = self.cache.make_key(a_prev, a_prev2,
                                              vision.features.mean(dim=0), counter)
                    hit, z = self.cache.get(key)
                if not hit:
                    z = self._forward(vision.features, text, mask, layer_gates, counter)
                    if requested:
                        self.cache.put(key, z)

            chunk = head.sample_chunk(z, step_rng, counter)

        self.last_mask = mask
        self.last_p_topk = gates.p_topk if routing else None
        self.last_p_lay = gates.p_lay if routing else None
        self.last_p_cache = float(gates.p_cache) if routing else None
        stats = StepStats.from_counter(
            counter,
            kept_tokens=int(mask.sum()),
            executed_layers=[int(g) for g in layer_gates],
            reuse_requested=requested,
            cache_hit=hit,
            wall_time=time.perf_counter() - t0,
        )
        return chunk, stats

    def _forward(self, features: torch.Tensor, text: torch.Tensor,
                 mask: torch.Tensor, layer_gates, counter: FlopCounter) -> torch.Tensor:
        """Compact, position-align and run the gated stack."""
        bb = self.bundle.backbone
        kept = compact(features, mask, fallback_index=0)
        positions = torch.cat([
            patch_positions(kept.patch_index),
            text_positions(kept.n_orig, text.shape[0]),
            torch.tensor([cognition_position(kept.n_orig, text.shape[0])], dtype=torch.long),
        ])
        return bb.forward_cognition(kept.features, text, positions, layer_gates, counter)


def run_episode(bundle: PolicyBundle, seed: int, config: EngineConfig,
                env_cfg: EnvConfig | None = None, task_template: str = "move_to_goal",
                record_trace: bool = False) -> EpisodeResult:
    """Reset, then alternate control steps and environment steps until done."""
    env_cfg = env_cfg or EnvConfig()
    engine = Engine(bundle, config, env_cfg)
    state, obs, instruction = reset(seed, task_template, cfg=env_cfg)
    d_a = env_cfg.d_a
    a_prev = torch.zeros(d_a, dtype=numerics.active_dtype())
    a_prev2 = torch.zeros(d_a, dtype=numerics.active_dtype())
    ep_rng = Rng(seed).derive("episode")

    stats: list[StepStats] = []
    trace: list[dict] | None = [] if record_trace else None
    success = False
    steps = 0
    for t in range(env_cfg.max_steps):
        chunk, st = engine.control_step(obs, instruction, a_prev, a_prev2,
                                        ep_rng.derive(f"step{t}"))
        action = chunk[0]
        state, success = step_env(state, action, env_cfg)
        obs = render(state, env_cfg)
        a_prev2, a_prev = a_prev, action
        stats.append(st)
        steps = t + 1
        if trace is not None:
            row = {
                "step": t,
                "action": [round(float(v), 6) for v in action],
                "agent_xy": [round(v, 6) for v in state.agent_xy],
                "kept_tokens": st.kept_tokens,
                "executed_layers": st.executed_layers,
                "reuse_requested": st.reuse_requested,
                "cache_hit": st.cache_hit,
                "flops_total": st.flops_total,
                "flops_backbone": st.flops_backbone,
                "kept_index": torch.nonzero(engine.last_mask).flatten().tolist(),
            }
            if engine.last_p_topk is not None:
                row["token_scores"] = [round(float(p), 5) for p in engine.last_p_topk]
                row["layer_probs"] = [round(float(p), 5) for p in engine.last_p_lay]
                row["p_cache"] = round(engine.last_p_cache, 5)
            trace.append(row)
        if success:
            break
    return EpisodeResult(success=success, steps_used=steps, stats=stats, trace=trace)


def flops_ratio(stats: list[StepStats], dense_stats: list[StepStats]) -> float:
    """Mean per-step FLOPs of a routed run relative to a dense reference."""
    routed = sum(s.flops_total for s in stats) / len(stats)
    dense = sum(s.flops_total for s in dense_stats) / len(dense_stats)
    return routed / dense


def worker_count(requested: int | None = None) -> int:
    """Episode-level parallelism, bounded by the AC2_THREADS env var."""
    if requested is not None:
        return max(1, requested)
    env = os.environ.get("AC2_THREADS")
    if env is not None:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def evaluate(bundle: PolicyBundle, config: EngineConfig, episodes: int,
             base_seed: int = 0, env_cfg: EnvConfig | None = None,
             task_template: str = "move_to_goal", workers: int | None = None,
             record_trace: bool = False) -> list[EpisodeResult]:
    """Run seeded episodes in a worker pool; results ordered by seed."""
    if episodes < 1:
        raise numerics.InputError("episodes must be >= 1")
    seeds = [base_seed + i for i in range(episodes)]

    def one(seed: int) -> EpisodeResult:
        return run_episode(bundle, seed, config, env_cfg, task_template, record_trace)

    n = worker_count(workers)
    if n == 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, seeds))
