"""Routing head: condition vector and the three gate families.

The router looks at cheap summaries of the current step (previous action,
pooled vision, pooled text, denoise-step encoding, cache-state cue) and emits
a gate bundle: a scalar reuse probability, per-patch keep scores and per-layer
execution probabilities. Summaries are detached before entering the router so
no gradient flows back into the backbone through this pathway.

Discretizers (`topk_mask`, `binarize_layers`, `top_n_layers`) turn soft scores
into the hard decisions used at inference; training consumes the soft values
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import numerics
from .numerics import ConfigError, FlopCounter, InputError, Rng


@dataclass
class RouterConfig:
    d_router: int = 64
    d_match: int = 32
    d_step_embed: int = 16
    n_delta_bins: int = 8
    d_a: int = 3
    d_v: int = 64
    d_text: int = 64
    num_layers: int = 8
    t_cache: float = 1.0
    layer_bias_prob: float = 0.95
    use_geom_prior: bool = False

    def __post_init__(self):
        if self.t_cache <= 0:
            raise ConfigError("cache gate temperature must be positive")
        if not 0.0 < self.layer_bias_prob < 1.0:
            raise ConfigError("layer_bias_prob must lie in (0, 1)")
        if self.d_step_embed % 2 != 0:
            raise ConfigError("d_step_embed must be even")

    @property
    def d_cue(self) -> int:
        # one-hot delta bin + hit-rate scalar + availability bit
        return self.n_delta_bins + 2


@dataclass
class ConditionInputs:
    """Detachable summaries the condition vector is built from."""

    prev_action: torch.Tensor    # (d_a,) or (B, d_a); zeros at t=0
    vision_summary: torch.Tensor  # (d_v,) or (B, d_v)
    text_summary: torch.Tensor   # (d_text,) or (B, d_text)
    step_embed: torch.Tensor     # (d_step_embed,) or (B, d_step_embed)
    cache_cue: torch.Tensor      # (d_cue,) or (B, d_cue)


@dataclass
class GateBundle:
    p_cache: torch.Tensor  # scalar (or (B,))
    p_topk: torch.Tensor   # (N_v,) (or (B, N_v))
    p_lay: torch.Tensor    # (L,) (or (B, L))


# Gate probabilities are strictly inside (0, 1) mathematically, but float32
# sigmoid rounds to exactly 0.0 or 1.0 once |logit| exceeds ~17. Clamping
# restores strictness so threshold rules like "request iff p >= tau" behave
# at tau = 1.0 even for a confidently trained head.
_GATE_EPS = 2.0 ** -20


def _strict_unit(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(_GATE_EPS, 1.0 - _GATE_EPS)


def pool_vision(features: torch.Tensor) -> torch.Tensor:
    """Mean-max summary: the average of column-wise mean and max pools."""
    if features.shape[-2] == 0:
        raise InputError("cannot pool an empty token set")
    return 0.5 * (features.mean(dim=-2) + features.max(dim=-2).values)


def pool_text(embeddings: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Average of the last valid token embedding and the mean embedding.

    With a mask, the mean runs over valid rows only and the "last" row is the
    highest valid index. Without one (or with nothing marked valid) both
    terms fall back to the plain mean over all rows.
    """
    if embeddings.shape[0] == 0:
        raise InputError("cannot pool an empty text sequence")
    if mask is not None:
        valid = torch.nonzero(mask.to(torch.bool), as_tuple=False).flatten()
        if valid.numel() > 0:
            last = embeddings[valid[-1]]
            mean = embeddings[valid].mean(dim=0)
            return 0.5 * (last + mean)
    mean = embeddings.mean(dim=0)
    return 0.5 * (mean + mean)


def build_cache_cue(delta_bin: int, hit_rate: float, available: bool,
                    n_bins: int) -> torch.Tensor:
    """Encode cache state: one-hot quantized action delta, hit rate, availability."""
    cue = torch.zeros(n_bins + 2, dtype=numerics.active_dtype())
    cue[min(max(delta_bin, 0), n_bins - 1)] = 1.0
    cue[n_bins] = float(hit_rate)
    cue[n_bins + 1] = 1.0 if available else 0.0
    return cue


def geom_center_prior(patch_grid: int) -> torch.Tensor:
    """Optional token bias: negative normalized distance from the grid center."""
    coords = torch.arange(patch_grid, dtype=numerics.active_dtype())
    center = (patch_grid - 1) / 2.0
    dy = (coords.view(-1, 1) - center).expand(patch_grid, patch_grid)
    dx = (coords.view(1, -1) - center).expand(patch_grid, patch_grid)
    dist = torch.sqrt(dx * dx + dy * dy).reshape(-1)
    return -(dist / dist.max())


class Router(nn.Module):
    """Projections, fuse MLP and the cache/token/layer gate heads."""

    def __init__(self, cfg: RouterConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        dtype = numerics.active_dtype()
        r = rng.derive("router")
        d = cfg.d_router

        def proj(name: str, d_in: int) -> nn.Parameter:
            return nn.Parameter(r.derive(name).normal(d, d_in, std=0.02))

        self.psi_a = proj("psi_a", cfg.d_a)
        self.psi_v = proj("psi_v", cfg.d_v)
        self.psi_u = proj("psi_u", cfg.d_text)
        self.psi_tau = proj("psi_tau", cfg.d_step_embed)
        self.psi_c = proj("psi_c", cfg.d_cue)
        self.fuse_w1 = nn.Parameter(r.derive("fuse1").normal(d, 5 * d, std=0.02))
        self.fuse_b1 = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.fuse_w2 = nn.Parameter(r.derive("fuse2").normal(d, d, std=0.02))
        self.fuse_b2 = nn.Parameter(torch.zeros(d, dtype=dtype))

        self.cache_w = nn.Parameter(r.derive("cache_w").normal(1, d, std=0.02))
        self.cache_b = nn.Parameter(torch.zeros(1, dtype=dtype))

        self.token_w_v = nn.Parameter(r.derive("tok_v").normal(cfg.d_match, cfg.d_v, std=0.02))
        self.token_w_c = nn.Parameter(r.derive("tok_c").normal(cfg.d_match, d, std=0.02))
        self.token_gamma = nn.Parameter(torch.zeros((), dtype=dtype))

        bias0 = math.log(cfg.layer_bias_prob / (1.0 - cfg.layer_bias_prob))
        self.layer_w = nn.Parameter(r.derive("lay_w").normal(cfg.num_layers, d, std=0.02))
        self.layer_b = nn.Parameter(torch.full((cfg.num_layers,), bias0, dtype=dtype))

    # -- condition -----------------------------------------------------------

    def build_condition(self, inputs: ConditionInputs,
                        counter: FlopCounter | None = None) -> torch.Tensor:
        """Fuse the five projected summaries. Inputs are detached here."""
        expected = {
            "prev_action": (inputs.prev_action, self.cfg.d_a),
            "vision_summary": (inputs.vision_summary, self.cfg.d_v),
            "text_summary": (inputs.text_summary, self.cfg.d_text),
            "step_embed": (inputs.step_embed, self.cfg.d_step_embed),
            "cache_cue": (inputs.cache_cue, self.cfg.d_cue),
        }
        for name, (value, dim) in expected.items():
            if value.shape[-1] != dim:
                raise ConfigError(f"{name} has dim {value.shape[-1]}, expected {dim}")
        parts = [
            numerics.linear(inputs.prev_action.detach(), self.psi_a, None, counter, "router"),
            numerics.linear(inputs.vision_summary.detach(), self.psi_v, None, counter, "router"),
            numerics.linear(inputs.text_summary.detach(), self.psi_u, None, counter, "router"),
            numerics.linear(inputs.step_embed.detach(), self.psi_tau, None, counter, "router"),
            numerics.linear(inputs.cache_cue.detach(), self.psi_c, None, counter, "router"),
        ]
        fused = torch.cat(parts, dim=-1)
        h = torch.tanh(numerics.linear(fused, self.fuse_w1, self.fuse_b1, counter, "router"))
        return numerics.linear(h, self.fuse_w2, self.fuse_b2, counter, "router")

    # -- gate heads -----------------------------------------------------------

    def gate_cache(self, c: torch.Tensor, counter: FlopCounter | None = None) -> torch.Tensor:
        logit = numerics.linear(c, self.cache_w, self.cache_b, counter, "router")
        return _strict_unit(torch.sigmoid(logit.squeeze(-1) / self.cfg.t_cache))

    def gate_tokens(self, vision_features: torch.Tensor, c: torch.Tensor,
                    geom_prior: torch.Tensor | None = None,
                    counter: FlopCounter | None = None) -> torch.Tensor:
        """Per-token keep score via matching token and condition projections."""
        tv = numerics.linear(vision_features, self.token_w_v, None, counter, "router")
        tc = numerics.linear(c, self.token_w_c, None, counter, "router")
        logits = numerics.matmul(tv, tc.unsqueeze(-1), counter, "router").squeeze(-1)
        if geom_prior is not None:
            if geom_prior.shape != logits.shape:
                raise ConfigError(
                    f"geometric prior shape {tuple(geom_prior.shape)} does not match "
                    f"token scores {tuple(logits.shape)}")
            logits = logits + self.token_gamma * geom_prior
        return _strict_unit(torch.sigmoid(logits))

    def gate_layers(self, c: torch.Tensor, counter: FlopCounter | None = None) -> torch.Tensor:
        logits = numerics.linear(c, self.layer_w, self.layer_b, counter, "router")
        return _strict_unit(torch.sigmoid(logits))

    def forward(self, inputs: ConditionInputs, vision_features: torch.Tensor,
                geom_prior: torch.Tensor | None = None,
                counter: FlopCounter | None = None) -> GateBundle:
        c = self.build_condition(inputs, counter)
        return GateBundle(
            p_cache=self.gate_cache(c, counter),
            p_topk=self.gate_tokens(vision_features.detach(), c, geom_prior, counter),
            p_lay=self.gate_layers(c, counter),
        )


# -- discretizers -------------------------------------------------------------

def topk_mask(p_topk: torch.Tensor, keep_ratio: float) -> torch.Tensor:
    """Keep the k = max(1, round(r * N)) highest-scoring tokens; ties favor lower index."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    if p_topk.dim() != 1:
        raise numerics.ShapeError("topk_mask expects per-step 1-D scores")
    n = p_topk.shape[-1]
    k = max(1, int(math.floor(keep_ratio * n + 0.5)))
    order = torch.argsort(-p_topk, dim=-1, stable=True)
    mask = torch.zeros(n, dtype=torch.long)
    mask[order[:k]] = 1
    return mask


def binarize_layers(p_lay: torch.Tensor, min_layers: int = 0) -> torch.Tensor:
    """Threshold layer gates at 0.5, promoting top layers up to a floor count."""
    if p_lay.dim() != 1:
        raise numerics.ShapeError("binarize_layers expects per-step 1-D probabilities")
    n = p_lay.shape[-1]
    if not 0 <= min_layers <= n:
        raise ConfigError(f"min_layers must lie in [0, {n}], got {min_layers}")
    gates = (p_lay >= 0.5).to(torch.long)
    deficit = min_layers - int(gates.sum())
    if deficit > 0:
        order = torch.argsort(-p_lay, stable=True)
        for idx in order.tolist():
            if gates[idx] == 0:
                gates[idx] = 1
                deficit -= 1
                if deficit == 0:
                    break
    return gates


def top_n_layers(p_lay: torch.Tensor, n_lay: int) -> torch.Tensor:
    """Fixed-count layer selection: the n_lay highest-probability layers."""
    if p_lay.dim() != 1:
        raise numerics.ShapeError("top_n_layers expects per-step 1-D probabilities")
    n = p_lay.shape[-1]
    if not 1 <= n_lay <= n:
        raise ConfigError(f"n_lay must lie in [1, {n}], got {n_lay}")
    order = torch.argsort(-p_lay, stable=True)
    gates = torch.zeros(n, dtype=torch.long)
    gates[order[:n_lay]] = 1
    return gates
