"""Toy multimodal transformer producing the cognition vector for the action head.

The sequence layout is [patch tokens | text tokens | cognition token]; the
cognition token is a learned embedding whose final hidden state is the
policy's multimodal representation. Blocks are pre-norm attention + MLP and
each one can be skipped (binary gate), executed, or soft-interpolated through
the gated residual `h + alpha * (F(h) - h)`.

Rotary positions are supplied by the caller so that pruned sequences keep the
angles of the dense forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .compaction import cognition_position, patch_positions, text_positions
from .numerics import FlopCounter, InputError, Rng, ShapeError


@dataclass
class BackboneConfig:
    num_layers: int = 8
    d_model: int = 64
    num_heads: int = 4
    patch_grid: int = 8          # G; vision tokens = G*G
    obs_channels: int = 6
    vocab_size: int = 32
    max_text_len: int = 8
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    init_std: float = 0.125   # ~1/sqrt(d_model): right-sized for a 64-wide stack

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise numerics.ConfigError("d_model must be divisible by num_heads")
        if self.head_dim % 2 != 0:
            raise numerics.ConfigError("head dim must be even for rotary positions")
        if self.init_std <= 0:
            raise numerics.ConfigError("init_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def n_vision_tokens(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def d_v(self) -> int:
        return self.d_model


@dataclass
class VisionTokens:
    """Per-patch features in raster order: row i is patch i of the G x G grid."""

    features: torch.Tensor  # (N_v, d_v)

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]


def gated_residual(h: torch.Tensor, block_out: torch.Tensor, alpha) -> torch.Tensor:
    """Interpolate between skipping (alpha=0) and executing (alpha=1) a block."""
    if torch.is_tensor(alpha) and alpha.dim() == 1:
        alpha = alpha.view(-1, *([1] * (h.dim() - 1)))
    return h + alpha * (block_out - h)


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block over counted kernels."""

    def __init__(self, cfg: BackboneConfig, rng: Rng):
        super().__init__()
        d, hidden = cfg.d_model, cfg.mlp_ratio * cfg.d_model
        dtype = numerics.active_dtype()
        self.cfg = cfg
        self.ln1_w = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.w_q = nn.Parameter(rng.normal(d, d, std=cfg.init_std))
        self.w_k = nn.Parameter(rng.normal(d, d, std=cfg.init_std))
        self.w_v = nn.Parameter(rng.normal(d, d, std=cfg.init_std))
        self.w_o = nn.Parameter(rng.normal(d, d, std=cfg.init_std))
        self.b_q = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.b_k = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.b_v = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.b_o = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.ln2_w = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.w_up = nn.Parameter(rng.normal(hidden, d, std=cfg.init_std))
        self.b_up = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.w_down = nn.Parameter(rng.normal(d, hidden, std=cfg.init_std))
        self.b_down = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(self, h: torch.Tensor, positions: torch.Tensor,
                counter: FlopCounter | None = None) -> torch.Tensor:
        cfg = self.cfg
        batched = h.dim() == 3
        x = h if batched else h.unsqueeze(0)
        b, s, d = x.shape

        y = numerics.layer_norm(x, self.ln1_w, self.ln1_b)
        q = numerics.linear(y, self.w_q, self.b_q, counter)
        k = numerics.linear(y, self.w_k, self.b_k, counter)
        v = numerics.linear(y, self.w_v, self.b_v, counter)
        # (b, s, d) -> (b, heads, s, head_dim)
        q = q.view(b, s, cfg.num_heads, cfg.head_dim).transpose(1, 2)
        k = k.view(b, s, cfg.num_heads, cfg.head_dim).transpose(1, 2)
        v = v.view(b, s, cfg.num_heads, cfg.head_dim).transpose(1, 2)
        q = numerics.rope_apply(q, positions, cfg.rope_base)
        k = numerics.rope_apply(k, positions, cfg.rope_base)
        att = numerics.attention(q, k, v, counter)
        att = att.transpose(1, 2).reshape(b, s, d)
        x = x + numerics.linear(att, self.w_o, self.b_o, counter)

        y = numerics.layer_norm(x, self.ln2_w, self.ln2_b)
        y = F.gelu(numerics.linear(y, self.w_up, self.b_up, counter))
        x = x + numerics.linear(y, self.w_down, self.b_down, counter)
        return x if batched else x.squeeze(0)


class Backbone(nn.Module):
    """Vision tokenizer, text embedder and a stack of gated transformer blocks."""

    def __init__(self, cfg: BackboneConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        dtype = numerics.active_dtype()
        r = rng.derive("backbone")
        self.patch_w = nn.Parameter(r.derive("patch").normal(cfg.d_v, cfg.obs_channels, std=cfg.init_std))
        self.patch_b = nn.Parameter(torch.zeros(cfg.d_v, dtype=dtype))
        self.text_embed = nn.Parameter(r.derive("text").normal(cfg.vocab_size, cfg.d_model, std=cfg.init_std))
        self.text_pos = nn.Parameter(r.derive("textpos").normal(cfg.max_text_len, cfg.d_model, std=cfg.init_std))
        self.cognition_embed = nn.Parameter(r.derive("cog").normal(cfg.d_model, std=cfg.init_std))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg, r.derive(f"block{i}")) for i in range(cfg.num_layers))

    # -- embedding ---------------------------------------------------------

    def tokenize_vision(self, observation: torch.Tensor,
                        counter: FlopCounter | None = None) -> VisionTokens:
        """Project each grid cell to a d_v token, raster order.

        Charged to the router lane: the patch frontend runs on every control
        step (the routing summaries need it) even when the transformer stack
        itself is skipped on a cache hit.
        """
        cfg = self.cfg
        if observation.shape != (cfg.patch_grid, cfg.patch_grid, cfg.obs_channels):
            raise ShapeError(
                f"observation shape {tuple(observation.shape)} != "
                f"({cfg.patch_grid}, {cfg.patch_grid}, {cfg.obs_channels})")
        flat = observation.reshape(cfg.n_vision_tokens, cfg.obs_channels)
        flat = flat.to(self.patch_w.dtype)
        feats = numerics.linear(flat, self.patch_w, self.patch_b, counter, component="router")
        return VisionTokens(features=feats)

    def embed_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Embedding lookup plus learned positional offset (lookups cost no MACs)."""
        ids = token_ids.to(torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InputError(f"token id out of vocab (size {self.cfg.vocab_size})")
        if ids.shape[0] > self.cfg.max_text_len:
            raise ShapeError(f"text length {ids.shape[0]} exceeds {self.cfg.max_text_len}")
        return self.text_embed[ids] + self.text_pos[: ids.shape[0]]

    def assemble(self, vision_features: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """[patches | text | cognition token] along the sequence dim."""
        if vision_features.dim() == 3:
            b = vision_features.shape[0]
            text = text_emb if text_emb.dim() == 3 else text_emb.unsqueeze(0).expand(b, -1, -1)
            cog = self.cognition_embed.view(1, 1, -1).expand(b, 1, -1)
            return torch.cat([vision_features, text, cog], dim=1)
        return torch.cat([vision_features, text_emb, self.cognition_embed.unsqueeze(0)], dim=0)

    # -- gated execution ----------------------------------------------------

    def gated_block(self, h: torch.Tensor, alpha, layer_index: int,
                    positions: torch.Tensor, counter: FlopCounter | None = None) -> torch.Tensor:
        """Gated residual update for one block.

        A binary 0 gate skips the block entirely: it is not evaluated and no
        MACs are charged. A binary 1 executes it exactly. Soft (tensor)
        alphas always evaluate the block and interpolate.
        """
        if isinstance(alpha, (int, float)):
            if alpha == 0.0:
                return h
            out = self.blocks[layer_index](h, positions, counter)
            if alpha == 1.0:
                return out
            return gated_residual(h, out, alpha)
        out = self.blocks[layer_index](h, positions, counter)
        return gated_residual(h, out, alpha)

    def forward_cognition(self, vision_features: torch.Tensor, text_emb: torch.Tensor,
                          positions: torch.Tensor, layer_gates,
                          counter: FlopCounter | None = None,
                          soft: bool = False) -> torch.Tensor:
        """Run the gated stack over an assembled sequence; return the cognition state.

        `layer_gates` is a length-L sequence of binary gates (hard mode) or a
        (L,) / (B, L) tensor of soft execution probabilities. Only executed
        blocks charge MACs, and cost scales with the actual sequence length.
        """
        h = self.assemble(vision_features, text_emb)
        if positions.shape[0] != h.shape[-2]:
            raise ShapeError(
                f"positions cover {positions.shape[0]} slots, sequence has {h.shape[-2]}")
        if soft:
            for i in range(self.cfg.num_layers):
                alpha = layer_gates[..., i] if torch.is_tensor(layer_gates) else layer_gates[i]
                h = self.gated_block(h, alpha, i, positions, counter)
        else:
            for i in range(self.cfg.num_layers):
                g = float(layer_gates[i])
                if g == 0.0:
                    continue
                h = self.blocks[i](h, positions, counter)
        return h[..., -1, :]

    def dense_forward(self, observation: torch.Tensor, token_ids: torch.Tensor,
                      counter: FlopCounter | None = None) -> torch.Tensor:
        """Reference dense pipeline: no gating code anywhere in the path."""
        vision = self.tokenize_vision(observation, counter)
        text = self.embed_text(token_ids)
        h = self.assemble(vision.features, text)
        positions = self.dense_positions(text.shape[0])
        for block in self.blocks:
            h = block(h, positions, counter)
        return h[-1, :]

    def batch_cognition(self, obs_batch: torch.Tensor, ids_batch: torch.Tensor,
                        counter: FlopCounter | None = None) -> torch.Tensor:
        """Dense cognition vectors for a batch of (observation, token-id) pairs."""
        cfg = self.cfg
        b = obs_batch.shape[0]
        if obs_batch.shape[1:] != (cfg.patch_grid, cfg.patch_grid, cfg.obs_channels):
            raise ShapeError(f"bad batched observation shape {tuple(obs_batch.shape)}")
        flat = obs_batch.reshape(b, cfg.n_vision_tokens, cfg.obs_channels)
        feats = numerics.linear(flat.to(self.patch_w.dtype), self.patch_w, self.patch_b,
                                counter, component="router")
        text = self.text_embed[ids_batch.to(torch.long)] + self.text_pos[: ids_batch.shape[1]]
        h = self.assemble(feats, text)
        positions = self.dense_positions(ids_batch.shape[1])
        for block in self.blocks:
            h = block(h, positions, counter)
        return h[:, -1, :]

    def dense_positions(self, text_len: int | None = None) -> torch.Tensor:
        """Positions for the unpruned sequence (identity patch map)."""
        n_v = self.cfg.n_vision_tokens
        t = self.cfg.max_text_len if text_len is None else text_len
        return torch.cat([
            patch_positions(torch.arange(n_v)),
            text_positions(n_v, t),
            torch.tensor([cognition_position(n_v, t)], dtype=torch.long),
        ])

    def gather_scatter_subbatch(self, h: torch.Tensor, gates: torch.Tensor, layer_index: int,
                                positions: torch.Tensor,
                                counter: FlopCounter | None = None) -> torch.Tensor:
        """Run one block only for samples whose gate is 1, scattering results back.

        Active samples are packed into a sub-batch, executed once, and written
        back; inactive samples pass through untouched. Equivalent to applying
        the binary gated block per sample.
        """
        if h.dim() != 3:
            raise ShapeError("gather_scatter_subbatch expects a batched (B, S, D) input")
        active = torch.nonzero(gates.to(torch.bool), as_tuple=False).flatten()
        if active.numel() == 0:
            return h
        out = h.clone()
        packed = h[active]
        out[active] = self.blocks[layer_index](packed, positions, counter)
        return out
