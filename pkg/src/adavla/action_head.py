"""Conditional diffusion head: noise-prediction MLP over action chunks.

Given the cognition vector z the head denoises an H x d_a action chunk in K
ancestral steps. The MLP consumes [z | flattened noisy chunk | step encoding]
and predicts the injected noise; its final layer starts at zero so an
untrained head predicts zero noise.

The default beta range is much hotter than the usual image-diffusion
schedule: with only 8 denoise steps the cumulative noising must actually
reach (near) a standard normal, otherwise sampling would start from a
distribution the model never saw. The range below drives the terminal
signal-to-noise close to zero at K=8.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .numerics import ConfigError, FlopCounter, InputError, Rng


@dataclass
class HeadConfig:
    horizon: int = 8          # H actions per chunk
    d_a: int = 3              # (dx, dy, gripper)
    d_z: int = 64
    denoise_steps: int = 8    # K
    hidden: int = 128
    step_embed_dim: int = 16
    beta_range: tuple[float, float] = (0.08, 0.6)
    clip: float = 1.0

    def __post_init__(self):
        if self.horizon < 1 or self.denoise_steps < 1:
            raise ConfigError("horizon and denoise_steps must be >= 1")
        lo, hi = self.beta_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError("beta_range must satisfy 0 < lo <= hi < 1")

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.d_a


class ActionHead(nn.Module):
    """epsilon-prediction MLP plus the fixed linear noise schedule."""

    def __init__(self, cfg: HeadConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        dtype = numerics.active_dtype()
        r = rng.derive("head")
        d_in = cfg.d_z + cfg.chunk_dim + cfg.step_embed_dim
        self.w1 = nn.Parameter(r.derive("w1").normal(cfg.hidden, d_in, std=0.02))
        self.b1 = nn.Parameter(torch.zeros(cfg.hidden, dtype=dtype))
        self.w2 = nn.Parameter(r.derive("w2").normal(cfg.hidden, cfg.hidden, std=0.02))
        self.b2 = nn.Parameter(torch.zeros(cfg.hidden, dtype=dtype))
        self.w_out = nn.Parameter(torch.zeros(cfg.chunk_dim, cfg.hidden, dtype=dtype))
        self.b_out = nn.Parameter(torch.zeros(cfg.chunk_dim, dtype=dtype))

        betas = torch.linspace(cfg.beta_range[0], cfg.beta_range[1],
                               cfg.denoise_steps, dtype=dtype)
        alphas = 1.0 - betas
        alpha_bar = torch.cumprod(alphas, dim=0)
        steps = torch.stack([numerics.sinusoidal_encode(k, cfg.step_embed_dim)
                             for k in range(cfg.denoise_steps)])
        self.register_buffer("betas", betas)
        self.register_buffer("alphas", alphas)
        self.register_buffer("alpha_bar", alpha_bar)
        self.register_buffer("step_table", steps.to(dtype))

    # -- noise prediction ----------------------------------------------------

    def predict_eps(self, z: torch.Tensor, noisy_chunk: torch.Tensor, k,
                    counter: FlopCounter | None = None) -> torch.Tensor:
        """Predict the noise inside `noisy_chunk` at denoise step k.

        Accepts a single (z, chunk, int k) or a batch with a (B,) step tensor.
        """
        cfg = self.cfg
        batched = z.dim() == 2
        if isinstance(k, int):
            if not 0 <= k < cfg.denoise_steps:
                raise InputError(f"denoise step {k} outside [0, {cfg.denoise_steps})")
            step = self.step_table[k]
            if batched:
                step = step.unsqueeze(0).expand(z.shape[0], -1)
        else:
            if int(k.min()) < 0 or int(k.max()) >= cfg.denoise_steps:
                raise InputError("denoise step index outside schedule")
            step = self.step_table[k.to(torch.long)]
        flat = noisy_chunk.reshape(*noisy_chunk.shape[:-2], cfg.chunk_dim)
        x = torch.cat([z, flat, step], dim=-1)
        h = F.gelu(numerics.linear(x, self.w1, self.b1, counter, "head"))
        h = F.gelu(numerics.linear(h, self.w2, self.b2, counter, "head"))
        out = numerics.linear(h, self.w_out, self.b_out, counter, "head")
        return out.reshape(*noisy_chunk.shape[:-2], cfg.horizon, cfg.d_a)

    # -- sampling --------------------------------------------------------------

    def sample_chunk(self, z: torch.Tensor, rng: Rng,
                     counter: FlopCounter | None = None) -> torch.Tensor:
        """Ancestral denoising from seeded Gaussian noise; deterministic per (z, rng)."""
        cfg = self.cfg
        x = rng.normal(cfg.horizon, cfg.d_a)
        for k in range(cfg.denoise_steps - 1, -1, -1):
            eps = self.predict_eps(z, x, k, counter)
            alpha = self.alphas[k]
            a_bar = self.alpha_bar[k]
            x = (x - (1.0 - alpha) / torch.sqrt(1.0 - a_bar) * eps) / torch.sqrt(alpha)
            if k > 0:
                a_bar_prev = self.alpha_bar[k - 1]
                var = self.betas[k] * (1.0 - a_bar_prev) / (1.0 - a_bar)
                x = x + torch.sqrt(var) * rng.normal(cfg.horizon, cfg.d_a)
        return torch.clamp(x, -cfg.clip, cfg.clip)

    # -- training objective ------------------------------------------------------

    def train_loss(self, z: torch.Tensor, clean_chunk: torch.Tensor, rng: Rng) -> torch.Tensor:
        """Noise-matching objective: squared L2 over the chunk, mean over the batch.

        Denoise steps are sampled uniformly: the sampling chain consumes every
        step index, and skewing the step distribution starves the high-noise
        steps that anchor the start of the chain.
        """
        cfg = self.cfg
        batched = clean_chunk.dim() == 3
        b = clean_chunk.shape[0] if batched else 1
        chunks = clean_chunk if batched else clean_chunk.unsqueeze(0)
        zb = z if batched else z.unsqueeze(0)
        k = rng.randint(0, cfg.denoise_steps, b)
        eps = rng.normal(b, cfg.horizon, cfg.d_a)
        a_bar = self.alpha_bar[k].view(b, 1, 1)
        noisy = torch.sqrt(a_bar) * chunks + torch.sqrt(1.0 - a_bar) * eps
        pred = self.predict_eps(zb, noisy, k)
        return ((pred - eps) ** 2).sum(dim=(-2, -1)).mean()
