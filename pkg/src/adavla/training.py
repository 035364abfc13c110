"""Two-phase training: dense behavior cloning, then router self-distillation.

Phase 1 fits backbone and action head to scripted-expert chunks. Collection
injects mild action noise (labels stay clean) so the cloned policy sees
slightly off-distribution states and learns to recover.

Phase 2 freezes backbone and head and trains only the router. The student
runs the soft execution path (token scaling plus soft layer interpolation)
against the dense teacher, with budget regularization and temporal gate
smoothing. The cognition cache is never part of the training graph; the
reuse gate is supervised by teacher-feature similarity labels instead.

Teacher-side quantities (patch features, pooled summaries, cognition
vectors, sampled chunks) depend only on frozen weights, so rollout
collection precomputes them once and training steps touch the router alone
plus one soft student forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import numerics
from .cache import delta_proxy, quantize_norm
from .compaction import soft_scale
from .engine import PolicyBundle
from .envsim import EnvConfig, render, reset, scripted_expert, step_env
from .numerics import InputError, Rng
from .router import ConditionInputs, GateBundle, pool_text, pool_vision


@dataclass
class BCConfig:
    episodes: int = 2500
    steps: int = 6000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    noise_prob: float = 0.3   # chance a collection step executes a perturbed action
    noise_std: float = 0.3
    flip_prob: float = 0.03   # chance the gripper command is inverted when perturbed
    ema_decay: float = 0.0    # weight average returned at the end; 0 disables
    scene_count: int | None = 250   # distinct scenes; extra episodes revisit them
                                    # with fresh noise (None: one scene per episode)
    warmup_steps: int = 300   # linear lr ramp before the cosine decay
    grad_clip: float = 5.0    # max global gradient norm; 0 disables


@dataclass
class DistillConfig:
    steps: int = 3000
    batch_size: int = 48
    lr: float = 1e-3
    weight_decay: float = 0.0
    lambda_eps: float = 1.0
    lambda_z: float = 0.5
    feature_distance: str = "sq_l2"   # or "cosine"
    r_target: float = 0.4
    l_target: float = 0.875
    lambda_budget: float = 1.0
    lambda_temp: float = 0.1
    kappa: float = 0.98
    teacher_episodes: int = 60
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_eps", "lambda_z", "lambda_budget", "lambda_temp"):
            if getattr(self, name) < 0:
                raise numerics.ConfigError(f"{name} must be >= 0")
        if not 0.0 < self.r_target <= 1.0 or not 0.0 < self.l_target <= 1.0:
            raise numerics.ConfigError("budget targets must lie in (0, 1]")
        if self.feature_distance not in ("sq_l2", "cosine"):
            raise numerics.ConfigError(f"unknown feature distance {self.feature_distance!r}")


# ---------------------------------------------------------------------------
# Phase 1: behavior cloning
# ---------------------------------------------------------------------------


@dataclass
class BCDataset:
    obs: torch.Tensor        # (N, G, G, C)
    token_ids: torch.Tensor  # (N, T)
    text_mask: torch.Tensor  # (N, T)
    chunks: torch.Tensor     # (N, H, d_a)

    def __len__(self) -> int:
        return self.obs.shape[0]


def collect_expert_dataset(cfg: BCConfig, env_cfg: EnvConfig | None = None,
                           horizon: int = 8,
                           task_template: str = "move_to_goal") -> BCDataset:
    """Roll the scripted expert closed-loop, storing (obs, instruction, chunk)."""
    env_cfg = env_cfg or EnvConfig()
    rng = Rng(cfg.seed).derive("collect")
    obs_rows, id_rows, mask_rows, chunk_rows = [], [], [], []

    for ep in range(cfg.episodes):
        scene = ep % cfg.scene_count if cfg.scene_count else ep
        state, obs, instruction = reset(cfg.seed + scene, task_template, cfg=env_cfg)
        noise = rng.derive(f"ep{ep}")
        for _ in range(env_cfg.max_steps):
            chunk = scripted_expert(state, instruction, env_cfg, horizon)
            obs_rows.append(obs)
            id_rows.append(instruction.token_ids)
            mask_rows.append(instruction.mask)
            chunk_rows.append(chunk)

            action = chunk[0].clone()
            if float(noise.uniform(1)) < cfg.noise_prob:
                action[:2] = (action[:2] + noise.normal(2, std=cfg.noise_std)).clamp(-1, 1)
                if float(noise.uniform(1)) < cfg.flip_prob:
                    action[2] = -action[2]
            state, success = step_env(state, action, env_cfg)
            obs = render(state, env_cfg)
            if success:
                break

    if not obs_rows:
        raise InputError("expert collection produced no samples")
    return BCDataset(
        obs=torch.stack(obs_rows),
        token_ids=torch.stack(id_rows),
        text_mask=torch.stack(mask_rows),
        chunks=torch.stack(chunk_rows),
    )


def bc_pretrain(bundle: PolicyBundle, dataset: BCDataset, cfg: BCConfig) -> list[float]:
    """Fit backbone + head to expert chunks; returns the per-step loss log."""
    if len(dataset) == 0:
        raise InputError("behavior cloning needs a nonempty dataset")
    params = list(bundle.backbone.parameters()) + list(bundle.head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def lr_at(step: int) -> float:
        if step < cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        span = max(1, cfg.steps - cfg.warmup_steps)
        progress = (step - cfg.warmup_steps) / span
        floor = 0.05 * cfg.lr
        return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    rng = Rng(cfg.seed).derive("bc")
    batch_rng = rng.derive("batches")
    noise_rng = rng.derive("noise")
    n = len(dataset)

    # Polyak average of the weights, tracked alongside the live parameters
    # and swapped in at the end: sampling quality is what the policy is
    # judged on, and averaging filters the batch noise of the final steps.
    # The decay warms up so short runs still return trained weights.
    ema = [p.detach().clone() for p in params] if cfg.ema_decay > 0 else None

    losses: list[float] = []
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(step)
        idx = batch_rng.randint(0, n, min(cfg.batch_size, n))
        z = bundle.backbone.batch_cognition(dataset.obs[idx], dataset.token_ids[idx])
        loss = bundle.head.train_loss(z, dataset.chunks[idx], noise_rng.derive(f"s{step}"))
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        if ema is not None:
            decay = min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
            with torch.no_grad():
                for avg, live in zip(ema, params):
                    avg.mul_(decay).add_(live.detach(), alpha=1.0 - decay)
        losses.append(float(loss.detach()))
    if ema is not None:
        with torch.no_grad():
            for avg, live in zip(ema, params):
                live.copy_(avg)
    return losses


# ---------------------------------------------------------------------------
# Phase 2: router self-distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillDataset:
    """Per-timestep teacher quantities, flattened over episodes.

    `prev_index[i]` points at the previous timestep of the same episode, or
    at `i` itself on episode starts — gathering with it then makes every
    "previous minus current" difference vanish exactly where no predecessor
    exists.
    """

    vision: torch.Tensor       # (M, N_v, d_v) frozen patch features
    text_emb: torch.Tensor     # (M, T, d)
    s_v: torch.Tensor          # (M, d_v)
    s_u: torch.Tensor          # (M, d)
    a_prev: torch.Tensor       # (M, d_a)
    delta_bin: torch.Tensor    # (M,) long
    teacher_z: torch.Tensor    # (M, d)
    teacher_chunk: torch.Tensor  # (M, H, d_a)
    reuse_label: torch.Tensor  # (M,) float, 0 at episode starts
    prev_index: torch.Tensor   # (M,) long

    def __len__(self) -> int:
        return self.vision.shape[0]


def make_reuse_label(teacher_z_t: torch.Tensor, teacher_z_prev: torch.Tensor | None,
                     kappa: float) -> int:
    """1 when consecutive teacher features are similar enough to reuse safely."""
    if teacher_z_prev is None:
        return 0
    cos = F.cosine_similarity(teacher_z_t.flatten(), teacher_z_prev.flatten(), dim=0)
    return int(bool(cos >= kappa))


def collect_teacher_rollouts(bundle: PolicyBundle, cfg: DistillConfig,
                             env_cfg: EnvConfig | None = None,
                             task_template: str = "move_to_goal") -> DistillDataset:
    """Run the dense policy closed-loop and precompute all frozen-side tensors."""
    env_cfg = env_cfg or EnvConfig()
    bb, head = bundle.backbone, bundle.head
    width = bundle.cache_cfg.delta_bin_width
    d_a = env_cfg.d_a

    cols: dict[str, list] = {k: [] for k in (
        "vision", "text_emb", "s_v", "s_u", "a_prev", "delta_bin",
        "teacher_z", "teacher_chunk", "reuse_label", "prev_index")}

    with torch.no_grad():
        for ep in range(cfg.teacher_episodes):
            seed = cfg.seed + 10_000 + ep
            state, obs, instruction = reset(seed, task_template, cfg=env_cfg)
            ep_rng = Rng(seed).derive("teacher")
            a_prev = torch.zeros(d_a, dtype=numerics.active_dtype())
            a_prev2 = torch.zeros(d_a, dtype=numerics.active_dtype())
            z_prev = None
            for t in range(env_cfg.max_steps):
                vision = bb.tokenize_vision(obs)
                text = bb.embed_text(instruction.token_ids)
                z = bb.dense_forward(obs, instruction.token_ids)
                chunk = head.sample_chunk(z, ep_rng.derive(f"step{t}"))

                base = len(cols["vision"])
                cols["vision"].append(vision.features)
                cols["text_emb"].append(text)
                cols["s_v"].append(pool_vision(vision.features))
                cols["s_u"].append(pool_text(text, instruction.mask))
                cols["a_prev"].append(a_prev.clone())
                cols["delta_bin"].append(quantize_norm(delta_proxy(a_prev, a_prev2), width))
                cols["teacher_z"].append(z)
                cols["teacher_chunk"].append(chunk)
                cols["reuse_label"].append(make_reuse_label(z, z_prev, cfg.kappa))
                cols["prev_index"].append(base - 1 if t > 0 else base)

                action = chunk[0]
                state, success = step_env(state, action, env_cfg)
                obs = render(state, env_cfg)
                a_prev2, a_prev = a_prev, action
                z_prev = z
                if success:
                    break

    return DistillDataset(
        vision=torch.stack(cols["vision"]),
        text_emb=torch.stack(cols["text_emb"]),
        s_v=torch.stack(cols["s_v"]),
        s_u=torch.stack(cols["s_u"]),
        a_prev=torch.stack(cols["a_prev"]),
        delta_bin=torch.tensor(cols["delta_bin"], dtype=torch.long),
        teacher_z=torch.stack(cols["teacher_z"]),
        teacher_chunk=torch.stack(cols["teacher_chunk"]),
        reuse_label=torch.tensor(cols["reuse_label"], dtype=numerics.active_dtype()),
        prev_index=torch.tensor(cols["prev_index"], dtype=torch.long),
    )


# -- loss terms ----------------------------------------------------------------


def distill_loss(teacher_eps: torch.Tensor, student_eps: torch.Tensor,
                 teacher_z: torch.Tensor, student_z: torch.Tensor,
                 cfg: DistillConfig) -> torch.Tensor:
    """Action-and-feature matching: lambda_eps * ||d_eps||^2 + lambda_z * D(z, z)."""
    if teacher_eps.shape != student_eps.shape or teacher_z.shape != student_z.shape:
        raise numerics.ShapeError("teacher/student shapes disagree")
    eps_term = ((student_eps - teacher_eps) ** 2).flatten(1).sum(dim=1).mean() \
        if teacher_eps.dim() > 2 else ((student_eps - teacher_eps) ** 2).sum()
    if cfg.feature_distance == "sq_l2":
        z_term = ((student_z - teacher_z) ** 2).sum(dim=-1).mean()
    else:
        z_term = (1.0 - F.cosine_similarity(student_z, teacher_z, dim=-1)).mean()
    return cfg.lambda_eps * eps_term + cfg.lambda_z * z_term


def budget_reg(gates: GateBundle, reuse_label: torch.Tensor,
               cfg: DistillConfig) -> torch.Tensor:
    """Push mean gate activations toward budgets; supervise the reuse gate."""
    token_term = (gates.p_topk.mean() - cfg.r_target) ** 2
    layer_term = (gates.p_lay.mean() - cfg.l_target) ** 2
    label = reuse_label.to(gates.p_cache.dtype).reshape(gates.p_cache.shape)
    bce = F.binary_cross_entropy(gates.p_cache, label)
    return token_term + layer_term + bce


def temporal_reg(gates_t: GateBundle, gates_prev: GateBundle) -> torch.Tensor:
    """Squared change of all soft gates between consecutive steps."""
    d_tok = ((gates_t.p_topk - gates_prev.p_topk) ** 2).sum(dim=-1)
    d_lay = ((gates_t.p_lay - gates_prev.p_lay) ** 2).sum(dim=-1)
    d_cache = (gates_t.p_cache - gates_prev.p_cache) ** 2
    return (d_tok + d_lay + d_cache).mean()


# -- the distillation step ---------------------------------------------------------


def _batch_cue(delta_bin: torch.Tensor, n_bins: int) -> torch.Tensor:
    """Training-time cache cue: real delta bin, cold hit-rate/availability."""
    onehot = F.one_hot(delta_bin.clamp(0, n_bins - 1), n_bins).to(numerics.active_dtype())
    extra = torch.zeros(delta_bin.shape[0], 2, dtype=numerics.active_dtype())
    return torch.cat([onehot, extra], dim=-1)


def _batch_gates(bundle: PolicyBundle, ds: DistillDataset,
                 idx: torch.Tensor) -> GateBundle:
    router = bundle.router
    step = numerics.sinusoidal_encode(0, router.cfg.d_step_embed)
    inputs = ConditionInputs(
        prev_action=ds.a_prev[idx],
        vision_summary=ds.s_v[idx],
        text_summary=ds.s_u[idx],
        step_embed=step.unsqueeze(0).expand(idx.shape[0], -1),
        cache_cue=_batch_cue(ds.delta_bin[idx], router.cfg.n_delta_bins),
    )
    return router(inputs, ds.vision[idx])


def student_forward(bundle: PolicyBundle, ds: DistillDataset, idx: torch.Tensor,
                    gates: GateBundle) -> torch.Tensor:
    """Soft student path: scaled tokens, soft layer gates, full sequence."""
    bb = bundle.backbone
    scaled = soft_scale(ds.vision[idx], gates.p_topk)
    positions = bb.dense_positions(ds.text_emb.shape[1])
    return bb.forward_cognition(scaled, ds.text_emb[idx], positions,
                                gates.p_lay, soft=True)


def distill_step(bundle: PolicyBundle, ds: DistillDataset, idx: torch.Tensor,
                 opt: torch.optim.Optimizer, cfg: DistillConfig,
                 step_rng: Rng) -> dict[str, float]:
    """One router update; returns the logged loss decomposition."""
    head = bundle.head
    b = idx.shape[0]

    gates = _batch_gates(bundle, ds, idx)
    z_stu = student_forward(bundle, ds, idx, gates)

    k = step_rng.randint(0, head.cfg.denoise_steps, b)
    eps = step_rng.normal(b, head.cfg.horizon, head.cfg.d_a)
    a_bar = head.alpha_bar[k].view(b, 1, 1)
    noisy = torch.sqrt(a_bar) * ds.teacher_chunk[idx] + torch.sqrt(1.0 - a_bar) * eps

    eps_stu = head.predict_eps(z_stu, noisy, k)
    with torch.no_grad():
        eps_tea = head.predict_eps(ds.teacher_z[idx], noisy, k)

    l_distill = distill_loss(eps_tea, eps_stu, ds.teacher_z[idx], z_stu, cfg)
    l_budget = cfg.lambda_budget * budget_reg(gates, ds.reuse_label[idx], cfg)
    gates_prev = _batch_gates(bundle, ds, ds.prev_index[idx])
    l_temp = cfg.lambda_temp * temporal_reg(gates, gates_prev)
    total = l_distill + l_budget + l_temp

    opt.zero_grad()
    total.backward()
    opt.step()
    return {
        "distill": float(l_distill.detach()),
        "budget": float(l_budget.detach()),
        "temporal": float(l_temp.detach()),
        "total": float(total.detach()),
        "mean_p_topk": float(gates.p_topk.detach().mean()),
        "mean_p_lay": float(gates.p_lay.detach().mean()),
    }


def distill_train(bundle: PolicyBundle, ds: DistillDataset,
                  cfg: DistillConfig) -> list[dict[str, float]]:
    """Phase 2: router-only optimization against the frozen dense teacher."""
    for p in bundle.backbone.parameters():
        p.requires_grad_(False)
    for p in bundle.head.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(bundle.router.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed).derive("distill")
    batch_rng = rng.derive("batches")
    n = len(ds)

    history: list[dict[str, float]] = []
    for step in range(cfg.steps):
        idx = batch_rng.randint(0, n, min(cfg.batch_size, n))
        history.append(distill_step(bundle, ds, idx, opt, cfg, rng.derive(f"s{step}")))
    return history
