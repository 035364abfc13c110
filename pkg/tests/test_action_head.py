import pytest
import torch

from adavla.action_head import ActionHead, HeadConfig
from adavla.numerics import ConfigError, FlopCounter, InputError, Rng


def small_head_cfg(**kw) -> HeadConfig:
    base = dict(horizon=4, d_a=3, d_z=8, denoise_steps=4, hidden=16, step_embed_dim=4)
    base.update(kw)
    return HeadConfig(**base)


def make_head(seed=0, **kw) -> ActionHead:
    return ActionHead(small_head_cfg(**kw), Rng(seed))


def test_config_validation():
    with pytest.raises(ConfigError):
        small_head_cfg(horizon=0)
    with pytest.raises(ConfigError):
        small_head_cfg(beta_range=(0.0, 0.5))
    with pytest.raises(ConfigError):
        small_head_cfg(beta_range=(0.5, 1.0))
    assert small_head_cfg().chunk_dim == 12


def test_schedule_buffers_consistent():
    head = make_head()
    assert torch.allclose(head.alphas, 1.0 - head.betas)
    assert torch.allclose(head.alpha_bar, torch.cumprod(head.alphas, dim=0))
    assert bool((head.betas[1:] >= head.betas[:-1]).all())


def test_terminal_noise_level_is_hot():
    """After the full forward process almost no signal may remain, otherwise
    sampling would start from a distribution the model never trained on."""
    head = ActionHead(HeadConfig(), Rng(0))
    assert float(head.alpha_bar[-1]) < 0.05


def test_untrained_head_predicts_zero_noise():
    head = make_head()
    z = Rng(1).normal(8)
    x = Rng(2).normal(4, 3)
    eps = head.predict_eps(z, x, 0)
    assert torch.equal(eps, torch.zeros(4, 3))


def test_predict_eps_consumes_step_embedding():
    head = make_head(seed=3)
    with torch.no_grad():
        head.w_out.normal_(0.0, 0.1, generator=torch.Generator().manual_seed(0))
    z = Rng(1).normal(8)
    x = Rng(2).normal(4, 3)
    e0 = head.predict_eps(z, x, 0)
    e1 = head.predict_eps(z, x, 1)
    assert not torch.equal(e0, e1)


def test_predict_eps_batched_matches_single():
    head = make_head(seed=4)
    with torch.no_grad():
        head.w_out.normal_(0.0, 0.1, generator=torch.Generator().manual_seed(1))
    z = Rng(5).normal(2, 8)
    x = Rng(6).normal(2, 4, 3)
    k = torch.tensor([0, 2])
    batch = head.predict_eps(z, x, k)
    single0 = head.predict_eps(z[0], x[0], 0)
    single2 = head.predict_eps(z[1], x[1], 2)
    assert torch.allclose(batch[0], single0, atol=1e-6)
    assert torch.allclose(batch[1], single2, atol=1e-6)


def test_predict_eps_step_bounds():
    head = make_head()
    z = torch.zeros(8)
    x = torch.zeros(4, 3)
    with pytest.raises(InputError):
        head.predict_eps(z, x, 4)
    with pytest.raises(InputError):
        head.predict_eps(z, x, -1)
    with pytest.raises(InputError):
        head.predict_eps(z.unsqueeze(0), x.unsqueeze(0), torch.tensor([9]))


def test_predict_eps_counts_to_head_component():
    cfg = small_head_cfg()
    head = ActionHead(cfg, Rng(0))
    counter = FlopCounter()
    head.predict_eps(torch.zeros(8), torch.zeros(4, 3), 0, counter)
    d_in = cfg.d_z + cfg.chunk_dim + cfg.step_embed_dim
    expected = d_in * cfg.hidden + cfg.hidden * cfg.hidden + cfg.hidden * cfg.chunk_dim
    assert counter.breakdown["head"] == expected
    assert counter.breakdown["backbone"] == 0


def test_sample_chunk_deterministic_and_clipped():
    head = make_head(seed=7)
    z = Rng(8).normal(8)
    with torch.no_grad():
        a = head.sample_chunk(z, Rng(9).derive("n"))
        b = head.sample_chunk(z, Rng(9).derive("n"))
        assert torch.equal(a, b)
        assert float(a.abs().max()) <= 1.0
        c = head.sample_chunk(z, Rng(10).derive("n"))
        assert not torch.equal(a, c)


def test_sample_chunk_depends_on_z_once_trained():
    head = make_head(seed=11)
    with torch.no_grad():
        head.w_out.normal_(0.0, 0.2, generator=torch.Generator().manual_seed(2))
    z1 = Rng(12).derive("z1").normal(8)
    z2 = Rng(12).derive("z2").normal(8)
    a = head.sample_chunk(z1, Rng(13).derive("n"))
    b = head.sample_chunk(z2, Rng(13).derive("n"))
    assert not torch.equal(a, b)


def test_untrained_loss_near_chunk_dim():
    """With eps-hat = 0 the expected objective is E||eps||^2 = H * d_a."""
    head = make_head()
    r = Rng(14)
    z = r.derive("z").normal(256, 8)
    chunks = r.derive("c").uniform(256, 4, 3, low=-1.0, high=1.0)
    with torch.no_grad():
        loss = float(head.train_loss(z, chunks, r.derive("noise")))
    assert abs(loss - 12.0) < 1.2  # 4 * 3 with Monte Carlo slack


def test_train_loss_positive_and_differentiable():
    head = make_head(seed=15)
    z = Rng(16).normal(8, 8)
    chunks = Rng(17).uniform(8, 4, 3, low=-1.0, high=1.0)
    loss = head.train_loss(z, chunks, Rng(18))
    assert float(loss.detach()) >= 0.0
    loss.backward()
    assert head.w_out.grad is not None
    assert head.w1.grad is not None


def test_overfit_single_transition_recovers_action_chunk():
    """Trained on one (z, chunk) pair the sampler must reproduce that chunk.

    This is the end-to-end check that the noise schedule, the training
    objective and ancestral sampling are mutually consistent.
    """
    torch.manual_seed(0)
    head = ActionHead(HeadConfig(d_z=8, horizon=4, hidden=64), Rng(19))
    z = Rng(20).derive("z").normal(8)
    target = torch.tensor([[0.6, -0.4, 0.0],
                           [0.2, 0.1, 1.0],
                           [-0.3, 0.5, 0.0],
                           [0.0, -0.2, -1.0]])
    opt = torch.optim.Adam(head.parameters(), lr=3e-3)
    r = Rng(21)
    zb = z.unsqueeze(0).expand(64, -1)
    cb = target.unsqueeze(0).expand(64, -1, -1)
    for step in range(1000):
        loss = head.train_loss(zb, cb, r.derive(f"s{step}"))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        samples = torch.stack([head.sample_chunk(z, Rng(22).derive(f"n{i}"))
                               for i in range(8)])
    err = (samples - target).abs().mean()
    assert float(err) < 0.05, f"mean abs error {float(err):.4f}"
