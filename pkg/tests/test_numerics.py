import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adavla import numerics
from adavla.numerics import (
    AccountingError,
    ConfigError,
    FlopCounter,
    Rng,
    ShapeError,
    attention,
    count_macs,
    grad_check_precision,
    linear,
    matmul,
    rope_apply,
    shadow_macs,
    sinusoidal_encode,
)


# ---------------------------------------------------------------------------
# cost table vs counting shadow
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kernel,dims", [
    ("matmul", (1, 2, 3, 4)),
    ("matmul", (3, 5, 2, 7)),
    ("matmul", (2, 1, 1, 1)),
    ("linear", (4, 6, 5)),
    ("linear", (1, 1, 1)),
    ("linear", (7, 3, 2)),
    ("attention", (2, 3, 4, 5)),
    ("attention", (1, 1, 1, 1)),
    ("attention", (4, 6, 6, 2)),
])
def test_cost_table_matches_shadow(kernel, dims):
    assert count_macs(kernel, *dims) == shadow_macs(kernel, *dims)


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)))
def test_matmul_cost_matches_shadow_property(dims):
    assert count_macs("matmul", *dims) == shadow_macs("matmul", *dims)


def test_unknown_kernel_raises():
    with pytest.raises(AccountingError):
        count_macs("convolution", 1, 2, 3)
    with pytest.raises(AccountingError):
        shadow_macs("convolution", 1, 2, 3)


# ---------------------------------------------------------------------------
# FlopCounter
# ---------------------------------------------------------------------------

def test_counter_breakdown_and_totals():
    c = FlopCounter()
    assert c.macs == 0 and c.flops == 0
    c.add("backbone", 10)
    c.add("router", 5)
    c.add("backbone", 1)
    assert c.breakdown["backbone"] == 11
    assert c.macs == 16
    assert c.flops == 32
    assert c.component_flops("router") == 10
    assert c.macs == sum(c.breakdown.values())


def test_counter_rejects_bad_input():
    c = FlopCounter()
    with pytest.raises(AccountingError):
        c.add("backbone", -1)
    with pytest.raises(AccountingError):
        c.add("frontend", 3)


def test_counter_components_cover_known_set():
    c = FlopCounter()
    assert set(c.breakdown) == {"backbone", "router", "head", "cache"}


# ---------------------------------------------------------------------------
# counted kernels
# ---------------------------------------------------------------------------

def test_matmul_counts_and_computes():
    a = torch.arange(6, dtype=torch.float32).reshape(2, 3)
    b = torch.arange(12, dtype=torch.float32).reshape(3, 4)
    c = FlopCounter()
    out = matmul(a, b, c, "backbone")
    assert torch.equal(out, a @ b)
    assert c.breakdown["backbone"] == 2 * 3 * 4


def test_matmul_batched_count():
    a = torch.randn(5, 2, 3)
    b = torch.randn(3, 4)
    c = FlopCounter()
    matmul(a, b, c, "router")
    assert c.breakdown["router"] == 5 * 2 * 3 * 4


def test_matmul_vector_rhs():
    a = torch.randn(4, 3)
    b = torch.randn(3)
    c = FlopCounter()
    out = matmul(a, b, c, "router")
    assert torch.allclose(out, a @ b)
    assert c.breakdown["router"] == 4 * 3


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(torch.randn(2, 3), torch.randn(4, 2))


def test_linear_counts_rows_over_leading_dims():
    x = torch.randn(2, 5, 3)
    w = torch.randn(7, 3)
    b = torch.randn(7)
    c = FlopCounter()
    out = linear(x, w, b, c, "head")
    assert torch.allclose(out, x @ w.t() + b)
    assert c.breakdown["head"] == 10 * 3 * 7


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(torch.randn(2, 4), torch.randn(7, 3))


def test_attention_count_and_value():
    heads, s, dh = 2, 5, 4
    q = torch.randn(heads, s, dh)
    k = torch.randn(heads, s, dh)
    v = torch.randn(heads, s, dh)
    c = FlopCounter()
    out = attention(q, k, v, c, "backbone")
    scores = torch.softmax((q @ k.transpose(-1, -2)) / math.sqrt(dh), dim=-1)
    assert torch.allclose(out, scores @ v, atol=1e-6)
    assert c.breakdown["backbone"] == 2 * heads * s * s * dh


def test_attention_batched_count():
    q = torch.randn(3, 2, 5, 4)
    k = torch.randn(3, 2, 6, 4)
    v = torch.randn(3, 2, 6, 4)
    c = FlopCounter()
    attention(q, k, v, c, "backbone")
    assert c.breakdown["backbone"] == 2 * (3 * 2) * 5 * 6 * 4


def test_uncounted_ops_charge_nothing():
    c = FlopCounter()
    x = torch.randn(3, 8)
    numerics.layer_norm(x, torch.ones(8), torch.zeros(8))
    numerics.softmax(x)
    assert c.macs == 0


# ---------------------------------------------------------------------------
# rotary position encoding
# ---------------------------------------------------------------------------

def test_rope_position_zero_is_identity():
    x = torch.randn(1, 4, 16)
    out = rope_apply(x, torch.zeros(4, dtype=torch.long))
    assert torch.allclose(out, x, atol=1e-6)


def test_rope_preserves_pair_norms():
    x = torch.randn(2, 6, 16)
    pos = torch.arange(1, 7)
    out = rope_apply(x, pos)
    norms_in = (x[..., 0::2] ** 2 + x[..., 1::2] ** 2)
    norms_out = (out[..., 0::2] ** 2 + out[..., 1::2] ** 2)
    assert torch.allclose(norms_in, norms_out, atol=1e-5)


def test_rope_dot_product_depends_on_relative_position():
    d = 16
    rng = Rng(11)
    q = rng.derive("q").normal(d)
    k = rng.derive("k").normal(d)

    def rotated_dot(pq, pk):
        rq = rope_apply(q.view(1, 1, d), torch.tensor([pq])).view(d)
        rk = rope_apply(k.view(1, 1, d), torch.tensor([pk])).view(d)
        return float(rq @ rk)

    assert rotated_dot(3, 10) == pytest.approx(rotated_dot(7, 14), abs=1e-5)
    assert rotated_dot(0, 5) == pytest.approx(rotated_dot(20, 25), abs=1e-5)


def test_rope_distinct_positions_change_vectors():
    x = torch.randn(1, 2, 16)
    a = rope_apply(x, torch.tensor([1, 1]))
    b = rope_apply(x, torch.tensor([1, 2]))
    assert torch.allclose(a[0, 0], b[0, 0])
    assert not torch.allclose(a[0, 1], b[0, 1])


def test_rope_errors():
    with pytest.raises(ShapeError):
        rope_apply(torch.randn(1, 3, 16), torch.tensor([1, 2]))
    with pytest.raises(ConfigError):
        rope_apply(torch.randn(1, 2, 15), torch.tensor([1, 2]))


def test_rope_memoization_returns_equal_tables():
    pos = torch.tensor([1, 5, 9])
    c1, s1 = numerics.rope_angles(pos, 8)
    c2, s2 = numerics.rope_angles(pos, 8)
    assert torch.equal(c1, c2) and torch.equal(s1, s2)


# ---------------------------------------------------------------------------
# sinusoidal step encoding
# ---------------------------------------------------------------------------

def test_sinusoidal_step_zero():
    enc = sinusoidal_encode(0, 8)
    assert torch.allclose(enc[0::2], torch.zeros(4))
    assert torch.allclose(enc[1::2], torch.ones(4))


def test_sinusoidal_bounded_and_deterministic():
    a = sinusoidal_encode(17, 16)
    b = sinusoidal_encode(17, 16)
    assert torch.equal(a, b)
    assert a.abs().max() <= 1.0 + 1e-6
    assert not torch.equal(a, sinusoidal_encode(18, 16))


def test_sinusoidal_first_pair_uses_raw_step():
    enc = sinusoidal_encode(2, 8)
    assert float(enc[0]) == pytest.approx(math.sin(2.0), abs=1e-6)
    assert float(enc[1]) == pytest.approx(math.cos(2.0), abs=1e-6)


def test_sinusoidal_rejects_odd_dim():
    with pytest.raises(ConfigError):
        sinusoidal_encode(1, 7)


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def test_rng_reproducible_across_instances():
    a = Rng(42).derive("weights").normal(3, 4)
    b = Rng(42).derive("weights").normal(3, 4)
    assert torch.equal(a, b)


def test_rng_substreams_do_not_collide():
    r = Rng(0)
    a = r.derive("a").normal(8)
    b = r.derive("b").normal(8)
    assert not torch.equal(a, b)


def test_rng_substream_independent_of_sibling_use():
    r1 = Rng(7)
    r1.derive("x").normal(100)  # consume a sibling stream
    a = r1.derive("y").normal(5)
    b = Rng(7).derive("y").normal(5)
    assert torch.equal(a, b)


def test_rng_nested_paths_differ_from_flat():
    a = Rng(1).derive("a").derive("b").normal(4)
    b = Rng(1).derive("a/b").normal(4)
    # nested derivation concatenates with separators, same stream by design
    assert torch.equal(a, b)


def test_rng_uniform_range_and_randint_bounds():
    r = Rng(3)
    u = r.derive("u").uniform(1000, low=-2.0, high=5.0)
    assert float(u.min()) >= -2.0 and float(u.max()) <= 5.0
    ints = r.derive("i").randint(2, 9, 500)
    assert int(ints.min()) >= 2 and int(ints.max()) <= 8


def test_rng_normal_std_scaling():
    r = Rng(5)
    x = r.derive("n").normal(20000, std=0.02)
    assert abs(float(x.std()) - 0.02) < 0.002


def test_rng_seed_changes_stream():
    assert not torch.equal(Rng(1).normal(6), Rng(2).normal(6))


# ---------------------------------------------------------------------------
# precision mode
# ---------------------------------------------------------------------------

def test_grad_check_precision_switches_dtype():
    assert numerics.active_dtype() == torch.float32
    with grad_check_precision():
        assert numerics.active_dtype() == torch.float64
        x = Rng(0).normal(3)
        assert x.dtype == torch.float64
    assert numerics.active_dtype() == torch.float32


def test_grad_check_precision_restores_on_error():
    with pytest.raises(RuntimeError):
        with grad_check_precision():
            raise RuntimeError("boom")
    assert numerics.active_dtype() == torch.float32
