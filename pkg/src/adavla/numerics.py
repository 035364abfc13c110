"""Deterministic dense-math kernels with exact multiply-accumulate accounting.

Every dense kernel that the policy executes at inference time goes through
this module so that its cost can be charged to a :class:`FlopCounter`. The
accounting convention is:

* MACs are counted for dot-product kernels only (matmul, linear, attention
  score/value products). Elementwise ops, normalization, softmax, embedding
  lookups and rotary rotations charge zero; they are negligible next to the
  counted kernels and scale with the same sequence/width factors, so cost
  ratios are unaffected.
* FLOPs are reported as 2 x MACs.

The analytic cost table (:func:`count_macs`) and the per-kernel counting
shadow (:func:`shadow_macs`, a literal loop enumeration) are kept separate
on purpose: tests assert their exact integer agreement.
"""

from __future__ import annotations

import functools
import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

COMPONENTS = ("backbone", "router", "head", "cache")


class ShapeError(ValueError):
    """Tensor shapes do not satisfy a kernel's contract."""


class ConfigError(ValueError):
    """A configuration value is outside its valid range."""


class AccountingError(RuntimeError):
    """A kernel was asked to charge cost without a registered formula."""


class InputError(ValueError):
    """Runtime input violates a precondition (bad id, non-finite value...)."""


# ---------------------------------------------------------------------------
# Precision mode
# ---------------------------------------------------------------------------

_ACTIVE_DTYPE = torch.float32


def active_dtype() -> torch.dtype:
    """Dtype used for parameters and runtime tensors (float32 by default)."""
    return _ACTIVE_DTYPE


def set_grad_check_mode(enabled: bool) -> None:
    """Switch the global precision: float64 for gradient checks, float32 otherwise."""
    global _ACTIVE_DTYPE
    _ACTIVE_DTYPE = torch.float64 if enabled else torch.float32


@contextmanager
def grad_check_precision():
    """Context manager that runs the enclosed block in float64 mode."""
    prev = _ACTIVE_DTYPE
    set_grad_check_mode(True)
    try:
        yield
    finally:
        set_grad_check_mode(prev == torch.float64)


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded random source with named, independently-derived substreams.

    The same (seed, purpose path) always yields the same stream regardless
    of call order elsewhere; substreams for disjoint purposes never collide.
    """

    def __init__(self, seed: int, _path: str = ""):
        self.seed = int(seed)
        self._path = _path
        self._gen = torch.Generator()
        self._gen.manual_seed(self._mix(self.seed, _path))

    @staticmethod
    def _mix(seed: int, path: str) -> int:
        digest = hashlib.sha256(f"{seed}/{path}".encode()).digest()
        return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF

    def derive(self, purpose: str) -> "Rng":
        """Child stream for a named purpose; independent of this stream's use."""
        return Rng(self.seed, f"{self._path}/{purpose}")

    def generator(self) -> torch.Generator:
        return self._gen

    def normal(self, *shape: int, std: float = 1.0, dtype: torch.dtype | None = None) -> torch.Tensor:
        dtype = dtype or active_dtype()
        return torch.randn(*shape, generator=self._gen, dtype=dtype) * std

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0,
                dtype: torch.dtype | None = None) -> torch.Tensor:
        dtype = dtype or active_dtype()
        return torch.rand(*shape, generator=self._gen, dtype=dtype) * (high - low) + low

    def randint(self, low: int, high: int, *shape: int) -> torch.Tensor:
        return torch.randint(low, high, shape, generator=self._gen)


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------


@dataclass
class FlopCounter:
    """Monotone multiply-accumulate counter with a per-component breakdown.

    One counter lives for one control step; it is single-writer. The total
    always equals the sum of the component entries.
    """

    breakdown: dict = field(default_factory=lambda: {c: 0 for c in COMPONENTS})

    def add(self, component: str, macs: int) -> None:
        if component not in self.breakdown:
            raise AccountingError(f"unknown component {component!r}")
        if macs < 0:
            raise AccountingError("MAC counts never decrease")
        self.breakdown[component] += int(macs)

    @property
    def macs(self) -> int:
        return sum(self.breakdown.values())

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def component_flops(self, component: str) -> int:
        return 2 * self.breakdown[component]


_COST_TABLE = {
    # (batch, m, k, n) row-major matmul
    "matmul": lambda b, m, k, n: b * m * k * n,
    # rows flattened over leading dims; weight is (out, in)
    "linear": lambda rows, d_in, d_out: rows * d_in * d_out,
    # score product + value product over all heads
    "attention": lambda heads, s_q, s_k, d_head: 2 * heads * s_q * s_k * d_head,
}


def count_macs(kernel: str, *dims: int) -> int:
    """Exact MAC count for a registered kernel shape.

    Unregistered kernels raise: silent under-counting is never acceptable.
    """
    try:
        formula = _COST_TABLE[kernel]
    except KeyError:
        raise AccountingError(f"kernel {kernel!r} not in the analytic cost table") from None
    return int(formula(*dims))


def shadow_macs(kernel: str, *dims: int) -> int:
    """Count MACs of a kernel by literal loop enumeration (test oracle only)."""
    n = 0
    if kernel == "matmul":
        b, m, k, nn_ = dims
        for _ in range(b):
            for _ in range(m):
                for _ in range(nn_):
                    for _ in range(k):
                        n += 1
    elif kernel == "linear":
        rows, d_in, d_out = dims
        for _ in range(rows):
            for _ in range(d_out):
                for _ in range(d_in):
                    n += 1
    elif kernel == "attention":
        heads, s_q, s_k, d_head = dims
        for _ in range(heads):
            for _ in range(s_q):
                for _ in range(s_k):
                    for _ in range(d_head):
                        n += 2  # one score MAC, one value MAC
    else:
        raise AccountingError(f"kernel {kernel!r} has no counting shadow")
    return n


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor, counter: FlopCounter | None = None,
           component: str = "backbone") -> torch.Tensor:
    """Counted matrix product. Leading batch dims of `a` broadcast over `b`."""
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {tuple(a.shape)} x {tuple(b.shape)}")
    if counter is not None:
        if b.dim() == 1:
            batch = a.numel() // (a.shape[-1] * a.shape[-2]) if a.dim() > 2 else 1
            counter.add(component, count_macs("matmul", batch, a.shape[-2], a.shape[-1], 1))
        else:
            batch = 1
            for d in a.shape[:-2]:
                batch *= d
            counter.add(component, count_macs("matmul", batch, a.shape[-2], a.shape[-1], b.shape[-1]))
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           counter: FlopCounter | None = None, component: str = "backbone") -> torch.Tensor:
    """Counted affine map y = x W^T + b with weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects input dim {weight.shape[1]}, got {x.shape[-1]}")
    if counter is not None:
        rows = x.numel() // x.shape[-1]
        counter.add(component, count_macs("linear", rows, weight.shape[1], weight.shape[0]))
    return F.linear(x, weight, bias)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    """Row-wise layer normalization over the last dim (uncounted)."""
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return F.softmax(x, dim=dim)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              counter: FlopCounter | None = None, component: str = "backbone") -> torch.Tensor:
    """Full (non-causal) scaled dot-product attention over (..., heads, S, d_head)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention shapes disagree")
    d_head = q.shape[-1]
    if counter is not None:
        heads = q.numel() // (q.shape[-2] * d_head)
        counter.add(component, count_macs("attention", heads, q.shape[-2], k.shape[-2], d_head))
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(d_head)
    return softmax(scores, dim=-1) @ v


def sinusoidal_encode(step_index: int, dim: int) -> torch.Tensor:
    """Interleaved sin/cos encoding of a non-negative step index.

    Entry pairs are (sin(t / w_k), cos(t / w_k)) with w_k = 10000^(2k/dim).
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"sinusoidal encode needs an even dim >= 2, got {dim}")
    k = torch.arange(dim // 2, dtype=active_dtype())
    omega = torch.pow(torch.tensor(10000.0, dtype=active_dtype()), 2.0 * k / dim)
    angle = float(step_index) / omega
    out = torch.empty(dim, dtype=active_dtype())
    out[0::2] = torch.sin(angle)
    out[1::2] = torch.cos(angle)
    return out


@functools.lru_cache(maxsize=256)
def _rope_tables(pos_key: tuple, d_head: int, base: float,
                 dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    positions = torch.tensor(pos_key, dtype=dtype)
    k = torch.arange(d_head // 2, dtype=dtype)
    inv_freq = torch.pow(torch.tensor(base, dtype=dtype), -2.0 * k / d_head)
    angles = positions[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def rope_angles(positions: torch.Tensor, d_head: int, base: float = 10000.0,
                dtype: torch.dtype | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(cos, sin) tables of shape (S, d_head/2) for the given integer positions.

    Tables are memoized: the same position vector recurs across blocks of one
    forward and across control steps, and the tables are tiny.
    """
    if d_head % 2 != 0:
        raise ConfigError("rotary head dim must be even")
    dtype = dtype or active_dtype()
    return _rope_tables(tuple(positions.tolist()), d_head, float(base), dtype)


def rope_apply(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate interleaved feature pairs of each row by its position angle.

    `x` is (..., S, d) with even d; `positions` has length S. Pair (2k, 2k+1)
    of a row at position p is rotated by p * base^(-2k/d), which preserves
    each pair's L2 norm.
    """
    if x.shape[-1] % 2 != 0:
        raise ConfigError("rope_apply needs an even feature dim")
    if positions.shape[0] != x.shape[-2]:
        raise ShapeError(f"positions length {positions.shape[0]} != rows {x.shape[-2]}")
    cos, sin = rope_angles(positions, x.shape[-1], base, dtype=x.dtype)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out
