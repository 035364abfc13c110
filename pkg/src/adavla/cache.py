"""Cognition cache: temporal reuse of the backbone output keyed by motion and sight.

A key combines a quantized action-delta norm (motion continuity) with a robust
hash of the pooled vision features (visual consistency). The cache separates a
*reuse request* (the router wants to reuse) from a *hit* (the lookup actually
succeeded); a new cognition vector is written back only when reuse was
requested but the lookup missed, so the cache population tracks the router's
intent.

Eviction is least-recently-hit with ties broken by oldest insertion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .numerics import FlopCounter, Rng, count_macs

# Fixed seed for the hash projection so keys are stable across episodes,
# processes and runs for a given configuration.
_HASH_PROJECTION_SEED = 0x5EED_CA5E
_ZERO_SENTINEL = 0x0
_MIX_INIT = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class CacheKey:
    delta_bin: int
    vision_hash: int


@dataclass
class CacheEntry:
    z: torch.Tensor
    insert_step: int
    last_hit_step: int


@dataclass
class CacheConfig:
    capacity: int = 64
    delta_bin_width: float = 0.05      # normalized action units per bin
    hash_quant_levels: int = 16
    projection_dim: int = 16
    tau_cache: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        if self.delta_bin_width <= 0:
            raise ValueError("delta bin width must be positive")


@dataclass
class CacheStats:
    requests: int = 0
    hits: int = 0
    insertions: int = 0
    evictions: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hits / self.requests if self.requests else 0.0

    def as_dict(self) -> dict:
        return {"requests": self.requests, "hits": self.hits,
                "insertions": self.insertions, "evictions": self.evictions,
                "hit_rate": self.hit_rate}


def delta_proxy(a_prev: torch.Tensor, a_prev2: torch.Tensor | None = None) -> torch.Tensor:
    """Action delta between the two most recent executed actions.

    Falls back to the previous action itself when only one exists; at the
    first control step the zero-action convention makes this the zero vector.
    """
    if a_prev2 is None:
        return a_prev.clone()
    return a_prev - a_prev2


def quantize_norm(delta: torch.Tensor, bin_width: float) -> int:
    """floor(||delta||_2 / bin_width)."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    return int(torch.linalg.vector_norm(delta.to(torch.float64)).item() // bin_width)


def _splitmix64(x: int) -> int:
    x = (x + _MIX_INIT) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def hash_projection(d_v: int, projection_dim: int) -> torch.Tensor:
    """Fixed seeded random projection with unit-norm rows (so outputs lie in [-1, 1])."""
    rng = Rng(_HASH_PROJECTION_SEED, f"hash-proj/{d_v}/{projection_dim}")
    proj = rng.normal(projection_dim, d_v, dtype=torch.float64)
    return proj / torch.linalg.vector_norm(proj, dim=1, keepdim=True)


def robust_hash(pooled: torch.Tensor, config: CacheConfig,
                projection: torch.Tensor | None = None,
                counter: FlopCounter | None = None) -> int:
    """Stable 64-bit hash of the pooled vision vector.

    Normalizes to unit length (positive rescaling of the input cannot change
    the hash), projects through a fixed random matrix, quantizes each
    coordinate uniformly over [-1, 1], then mixes the bucket sequence. The
    all-zero vector maps to a reserved sentinel.
    """
    v = pooled.to(torch.float64)
    norm = torch.linalg.vector_norm(v)
    if norm.item() == 0.0:
        return _ZERO_SENTINEL
    if projection is None:
        projection = hash_projection(v.shape[0], config.projection_dim)
    if counter is not None:
        counter.add("cache", count_macs("linear", 1, v.shape[0], projection.shape[0]))
    coords = projection @ (v / norm)
    levels = config.hash_quant_levels
    buckets = torch.clamp(((coords + 1.0) * 0.5 * levels).floor().long(), 0, levels - 1)
    h = 0
    for b in buckets.tolist():
        h = _splitmix64(h ^ (b + 1))
    return h


class CognitionCache:
    """Bounded key-value store for cognition vectors, single-writer per episode."""

    def __init__(self, config: CacheConfig, d_v: int):
        self.config = config
        self._projection = hash_projection(d_v, config.projection_dim)
        self._entries: dict[CacheKey, CacheEntry] = {}
        self._tick = 0
        self.stats = CacheStats()

    def __len__(self) -> int:
        return len(self._entries)

    def make_key(self, a_prev: torch.Tensor, a_prev2: torch.Tensor | None,
                 pooled_vision: torch.Tensor,
                 counter: FlopCounter | None = None) -> CacheKey:
        delta = delta_proxy(a_prev, a_prev2)
        return CacheKey(
            delta_bin=quantize_norm(delta, self.config.delta_bin_width),
            vision_hash=robust_hash(pooled_vision, self.config, self._projection, counter),
        )

    def get(self, key: CacheKey) -> tuple[bool, torch.Tensor | None]:
        """Lookup; a hit returns the stored vector unmodified and refreshes recency."""
        self._tick += 1
        self.stats.requests += 1
        entry = self._entries.get(key)
        if entry is None:
            return False, None
        entry.last_hit_step = self._tick
        self.stats.hits += 1
        return True, entry.z

    def put(self, key: CacheKey, z: torch.Tensor) -> None:
        """Unconditional insert; the engine enforces the request-and-miss discipline."""
        self._tick += 1
        if key in self._entries:
            old = self._entries[key]
            old.z = z
            return
        if len(self._entries) >= self.config.capacity:
            victim = min(self._entries.items(),
                         key=lambda kv: (kv[1].last_hit_step, kv[1].insert_step))
            del self._entries[victim[0]]
            self.stats.evictions += 1
        self._entries[key] = CacheEntry(z=z, insert_step=self._tick, last_hit_step=self._tick)
        self.stats.insertions += 1

    def has_delta_bin(self, delta_bin: int) -> bool:
        """Availability probe: does any stored entry share this action-delta bin?"""
        return any(k.delta_bin == delta_bin for k in self._entries)


def reuse_requested(p_cache: float, tau_cache: float, enabled: bool = True) -> bool:
    """The router requests reuse when its cache gate reaches the threshold."""
    return bool(enabled and p_cache >= tau_cache)
