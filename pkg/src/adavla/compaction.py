"""Physical token pruning with an index map and rotation-consistent positions.

Pruned vision tokens are removed from the sequence (not masked), and each
kept token remembers its original patch index so it can be assigned the same
rotary position it would have had in the dense forward. Text positions start
after the *original* patch span, so they never move when the mask changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import ShapeError


@dataclass
class CompactTokens:
    """Kept vision tokens plus the bookkeeping needed for position assignment.

    `patch_index` is strictly increasing: compaction preserves raster order.
    `n_orig` is the pre-compaction token count; positions of text and the
    cognition token are derived from it, not from how many tokens survived.
    """

    features: torch.Tensor      # (n_kept, d_v)
    patch_index: torch.Tensor   # (n_kept,) long, strictly increasing
    n_orig: int

    @property
    def n_kept(self) -> int:
        return self.features.shape[0]


def compact(features: torch.Tensor, mask: torch.Tensor,
            fallback_index: int | None = None) -> CompactTokens:
    """Drop rows where mask is 0, keeping original order.

    An all-zero mask keeps the single token at `fallback_index` (the caller
    passes the argmax of the keep scores): sequences never go empty.
    """
    n = features.shape[0]
    if mask.shape[0] != n:
        raise ShapeError(f"mask length {mask.shape[0]} != token count {n}")
    keep = torch.nonzero(mask.to(torch.bool), as_tuple=False).flatten()
    if keep.numel() == 0:
        if fallback_index is None:
            raise ShapeError("all-zero mask needs a fallback token index")
        keep = torch.tensor([int(fallback_index)], dtype=torch.long)
    return CompactTokens(features=features[keep], patch_index=keep, n_orig=n)


def patch_positions(patch_index: torch.Tensor) -> torch.Tensor:
    """Rotary position of kept patch j is 1 + its original index."""
    return patch_index.to(torch.long) + 1


def text_positions(n_orig: int, text_len: int) -> torch.Tensor:
    """Text positions start one past the original patch span, mask-independent."""
    return torch.arange(text_len, dtype=torch.long) + 1 + n_orig


def cognition_position(n_orig: int, text_len: int) -> int:
    """The cognition token sits one slot past the text span."""
    return 1 + n_orig + text_len


def soft_scale(patch_embeddings: torch.Tensor, keep_scores: torch.Tensor) -> torch.Tensor:
    """Training-time relaxation: scale each patch embedding by its keep score.

    Differentiable in the scores; the hard path (compact) is inference-only.
    Supports (N, d) x (N,) and batched (B, N, d) x (B, N).
    """
    if keep_scores.shape != patch_embeddings.shape[:-1]:
        raise ShapeError(
            f"keep scores {tuple(keep_scores.shape)} do not match tokens "
            f"{tuple(patch_embeddings.shape[:-1])}")
    return patch_embeddings * keep_scores.unsqueeze(-1)
