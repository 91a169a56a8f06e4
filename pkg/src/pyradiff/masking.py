"""Patchification and random token masking.

Masked tokens are the diffusion targets; visible tokens are conditioning.
All functions here are numpy-level data plumbing: gradients never flow
through masking. A plan with ratio 1.0 (every position masked, produced
by ``full_mask_plan``) encodes the inference convention where all token
positions are generated and no visible stream exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


@dataclass(frozen=True)
class TokenBatch:
    """Flattened non-overlapping patches, one token per patch.

    tokens has shape (B, N, p*p*C) with N = H*W/p**2; patch order is
    row-major over the (H/p, W/p) grid and each patch flattens in
    (C, p, p) order.
    """

    tokens: Array
    patch_size: int
    grid: tuple[int, int]
    channels: int

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class MaskPlan:
    """Disjoint sorted index sets covering {0..N-1}."""

    masked_idx: Array
    visible_idx: Array
    ratio: float
    rng_seed: int | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.masked_idx) + len(self.visible_idx)

    @property
    def n_masked(self) -> int:
        return len(self.masked_idx)

    @property
    def n_visible(self) -> int:
        return len(self.visible_idx)


def patchify(images: Array, patch_size: int) -> TokenBatch:
    """(B, C, H, W) -> TokenBatch of (B, N, p*p*C)."""
    if images.ndim != 4:
        raise ShapeError(f"patchify expects (B, C, H, W), got {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"dims {h}x{w} are not divisible by patch size {p}")
    gh, gw = h // p, w // p
    tokens = (
        images.reshape(b, c, gh, p, gw, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, gh * gw, c * p * p)
    )
    return TokenBatch(tokens=tokens, patch_size=p, grid=(gh, gw), channels=c)


def unpatchify(batch: TokenBatch) -> Array:
    """Inverse of patchify, bit-exact."""
    b = batch.tokens.shape[0]
    gh, gw = batch.grid
    p, c = batch.patch_size, batch.channels
    return (
        batch.tokens.reshape(b, gh, gw, c, p, p)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(b, c, gh * p, gw * p)
    )


def sample_mask(n_tokens: int, ratio: float, rng: np.random.Generator | int) -> MaskPlan:
    """Uniform random plan masking exactly floor(ratio * N) tokens."""
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"mask ratio must lie in [0, 1), got {ratio}")
    seed: int | None = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    n_masked = int(np.floor(ratio * n_tokens))
    perm = rng.permutation(n_tokens)
    masked = np.sort(perm[:n_masked]).astype(np.int64)
    visible = np.sort(perm[n_masked:]).astype(np.int64)
    return MaskPlan(masked_idx=masked, visible_idx=visible, ratio=ratio, rng_seed=seed)


def full_mask_plan(n_tokens: int) -> MaskPlan:
    """Every position masked; the all-generated inference plan."""
    return MaskPlan(
        masked_idx=np.arange(n_tokens, dtype=np.int64),
        visible_idx=np.empty(0, dtype=np.int64),
        ratio=1.0,
        rng_seed=None,
    )


def level_mask_ratio(level: int, num_levels: int, r_fine: float, r_coarse: float) -> float:
    """Linear schedule from r_fine at level 0 to r_coarse at the coarsest."""
    if not 0.0 <= r_coarse <= r_fine < 1.0:
        raise ContractError(
            f"need 0 <= r_coarse <= r_fine < 1, got fine={r_fine} coarse={r_coarse}"
        )
    if not 0 <= level < num_levels:
        raise ContractError(f"level {level} outside [0, {num_levels})")
    if num_levels == 1:
        return r_fine
    frac = level / (num_levels - 1)
    return r_fine + (r_coarse - r_fine) * frac


def split(batch: TokenBatch, plan: MaskPlan) -> tuple[Array, Array]:
    """Gather (visible, masked) token tensors in sorted-index order."""
    _check_plan(plan, batch.n_tokens)
    tokens = batch.tokens
    return tokens[:, plan.visible_idx], tokens[:, plan.masked_idx]


def scatter(visible: Array, masked: Array, plan: MaskPlan) -> Array:
    """Reassemble the full token tensor from its two parts."""
    if visible.shape[1] != plan.n_visible or masked.shape[1] != plan.n_masked:
        raise ContractError(
            f"plan expects {plan.n_visible} visible / {plan.n_masked} masked "
            f"tokens, got {visible.shape[1]} / {masked.shape[1]}"
        )
    _check_plan(plan, plan.n_tokens)
    b = visible.shape[0] if plan.n_visible else masked.shape[0]
    d = visible.shape[2] if plan.n_visible else masked.shape[2]
    out = np.empty((b, plan.n_tokens, d), dtype=np.float64)
    out[:, plan.visible_idx] = visible
    out[:, plan.masked_idx] = masked
    return out


def _check_plan(plan: MaskPlan, n_tokens: int) -> None:
    if plan.n_tokens != n_tokens:
        raise ContractError(
            f"plan covers {plan.n_tokens} tokens but batch has {n_tokens}"
        )
    all_idx = np.concatenate([plan.masked_idx, plan.visible_idx])
    if len(all_idx) and (all_idx.min() < 0 or all_idx.max() >= n_tokens):
        raise ContractError("plan contains out-of-range indices")
    if len(np.unique(all_idx)) != len(all_idx):
        raise ContractError("plan index sets overlap")
