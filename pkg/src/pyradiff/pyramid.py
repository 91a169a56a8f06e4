"""Multi-resolution image pyramids and the coarse-to-fine merge contract.

Level dims follow the floor recurrence H_n = floor(alpha * H_{n-1}),
W_n likewise, with level 0 the original image. Downsampling is area
averaging when 1/alpha is an integer (anti-aliasing by construction)
and bilinear otherwise; upsampling is bilinear with half-pixel centers.
All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError

Array = np.ndarray


@dataclass(frozen=True)
class Pyramid:
    """Images ordered fine to coarse; levels[0] is the original."""

    levels: tuple[Array, ...]
    alpha: float

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def dims(self) -> tuple[tuple[int, int], ...]:
        return tuple(im.shape for im in self.levels)


@dataclass(frozen=True)
class ConditioningImage:
    """Source image paired with an upsampled coarse reconstruction.

    The coarse channel conditions the denoiser alongside the source; the
    two are never blended arithmetically.
    """

    source: Array
    coarse: Array


def level_dims(height: int, width: int, alpha: float, num_levels: int) -> list[tuple[int, int]]:
    """Dimension chain (H_n, W_n) for n in [0, num_levels)."""
    dims = [(height, width)]
    for _ in range(1, num_levels):
        h, w = dims[-1]
        dims.append((int(np.floor(alpha * h)), int(np.floor(alpha * w))))
    return dims


def _linear_sample(length_src: int, length_dst: int) -> tuple[Array, Array, Array]:
    # half-pixel-center source coordinates, clamped at the borders
    coords = (np.arange(length_dst, dtype=np.float64) + 0.5) * (
        length_src / length_dst
    ) - 0.5
    coords = np.clip(coords, 0.0, length_src - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, length_src - 1)
    frac = coords - lo
    return lo, hi, frac


def _bilinear(image: Array, out_h: int, out_w: int) -> Array:
    r_lo, r_hi, r_frac = _linear_sample(image.shape[0], out_h)
    c_lo, c_hi, c_frac = _linear_sample(image.shape[1], out_w)
    rows = image[r_lo, :] * (1.0 - r_frac)[:, None] + image[r_hi, :] * r_frac[:, None]
    return rows[:, c_lo] * (1.0 - c_frac)[None, :] + rows[:, c_hi] * c_frac[None, :]


def downsample(image: Array, alpha: float) -> Array:
    """Shrink by alpha; block mean when 1/alpha is an integer."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    h, w = image.shape
    out_h = int(np.floor(alpha * h))
    out_w = int(np.floor(alpha * w))
    if out_h < 1 or out_w < 1:
        raise ContractError(
            f"downsample of {h}x{w} by alpha={alpha} collapses below 1 pixel"
        )
    inv = 1.0 / alpha
    k = int(round(inv))
    if abs(inv - k) < 1e-9 and out_h * k == h and out_w * k == w:
        return image.reshape(out_h, k, out_w, k).mean(axis=(1, 3))
    return _bilinear(image, out_h, out_w)


def upsample(image: Array, factor: float, out_dims: tuple[int, int] | None = None) -> Array:
    """Bilinear enlargement by ``factor``; ``out_dims`` pins exact target dims.

    The caller supplies ``out_dims`` when the floor recurrence makes
    round(factor * dim) ambiguous; merge validates the result against the
    finer level.
    """
    if factor <= 1.0:
        raise ContractError(f"upsample factor must exceed 1, got {factor}")
    if out_dims is None:
        out_dims = (
            int(round(image.shape[0] * factor)),
            int(round(image.shape[1] * factor)),
        )
    return _bilinear(image, out_dims[0], out_dims[1])


def merge(coarse_recon: Array, fine_source: Array) -> ConditioningImage:
    """Pair an already-upsampled coarse reconstruction with the fine source."""
    if coarse_recon.shape != fine_source.shape:
        raise ContractError(
            "merge needs matching dims, got coarse "
            f"{coarse_recon.shape} vs source {fine_source.shape}"
        )
    return ConditioningImage(source=fine_source, coarse=coarse_recon)


def decompose(
    image: Array,
    alpha: float,
    num_levels: int,
    patch_size: int | None = None,
) -> Pyramid:
    """Build the fine-to-coarse hierarchy by repeated downsampling.

    When ``patch_size`` is given, every level's dims must be divisible by
    it; the offending level is named otherwise.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    if num_levels < 2:
        raise ConfigurationError(
            f"a pyramid needs at least 2 levels, got {num_levels}"
        )
    if image.ndim != 2:
        raise ContractError(f"expected a 2-d image, got shape {image.shape}")
    levels = [np.asarray(image, dtype=np.float64)]
    for n in range(1, num_levels):
        levels.append(downsample(levels[-1], alpha))
    if patch_size is not None:
        for n, lvl in enumerate(levels):
            h, w = lvl.shape
            if h % patch_size or w % patch_size:
                raise ConfigurationError(
                    f"level {n} dims {h}x{w} are not divisible by patch size "
                    f"{patch_size}"
                )
    return Pyramid(levels=tuple(levels), alpha=alpha)
