"""Image quality metrics (PSNR, SSIM) and the paired t-test.

SSIM uses the canonical configuration: 11x11 Gaussian window, sigma 1.5,
K1=0.01, K2=0.03, valid-mode windowing (no padding). PSNR of identical
images is reported as the +inf sentinel. Everything is pure float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import stdtr

from .errors import ContractError, DegenerateInputError, ShapeError

Array = np.ndarray

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(reference: Array, test: Array, data_range: float = 2.0) -> float:
    """10*log10(data_range^2 / MSE); +inf when the images are identical."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ShapeError(
            f"psnr needs matching dims, got {reference.shape} vs {test.shape}"
        )
    if data_range <= 0:
        raise ContractError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_kernel_1d() -> Array:
    offsets = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-(offsets**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(image: Array, kernel: Array) -> Array:
    """Separable valid-mode correlation with a 1-d kernel on both axes."""
    rows = sliding_window_view(image, len(kernel), axis=0) @ kernel
    return sliding_window_view(rows, len(kernel), axis=1) @ kernel


def ssim(reference: Array, test: Array, data_range: float = 2.0) -> float:
    """Mean local structural similarity over all valid 11x11 windows."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim needs matching dims, got {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ContractError(
            f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    if data_range <= 0:
        raise ContractError(f"data_range must be positive, got {data_range}")
    kernel = _gaussian_kernel_1d()
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    # identical inputs must yield exactly 1.0, so the three second moments
    # are computed by one shared expression shape
    s_aa = _filter_valid(a * a, kernel) - mu_a * mu_a
    s_bb = _filter_valid(b * b, kernel) - mu_b * mu_b
    s_ab = _filter_valid(a * b, kernel) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t_statistic, p_value)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(
            f"paired_t_test needs two equal-length 1-d sequences, got "
            f"{a.shape} and {b.shape}"
        )
    n = len(a)
    if n < 2:
        raise ContractError(f"paired_t_test needs >= 2 pairs, got {n}")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError(
            "paired differences have zero variance; t statistic undefined"
        )
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    p = 2.0 * float(stdtr(n - 1, -abs(t)))
    return t, p


@dataclass(frozen=True)
class MetricReport:
    """Per-image PSNR/SSIM values with their mean and sample std."""

    psnr_values: tuple[float, ...]
    ssim_values: tuple[float, ...]

    @classmethod
    def from_values(cls, psnr_values, ssim_values) -> "MetricReport":
        return cls(tuple(float(v) for v in psnr_values), tuple(float(v) for v in ssim_values))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def psnr_std(self) -> float:
        return float(np.std(self.psnr_values, ddof=1)) if len(self.psnr_values) > 1 else 0.0

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def ssim_std(self) -> float:
        return float(np.std(self.ssim_values, ddof=1)) if len(self.ssim_values) > 1 else 0.0

    def format_row(self, task: str) -> str:
        """One table row: task, PSNR mean +/- std (dB), SSIM mean +/- std."""
        return (
            f"{task}  PSNR {self.psnr_mean:.4f} ± {self.psnr_std:.4f} dB  "
            f"SSIM {self.ssim_mean:.4f} ± {self.ssim_std:.4f}"
        )
