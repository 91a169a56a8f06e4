"""Cross-granularity regularization: MMD between noise sample sets.

Each pyramid level contributes the squared maximum mean discrepancy
(V-statistic, mixture-of-RBF kernel) between the predicted-noise vectors
and the true injected Gaussian noise vectors. Bandwidths come from the
median heuristic by default and never carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor, exp, matmul, tmean, transpose, tsum

Array = np.ndarray


@dataclass(frozen=True)
class KernelSpec:
    """Mixture-of-RBF kernel description.

    With ``bandwidths`` None, each call resolves them as
    ``median_multipliers`` times the median pairwise distance of the
    pooled samples.
    """

    bandwidths: tuple[float, ...] | None = None
    median_multipliers: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        if self.bandwidths is not None and any(b <= 0 for b in self.bandwidths):
            raise ContractError(f"bandwidths must be positive, got {self.bandwidths}")
        if self.bandwidths is None and any(m <= 0 for m in self.median_multipliers):
            raise ContractError(
                f"median multipliers must be positive, got {self.median_multipliers}"
            )


@dataclass(frozen=True)
class GranularityLossReport:
    """Per-level mmd2 values and their weighted sum (a live Tensor)."""

    per_level: tuple[float, ...]
    weight: float
    combined: Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _median_pairwise_distance(pooled: Array) -> float:
    """Median over all i<j Euclidean distances, computed order-independently.

    Squared distances use explicit differences so d(i,j) == d(j,i) bitwise
    and the multiset is invariant to sample order; chunking bounds memory.
    """
    n = pooled.shape[0]
    dists: list[Array] = []
    chunk = max(1, int(2**22 // max(1, pooled.shape[1] * n)))
    for start in range(0, n - 1, chunk):
        stop = min(start + chunk, n - 1)
        block = pooled[start:stop, None, :] - pooled[None, start + 1 :, :]
        d2 = np.sum(block * block, axis=-1)
        # keep strictly-upper-triangular entries of the full matrix
        rows = np.arange(start, stop)[:, None]
        cols = np.arange(start + 1, n)[None, :]
        dists.append(d2[cols > rows])
    if not dists:
        return 1.0
    med = float(np.median(np.sqrt(np.concatenate(dists))))
    return med if med > 0.0 else 1.0


def resolve_bandwidths(a: Array, b: Array, spec: KernelSpec) -> tuple[float, ...]:
    if spec.bandwidths is not None:
        return tuple(spec.bandwidths)
    med = _median_pairwise_distance(np.concatenate([a, b], axis=0))
    return tuple(m * med for m in spec.median_multipliers)


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    aa = tsum(a * a, axis=1, keepdims=True)            # (n, 1)
    bb = transpose(tsum(b * b, axis=1, keepdims=True), (1, 0))  # (1, m)
    cross = matmul(a, transpose(b, (1, 0)))
    return aa + bb - 2.0 * cross


def rbf_kernel_gram(a, b, spec: KernelSpec) -> Tensor:
    """Sum over bandwidths of exp(-||a_i - b_j||^2 / (2 sigma^2))."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ContractError(
            f"kernel inputs must be (n, d)/(m, d), got {a.data.shape} and {b.data.shape}"
        )
    bandwidths = resolve_bandwidths(a.data, b.data, spec)
    d2 = _sq_dists(a, b)
    gram = None
    for sigma in bandwidths:
        term = exp(d2 * (-0.5 / (sigma * sigma)))
        gram = term if gram is None else gram + term
    return gram


def mmd2(a, b, spec: KernelSpec) -> Tensor:
    """Squared MMD V-statistic: mean K_aa - 2 mean K_ab + mean K_bb.

    The cross term averages gram(a, b) and gram(b, a) so the result is
    bitwise symmetric in its arguments. Bandwidths are resolved once from
    the pooled inputs and shared by all three Gram matrices.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    n = a.data.shape[0] if a.data.ndim == 2 else 0
    m = b.data.shape[0] if b.data.ndim == 2 else 0
    if n < 2 or m < 2:
        raise ContractError(f"mmd2 needs >= 2 samples per set, got n={n}, m={m}")
    if a.data.shape[1] != b.data.shape[1]:
        raise ContractError(
            f"mmd2 feature dims disagree: {a.data.shape} vs {b.data.shape}"
        )
    resolved = KernelSpec(bandwidths=resolve_bandwidths(a.data, b.data, spec))
    t_aa = tmean(rbf_kernel_gram(a, a, resolved))
    t_bb = tmean(rbf_kernel_gram(b, b, resolved))
    t_ab = (tmean(rbf_kernel_gram(a, b, resolved)) + tmean(rbf_kernel_gram(b, a, resolved))) / 2.0
    return t_aa + t_bb - 2.0 * t_ab


def cgr_loss(
    eps_hat_per_level,
    eps_true_per_level,
    spec: KernelSpec,
    weight: float,
) -> GranularityLossReport:
    """Weighted sum of per-level mmd2 terms; weight 0 gates everything off."""
    if len(eps_hat_per_level) != len(eps_true_per_level):
        raise ContractError(
            f"level count mismatch: {len(eps_hat_per_level)} predicted vs "
            f"{len(eps_true_per_level)} reference"
        )
    if weight < 0:
        raise ContractError(f"cgr weight must be nonnegative, got {weight}")
    num_levels = len(eps_hat_per_level)
    if weight == 0.0:
        return GranularityLossReport(
            per_level=(0.0,) * num_levels, weight=0.0, combined=Tensor(0.0)
        )
    if num_levels < 2:
        raise ContractError(
            f"cross-granularity loss needs >= 2 levels, got {num_levels}"
        )
    per_level: list[float] = []
    total: Tensor | None = None
    for eps_hat, eps_true in zip(eps_hat_per_level, eps_true_per_level):
        term = mmd2(eps_hat, eps_true, spec)
        per_level.append(term.item())
        total = term if total is None else total + term
    return GranularityLossReport(
        per_level=tuple(per_level), weight=weight, combined=total * weight
    )
