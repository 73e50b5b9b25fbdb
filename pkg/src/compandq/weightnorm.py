"""Limited weight normalization.

Weights are standardized with their sample mean and (population) standard
deviation only inside the quantizer scope, and the standard deviation is
multiplied back onto the quantized result.  The statistics are recomputed on
every forward pass but treated as constants in backward; consequently the
input gradient passes straight through (the sigma factors cancel) while the
learnable quantizer-parameter gradients pick up a sigma factor.

Note the normalization subtracts the mean but never re-adds it: with an
identity quantizer the output is w - mu, not w.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantizer import (
    CompandingState,
    ContractViolation,
    QuantSpec,
    clip_uniform_quantize,
    lcq_forward_requant,
)

__all__ = ["WeightStats", "weight_stats", "lwn_quantize", "standardize"]

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class WeightStats:
    mu: float
    sigma: float


def weight_stats(w) -> WeightStats:
    """Sample mean and population standard deviation, sigma floored at 1e-8
    so degenerate (all-equal) layers stay finite."""
    w = np.asarray(w, dtype=np.float64)
    if w.size < 2:
        raise ContractViolation("weight tensor must have at least 2 elements")
    mu = float(np.mean(w))
    sigma = float(np.sqrt(np.mean((w - mu) ** 2)))
    return WeightStats(mu=mu, sigma=max(sigma, SIGMA_FLOOR))


def standardize(w, stats: WeightStats):
    w = np.asarray(w)
    dt = w.dtype if np.issubdtype(w.dtype, np.floating) else np.float64
    return ((w - dt.type(stats.mu)) / dt.type(stats.sigma)).astype(dt)


def lwn_quantize(
    w,
    state: CompandingState,
    spec: QuantSpec,
    method: str = "lcq",
    restore_sigma: bool = True,
    stats: WeightStats | None = None,
):
    """sigma_w * Q((w - mu_w) / sigma_w) with a signed quantizer Q.

    ``method`` picks the inner quantizer: the re-quantizing companding
    quantizer, or the plain clipped uniform one (the 2-bit fallback, where
    ternary levels leave companding nothing to learn).  ``restore_sigma=False``
    drops the final multiply, reproducing the plain-standardization baseline
    for ablations; that flag is the only code difference between the two.
    """
    if not spec.signed:
        raise ContractViolation("weight quantizers must be signed")
    w = np.asarray(w)
    st = stats if stats is not None else weight_stats(w)
    wn = standardize(w, st)
    if method == "lcq":
        q = lcq_forward_requant(wn, state, spec)
    elif method == "uniform":
        q = clip_uniform_quantize(wn, state.alpha, spec)
    else:
        raise ContractViolation(f"unknown weight-quantizer method {method!r}")
    if not restore_sigma:
        return q
    dt = q.dtype if isinstance(q, np.ndarray) else np.float64
    return np.asarray(q, dtype=dt) * np.asarray(st.sigma, dtype=dt)
