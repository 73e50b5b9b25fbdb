"""Backward pass for the companding quantizer.

The rounding step is handled with a straight-through estimator, so the
parameter gradients combine two paths: the compressed value's dependence on
the slopes/levels before rounding, and the expanded value's dependence after
rounding.  The two paths land in (possibly different) intervals; an indicator
pair (input interval of v, output interval of v_q) selects which table slots
receive contributions.  When rounding pushes v_q to 1, an infinitesimal is
subtracted before the output-interval search so the last interval fires.

Parameter gradients use the quantizer that produced v_q = q_b(f(v)); the
outer re-quantization is straight-through (derivative one) and contributes
nothing here.
"""

from __future__ import annotations

import numpy as np

from .quantizer import (
    CompandingState,
    ContractViolation,
    QuantSpec,
    _interval_index,
    _qb_raw,
    _ret,
    _split,
    compress,
    expand,
)

__all__ = [
    "grad_g_gamma",
    "grad_g_beta",
    "grad_ql_param",
    "grad_ql_theta",
    "grad_ql_alpha",
    "grad_ql_input",
    "accumulate_tensor_grads",
    "compress_partials",
    "expand_partials",
]


def compress_partials(v, state: CompandingState):
    """Partials of the compressing map w.r.t. the raw slope/level tables,
    holding the interval membership of v fixed.

    Returns (d/d gamma_k, d/d beta_k) as length-K vectors; beta_0 is the
    fixed zero, so slot k corresponds to the parameter beta_{k+1}.
    """
    v = float(v)
    gamma, beta, d = state.tables(np.dtype(np.float64))
    k = state.intervals
    a = int(_interval_index(d, np.float64(v), k))
    dg = np.zeros(k)
    db = np.zeros(k)
    dg[a] = v - d[a]
    if a >= 1:
        db[a - 1] = 1.0
    return dg, db


def expand_partials(u, state: CompandingState):
    """Partials of the expanding map w.r.t. the tables, interval fixed."""
    u = float(u)
    gamma, beta, d = state.tables(np.dtype(np.float64))
    k = state.intervals
    c = int(_interval_index(beta, np.float64(u), k))
    dg = np.zeros(k)
    db = np.zeros(k)
    dg[c] = -(u - beta[c]) / gamma[c] ** 2
    if c >= 1:
        db[c - 1] = -1.0 / gamma[c]
    return dg, db


def _vq_with_eps(v, state, spec, dtype):
    """(v_q for gradient formulas, forward companding output g(v)).

    v_q is clamped to 1 - eps when rounding saturates; the forward output is
    exactly 1 there.
    """
    fv = compress(v, state)
    vq = _qb_raw(fv, spec.scale, dtype)
    eps = np.spacing(dtype.type(1))
    sat = vq >= 1
    vq_c = np.where(sat, dtype.type(1) - eps, vq)
    g = np.where(sat, dtype.type(1), expand(np.where(sat, dtype.type(0), vq), state))
    return vq_c, g


def _pair_indices(v, vq, state, dtype):
    gamma, beta, d = state.tables(dtype)
    k = state.intervals
    a = _interval_index(d, v, k)
    c = _interval_index(beta, vq, k)
    return a, c, gamma, beta, d


def grad_g_gamma(v, v_q, state: CompandingState) -> np.ndarray:
    """d g / d gamma_k for scalar v with v_q already eps-corrected.

    Two slots can fire: the input interval of v (straight-through path through
    the compressing slope) and the output interval of v_q (inverse-slope
    path); they coincide and cancel when no interval crossing happened.
    """
    v = float(v)
    v_q = float(v_q)
    a, c, gamma, beta, d = _pair_indices(
        np.float64(v), np.float64(v_q), state, np.dtype(np.float64)
    )
    out = np.zeros(state.intervals)
    out[a] += (v - d[a]) / gamma[c]
    out[c] -= (v_q - beta[c]) / gamma[c] ** 2
    return out


def grad_g_beta(v, v_q, state: CompandingState) -> np.ndarray:
    """d g / d beta_k, same indicator structure as :func:`grad_g_gamma`."""
    v = float(v)
    v_q = float(v_q)
    a, c, gamma, beta, d = _pair_indices(
        np.float64(v), np.float64(v_q), state, np.dtype(np.float64)
    )
    out = np.zeros(state.intervals)
    out[a] += 1.0 / gamma[c]
    out[c] -= 1.0 / gamma[c]
    return out


def _branches(x, state, spec, dtype):
    """Common masks: per-element sign, clipped value, inside/saturated."""
    alpha = dtype.type(state.alpha)
    sgn = np.sign(x)
    if not spec.signed:
        sgn = np.where(x > 0, dtype.type(1), dtype.type(0))
    v = np.abs(x) / alpha
    active = sgn != 0
    inside = (v < 1) & active
    saturated = (v >= 1) & active
    return sgn, v, inside, saturated


def grad_ql_param(x, state: CompandingState, spec: QuantSpec):
    """(d Q / d gamma, d Q / d beta) for scalar x; zero outside the clip."""
    x = float(x)
    k = state.intervals
    arr = np.float64(x)
    dtype = np.dtype(np.float64)
    sgn, v, inside, _ = _branches(arr, state, spec, dtype)
    if not inside:
        return np.zeros(k), np.zeros(k)
    vq, _ = _vq_with_eps(v, state, spec, dtype)
    w = float(sgn) * state.alpha
    return w * grad_g_gamma(v, vq, state), w * grad_g_beta(v, vq, state)


def _chain_theta(d_gamma, d_beta, state, full_jacobian):
    k = state.intervals
    tilde = state.theta_tilde
    if not full_jacobian:
        # per-index chain: d gamma_k / d tilde_k = K, d beta_k / d tilde_k = 1,
        # diagonal softmax derivative
        return (d_gamma * k + d_beta) * tilde * (1.0 - tilde)
    # cross terms: beta_j sums tilde_{i<=j}; softmax couples every pair
    b = d_gamma * k + np.cumsum(d_beta[::-1])[::-1]
    return tilde * (b - np.dot(b, tilde))


def grad_ql_theta(x, state: CompandingState, spec: QuantSpec, full_jacobian=False):
    d_gamma, d_beta = grad_ql_param(x, state, spec)
    return _chain_theta(d_gamma, d_beta, state, full_jacobian)


def grad_ql_alpha(x, state: CompandingState, spec: QuantSpec):
    """Clip-threshold gradient: residual form inside the clip, sign outside.

    Unsigned quantizers emit a constant 0 for x <= 0, so those points
    contribute nothing.
    """
    arr, scalar, dtype = _split(x)
    sgn, v, inside, saturated = _branches(arr, state, spec, dtype)
    vq, g = _vq_with_eps(np.where(inside, v, dtype.type(0)), state, spec, dtype)
    out = np.where(inside, sgn * (g - v), np.where(saturated, sgn, dtype.type(0)))
    return _ret(out, scalar)


def grad_ql_input(x, state: CompandingState, spec: QuantSpec, role="activation"):
    """Straight-through input gradient.

    Activations: 1 strictly inside the clip (0 < x for unsigned), else 0.
    Weights: the clip gradient is not zeroed, so 1 everywhere.
    """
    arr, scalar, dtype = _split(x)
    if role == "weight":
        return _ret(np.ones_like(arr), scalar)
    if spec.signed:
        mask = np.abs(arr) < state.alpha
    else:
        mask = (arr > 0) & (arr < state.alpha)
    return _ret(mask.astype(dtype), scalar)


def accumulate_tensor_grads(
    xs,
    upstream,
    state: CompandingState,
    spec: QuantSpec,
    role="activation",
    full_jacobian=False,
):
    """Elementwise scalar rules summed over a tensor.

    Returns (d_theta float64 (K,), d_alpha float, d_input like xs); the theta
    and alpha sums are weighted by the upstream gradient, d_input is the
    elementwise product with the straight-through mask.  Accumulation happens
    at float64 with a deterministic order.
    """
    xs = np.asarray(xs)
    upstream = np.asarray(upstream)
    if xs.shape != upstream.shape:
        raise ContractViolation(
            f"shape mismatch: xs {xs.shape} vs upstream {upstream.shape}"
        )
    arr, _, dtype = _split(xs)
    up = np.atleast_1d(upstream).astype(dtype, copy=False)
    k = state.intervals
    alpha = state.alpha

    sgn, v, inside, saturated = _branches(arr.ravel(), state, spec, dtype)
    upf = up.ravel()
    sgnf = sgn

    d_input = (grad_ql_input(arr, state, spec, role=role) * up).astype(
        xs.dtype if np.issubdtype(xs.dtype, np.floating) else dtype
    )

    vin = v[inside]
    if vin.size:
        vq, g = _vq_with_eps(vin, state, spec, dtype)
        a, c, gamma, beta, d = _pair_indices(vin, vq, state, dtype)
        w = (upf[inside] * sgnf[inside]).astype(np.float64) * alpha
        gam = gamma.astype(np.float64)
        d_gamma = np.bincount(
            a, weights=w * (vin - d[a]).astype(np.float64) / gam[c], minlength=k
        )
        d_gamma -= np.bincount(
            c, weights=w * (vq - beta[c]).astype(np.float64) / gam[c] ** 2, minlength=k
        )
        d_beta = np.bincount(a, weights=w / gam[c], minlength=k)
        d_beta -= np.bincount(c, weights=w / gam[c], minlength=k)
        d_alpha_in = float(np.sum(upf[inside] * sgnf[inside] * (g - vin), dtype=np.float64))
    else:
        d_gamma = np.zeros(k)
        d_beta = np.zeros(k)
        d_alpha_in = 0.0

    d_alpha = d_alpha_in + float(np.sum(upf[saturated] * sgnf[saturated], dtype=np.float64))
    d_theta = _chain_theta(d_gamma, d_beta, state, full_jacobian)
    return d_theta, d_alpha, d_input.reshape(xs.shape)
