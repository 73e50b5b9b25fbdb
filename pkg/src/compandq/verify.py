"""Independent oracles for checking the analytic quantizer paths.

Everything here is deliberately written against different primitives than the
library code it checks: softmax comes from scipy, breakpoint tables are built
with plain Python accumulation, interval lookup is a linear scan, and level
sets are found by brute-force sweeps.  Agreement between these oracles and
the fast paths is what the gradcheck and LUT-check drivers assert.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import softmax as _scipy_softmax

from .quantizer import (
    GAMMA_FLOOR,
    CompandingState,
    QuantSpec,
    clip_uniform_quantize,
    identity_rounding,
    lcq_forward_requant,
    quant_levels,
)

__all__ = [
    "fd_gradient",
    "frozen_weight_stats",
    "fd_check_network",
    "oracle_tables",
    "oracle_compress",
    "oracle_expand",
    "compress_from_tables",
    "expand_from_tables",
    "enumerate_levels_bruteforce",
    "identity_rounding",
    "gradcheck_suite",
    "lut_check_suite",
]


def fd_gradient(fn, point, step=1e-5):
    """Central finite difference (fn(x+h) - fn(x-h)) / 2h at float64."""
    point = float(point)
    step = float(step)
    return (fn(point + step) - fn(point - step)) / (2.0 * step)


def oracle_tables(theta_raw):
    """Breakpoint tables built independently of the library derivation.

    Returns (theta_tilde, gamma, beta, d) as Python lists; beta and d carry
    K+1 entries with leading zeros.
    """
    theta = np.asarray(theta_raw, dtype=np.float64)
    k = theta.size
    delta = 1.0 / k
    tilde = _scipy_softmax(theta)
    gamma = [max(float(t), GAMMA_FLOOR) / delta for t in tilde]
    beta = [0.0]
    for t in tilde:
        beta.append(beta[-1] + float(t))
    d = [i * delta for i in range(k + 1)]
    return [float(t) for t in tilde], gamma, beta, d


def _scan(breaks, v):
    # linear scan over half-open intervals [breaks[i], breaks[i+1})
    i = 0
    while i < len(breaks) - 2 and v >= breaks[i + 1]:
        i += 1
    return i


def compress_from_tables(v, gamma, beta, d):
    """Compressing map evaluated from explicit tables (for perturbation
    tests that move one table entry at a time)."""
    i = _scan(list(d), float(v))
    return gamma[i] * (float(v) - d[i]) + beta[i]


def expand_from_tables(u, gamma, beta, d):
    i = _scan(list(beta), float(u))
    return (float(u) - beta[i]) / gamma[i] + d[i]


def oracle_compress(v, theta_raw):
    _, gamma, beta, d = oracle_tables(theta_raw)
    i = _scan(d, float(v))
    return gamma[i] * (float(v) - d[i]) + beta[i]


def oracle_expand(u, theta_raw):
    _, gamma, beta, d = oracle_tables(theta_raw)
    i = _scan(beta, float(u))
    return (float(u) - beta[i]) / gamma[i] + d[i]


def enumerate_levels_bruteforce(
    state: CompandingState, spec: QuantSpec, grid_n: int = 10**6
) -> np.ndarray:
    """Distinct outputs of the re-quantizing forward over a dense input sweep.

    The sweep covers saturation on both sides; the result must equal
    :func:`compandq.quantizer.quant_levels` exactly.
    """
    hi = 1.05 * state.alpha
    lo = -hi if spec.signed else 0.0
    xs = np.linspace(lo, hi, int(grid_n), dtype=np.float64)
    return np.unique(lcq_forward_requant(xs, state, spec))


# ---------------------------------------------------------------------------
# network-level finite-difference harness

@contextlib.contextmanager
def frozen_weight_stats(model):
    """Pin every quantized layer's normalization statistics.

    Backward treats the weight mean/std as constants, so finite differences
    of the loss only match the analytic gradients when the statistics do not
    drift with the perturbed parameter.
    """
    from .weightnorm import weight_stats

    touched = []
    for layer in model._walk():
        if getattr(layer, "wq", None) is not None:
            layer.frozen_stats = weight_stats(layer.w.val)
            touched.append(layer)
    try:
        yield
    finally:
        for layer in touched:
            layer.frozen_stats = None


def fd_check_network(model, x, labels, step=1e-5, max_per_param=8, rng=None):
    """Central finite differences of the training loss against the analytic
    gradient for a sample of entries of every parameter.

    Returns a list of (param_name, relative_error) pairs, worst first.
    Weight-normalization statistics are frozen for the comparison.
    """
    rng = rng or np.random.default_rng(0)
    with frozen_weight_stats(model):
        model.loss_and_grads(x, labels)
        grads = {p.name: p.grad.copy() for p in model.params()}
        rows = []
        for p in model.params():
            idxs = list(np.ndindex(p.val.shape)) if p.val.ndim else [()]
            if len(idxs) > max_per_param:
                sel = [idxs[i] for i in
                       rng.choice(len(idxs), max_per_param, replace=False)]
            else:
                sel = idxs
            worst = 0.0
            for ix in sel:
                old = p.val[ix]
                p.val[ix] = old + step
                lp = model.loss(x, labels, train=True)
                p.val[ix] = old - step
                lm = model.loss(x, labels, train=True)
                p.val[ix] = old
                fd = (lp - lm) / (2.0 * step)
                an = grads[p.name][ix]
                scale = max(abs(fd), abs(an))
                rel = abs(fd - an) / scale if scale > 1e-8 else 0.0
                worst = max(worst, rel)
            rows.append((p.name, worst))
    return sorted(rows, key=lambda r: -r[1])


# ---------------------------------------------------------------------------
# check-suite drivers (used by the gradcheck / lut check commands)

def _random_state(rng, k=None, alpha_range=(0.5, 4.0)):
    k = k or int(rng.choice([4, 8, 12, 16]))
    theta = rng.normal(0.0, 1.0, size=k)
    alpha = float(rng.uniform(*alpha_range))
    return CompandingState.derive(theta, alpha)


def gradcheck_suite(samples=2000, seed=0):
    """All analytic-vs-oracle gradient checks.

    Returns rows of (check, samples, max_err, threshold, passed).
    """
    from .gradients import (
        compress_partials,
        expand_partials,
        grad_ql_alpha,
        grad_ql_theta,
    )
    from .quantizer import compress, expand, lcq_forward

    rng = np.random.default_rng(seed)
    rows = []

    # 1. identity-rounding null gradients
    worst = 0.0
    with identity_rounding():
        for _ in range(samples // 4):
            state = _random_state(rng)
            spec = QuantSpec(int(rng.choice([2, 3, 4])), bool(rng.choice([True, False])),
                             8, state.intervals)
            x = float(rng.uniform(0.01, 0.99) * state.alpha)
            if spec.signed and rng.random() < 0.5:
                x = -x
            worst = max(worst, float(np.abs(grad_ql_theta(x, state, spec)).max()),
                        abs(float(grad_ql_alpha(x, state, spec))))
    rows.append(("identity_rounding_null_grad", samples // 4, worst, 1e-10,
                 worst < 1e-10))

    # 2. component partials vs central differences on perturbed tables
    margin, step = 1e-3, 1e-6
    worst_c = worst_e = 0.0
    n_pts = 0
    while n_pts < samples // 4:
        state = _random_state(rng)
        k = state.intervals
        v = float(rng.uniform(margin, 1 - margin))
        gamma, beta, d = (state.gamma.copy(), state.beta.copy(), state.d.copy())
        if min(abs(v - b) for b in d) < margin:
            continue
        ag, ab_ = compress_partials(v, state)
        for j in range(k):
            def f_of_gamma(val, j=j):
                g2 = gamma.copy(); g2[j] = val
                return compress_from_tables(v, g2, beta, d)
            fd = fd_gradient(f_of_gamma, gamma[j], step)
            worst_c = max(worst_c, _rel(fd, ag[j]))
            def f_of_beta(val, j=j):
                b2 = beta.copy(); b2[j + 1] = val
                return compress_from_tables(v, gamma, b2, d)
            fd = fd_gradient(f_of_beta, beta[j + 1], step)
            worst_c = max(worst_c, _rel(fd, ab_[j]))
        u = float(rng.uniform(margin, 1 - margin))
        if min(abs(u - b) for b in beta) < margin:
            continue
        eg, eb = expand_partials(u, state)
        for j in range(k):
            def fi_of_gamma(val, j=j):
                g2 = gamma.copy(); g2[j] = val
                return expand_from_tables(u, g2, beta, d)
            fd = fd_gradient(fi_of_gamma, gamma[j], step)
            worst_e = max(worst_e, _rel(fd, eg[j]))
            def fi_of_beta(val, j=j):
                b2 = beta.copy(); b2[j + 1] = val
                return expand_from_tables(u, gamma, b2, d)
            fd = fd_gradient(fi_of_beta, beta[j + 1], step)
            worst_e = max(worst_e, _rel(fd, eb[j]))
        n_pts += 2 * k
    rows.append(("compress_partials_fd", n_pts, worst_c, 1e-5, worst_c < 1e-5))
    rows.append(("expand_partials_fd", n_pts, worst_e, 1e-5, worst_e < 1e-5))

    # 3. inverse property
    worst = 0.0
    for _ in range(64):
        state = _random_state(rng)
        v = rng.uniform(0, 1, size=max(1, samples // 64))
        worst = max(worst, float(np.abs(expand(compress(v, state), state) - v).max()))
    rows.append(("expand_compress_inverse", samples, worst, 1e-12, worst < 1e-12))

    # 4. identity reduction (lcq == clipped uniform, bitwise)
    mism = 0
    for bits in (2, 3, 4):
        for signed in (True, False):
            spec = QuantSpec(bits, signed, 9, 16)
            state = CompandingState.derive(np.zeros(16), 1.3)
            x = rng.uniform(-2, 2, size=samples)
            a = lcq_forward(x, state, spec)
            b = clip_uniform_quantize(x, 1.3, spec)
            mism += int(np.sum(a != b))
    rows.append(("identity_reduction_bitexact", samples * 6, float(mism), 0.0,
                 mism == 0))

    # 5. level enumeration agrees with the closed-form level set
    bad = 0
    for _ in range(8):
        state = _random_state(rng)
        spec = QuantSpec(int(rng.choice([2, 3, 4])), bool(rng.choice([True, False])),
                         8, state.intervals)
        lv = quant_levels(state, spec)
        bf = enumerate_levels_bruteforce(state, spec, 200_000)
        if not np.array_equal(lv, bf):
            bad += 1
    rows.append(("level_enumeration", 8, float(bad), 0.0, bad == 0))

    # 6. toy-network finite differences (float64 rebuild of the same graph)
    from .nn import build_cnn4

    x = rng.normal(0, 1, (3, 1, 8, 8))
    y = rng.integers(0, 5, 3)
    fp = build_cnn4({"method": "fp", "channels": [2, 3, 4], "classes": 5,
                     "image_hw": 8}, seed=1, dtype=np.float64)
    worst_fp = fd_check_network(fp, x, y, rng=rng)[0][1]
    rows.append(("toynet_fd_fp", 1, worst_fp, 1e-2, worst_fp < 1e-2))
    qn = build_cnn4({"method": "lcq", "channels": [2, 3, 4], "classes": 5,
                     "w_bits": 3, "a_bits": 3, "alpha_w": 6.0, "image_hw": 8},
                    seed=2, dtype=np.float64)
    with identity_rounding():
        worst_id = fd_check_network(qn, x, y, rng=rng)[0][1]
    rows.append(("toynet_fd_identity_rounding", 1, worst_id, 1e-6,
                 worst_id < 1e-6))
    return rows


def _rel(fd, an):
    scale = max(abs(fd), abs(an))
    return abs(fd - an) / scale if scale > 1e-9 else 0.0


def lut_check_suite(seed=0, bit_widths=(2, 3, 4), outer_bits=(4, 6, 8)):
    """Integer-vs-float equivalence over bit-width combinations.

    For each (b_w, b_a, b') builds random companding quantizers, checks every
    level-pair product exactly (as rationals) and a randomized small
    convolution end to end.  A side whose b' does not exceed its b uses the
    plain uniform quantizer, whose levels already live on its own lattice.
    Returns rows of (check, cases, max_err, threshold, passed).
    """
    from fractions import Fraction

    from . import lut as lutmod

    rng = np.random.default_rng(seed)
    exact_bad = 0
    conv_worst = 0.0
    cases = 0
    for b_w in bit_widths:
        for b_a in bit_widths:
            for bp in outer_bits:
                cases += 1
                alpha_w = float(rng.uniform(0.5, 3.0))
                alpha_a = float(rng.uniform(0.5, 3.0))
                sigma = float(rng.uniform(0.05, 1.5))
                w_levels, s_w, ob_w = _side_levels(rng, b_w, bp, alpha_w, True)
                a_levels, s_a, ob_a = _side_levels(rng, b_a, bp, alpha_a, False)
                lut = lutmod.build_lut(w_levels, a_levels, ob_w, ob_a,
                                       sigma_w=sigma)
                # exact rational product equality for every pair
                num_w = np.round(np.sort(w_levels[w_levels > 0]) / w_levels.max()
                                 * s_w).astype(int)
                num_a = np.round(np.sort(a_levels[a_levels > 0]) / a_levels.max()
                                 * s_a).astype(int)
                resc = (Fraction(float(w_levels.max())) * Fraction(float(a_levels.max()))
                        * Fraction(sigma) / (s_w * s_a))
                for i, nw in enumerate(num_w):
                    for j, na in enumerate(num_a):
                        lhs = int(lut.entries[i, j]) * resc
                        rhs = ((Fraction(float(w_levels.max())) * int(nw) / s_w)
                               * (Fraction(float(a_levels.max())) * int(na) / s_a)
                               * Fraction(sigma))
                        if lhs != rhs:
                            exact_bad += 1
                # randomized conv
                cb_w = lutmod.LevelCodebook.from_levels(w_levels, s_w, True)
                cb_w = _scaled(cb_w, sigma)
                cb_a = lutmod.LevelCodebook.from_levels(a_levels, s_a, False)
                w = rng.choice(w_levels, size=(3, 2, 3, 3)) * sigma
                a = rng.choice(a_levels, size=(2, 2, 6, 6))
                y_int = lutmod.lut_infer_conv2d(cb_w.encode(w), cb_a.encode(a),
                                                lut, stride=1, pad=1)
                y_ref = _conv_ref(a, w)
                scale = np.abs(y_ref).max()
                err = np.abs(y_int.astype(np.float64) - y_ref).max() / max(scale, 1e-12)
                conv_worst = max(conv_worst, float(err))
    rows = [
        ("lut_pair_products_exact", cases, float(exact_bad), 0.0, exact_bad == 0),
        ("lut_conv_equivalence", cases, conv_worst, 1e-5, conv_worst < 1e-5),
    ]
    return rows


def _scaled(cb, sigma):
    import dataclasses

    return dataclasses.replace(cb, scale=cb.scale * sigma)


def _side_levels(rng, bits, outer, alpha, signed):
    """Level list, lattice denominator, and effective outer bits for one
    side.  Falls back to the uniform quantizer when outer <= bits."""
    from .quantizer import scale_factor

    if outer > bits:
        state = CompandingState.derive(rng.normal(0, 1, 8), alpha)
        spec = QuantSpec(bits, signed, outer, 8)
        return quant_levels(state, spec), spec.outer_scale, outer
    s = scale_factor(bits, signed)
    mags = np.arange(s + 1, dtype=np.float64) / s * alpha
    if signed:
        levels = np.unique(np.concatenate([-mags, mags])) + 0.0
    else:
        levels = mags
    return levels, s, bits


def _conv_ref(a, w):
    """Plain float64 convolution (stride 1, pad 1) used as the reference."""
    from ._conv import unfold

    n, c, h, wd = a.shape
    f = w.shape[0]
    cols = unfold(a.astype(np.float64), w.shape[2], w.shape[3], 1, 1)
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * wd, -1)
    y = mat @ w.astype(np.float64).reshape(f, -1).T
    return y.reshape(n, h, wd, f).transpose(0, 3, 1, 2)
