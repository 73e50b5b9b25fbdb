"""Forward-path quantizers: uniform, learnable companding, and the re-quantized
variant used for LUT-friendly inference.

A companding quantizer squeezes a clipped input through a monotone piecewise
linear "compressing" map, rounds uniformly, and stretches the result back
through the exact inverse ("expanding") map.  The slopes of the compressing
map are trainable, so the effective quantization levels are non-uniform and
learned.  All functions here are pure with respect to (value, state); a
``CompandingState`` is immutable after :meth:`CompandingState.derive`.

Precision convention: derived tables are stored at float64 with cached float32
copies; every function computes in the dtype of its input, so the neural-net
engine runs at float32 while oracle and gradient checks re-run the identical
code paths at float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContractViolation",
    "ParameterCorruption",
    "InternalConsistencyError",
    "QuantSpec",
    "CompandingState",
    "identity_state",
    "GAMMA_FLOOR",
    "scale_factor",
    "uniform_quantize",
    "clip_uniform_quantize",
    "compress",
    "expand",
    "compand",
    "lcq_forward",
    "lcq_forward_requant",
    "quant_levels",
    "identity_rounding",
    "identity_rounding_active",
    "quantizer_record",
    "parse_quantizer_record",
]


class ContractViolation(ValueError):
    """An argument violated a documented precondition."""


class ParameterCorruption(ValueError):
    """Learnable parameters contain non-finite values."""


class InternalConsistencyError(RuntimeError):
    """Two internal representations that must agree do not."""


# Slopes are computed from softmax outputs clamped to at least this value,
# guarding the divisions in expand() and the gradients against blow-up.
GAMMA_FLOOR = 1e-6


def scale_factor(bits: int, signed: bool) -> int:
    """Integer lattice denominator: 2^(b-1)-1 signed, 2^b-1 unsigned."""
    if bits < 1:
        raise ContractViolation(f"bits must be >= 1, got {bits}")
    return (1 << (bits - 1)) - 1 if signed else (1 << bits) - 1


@dataclass(frozen=True)
class QuantSpec:
    """Static quantizer configuration.

    ``outer_bits`` is the finer lattice used to re-quantize companding
    outputs so LUT entries become small integers; it must exceed ``bits``.
    """

    bits: int
    signed: bool
    outer_bits: int = 8
    intervals: int = 16

    def __post_init__(self):
        if self.bits < 2:
            raise ContractViolation(f"bits must be >= 2, got {self.bits}")
        if self.outer_bits <= self.bits:
            raise ContractViolation(
                f"outer_bits must exceed bits, got {self.outer_bits} <= {self.bits}"
            )
        if self.intervals < 1:
            raise ContractViolation(f"intervals must be >= 1, got {self.intervals}")

    @property
    def scale(self) -> int:
        return scale_factor(self.bits, self.signed)

    @property
    def outer_scale(self) -> int:
        return scale_factor(self.outer_bits, self.signed)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class CompandingState:
    """Learnable parameters and the tables derived from them.

    ``theta_raw`` are the unconstrained companding parameters, ``alpha`` the
    clipping threshold.  Derived: ``theta_tilde`` (softmax of theta_raw),
    per-interval slopes ``gamma``, output-level breakpoints ``beta`` (K+1
    entries, beta[0] = 0), input breakpoints ``d`` (K+1 entries, d[0] = 0),
    and the interval width ``delta`` = 1/K.
    """

    theta_raw: np.ndarray
    alpha: float
    theta_tilde: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    d: np.ndarray = field(repr=False)
    delta: float = field(repr=False)
    _tables32: tuple = field(repr=False, compare=False, default=None)

    @classmethod
    def derive(cls, theta_raw, alpha=1.0) -> "CompandingState":
        theta_raw = np.atleast_1d(np.asarray(theta_raw, dtype=np.float64)).copy()
        if theta_raw.ndim != 1 or theta_raw.size < 1:
            raise ContractViolation("theta_raw must be a non-empty 1-d vector")
        if not np.all(np.isfinite(theta_raw)):
            raise ParameterCorruption("theta_raw contains non-finite values")
        alpha = float(alpha)
        if not np.isfinite(alpha) or alpha <= 0:
            raise ParameterCorruption(f"alpha must be finite and > 0, got {alpha}")

        k = theta_raw.size
        delta = 1.0 / k
        theta_tilde = _softmax(theta_raw)
        gamma = np.maximum(theta_tilde, GAMMA_FLOOR) / delta
        # Both breakpoint arrays are running sums so that theta_raw == 0
        # makes beta bitwise identical to d (the identity-state reduction
        # then holds exactly, not just to rounding error).
        beta = np.concatenate(([0.0], np.cumsum(theta_tilde)))
        d = np.concatenate(([0.0], np.cumsum(np.full(k, delta))))
        for arr in (theta_raw, theta_tilde, gamma, beta, d):
            arr.setflags(write=False)
        tables32 = tuple(a.astype(np.float32) for a in (gamma, beta, d))
        for arr in tables32:
            arr.setflags(write=False)
        return cls(
            theta_raw=theta_raw,
            alpha=alpha,
            theta_tilde=theta_tilde,
            gamma=gamma,
            beta=beta,
            d=d,
            delta=delta,
            _tables32=tables32,
        )

    @property
    def intervals(self) -> int:
        return self.theta_raw.size

    def tables(self, dtype) -> tuple:
        """(gamma, beta, d) in the requested float dtype."""
        if np.dtype(dtype) == np.float32:
            return self._tables32
        return self.gamma, self.beta, self.d

    def with_params(self, theta_raw=None, alpha=None) -> "CompandingState":
        return CompandingState.derive(
            self.theta_raw if theta_raw is None else theta_raw,
            self.alpha if alpha is None else alpha,
        )


def identity_state(intervals: int = 16, alpha: float = 1.0) -> CompandingState:
    """State with all-zero companding parameters (uniform levels)."""
    return CompandingState.derive(np.zeros(intervals), alpha)


# ---------------------------------------------------------------------------
# rounding-mode toggle (used by the null-gradient oracle checks)

_identity_rounding = threading.local()


def identity_rounding_active() -> bool:
    return getattr(_identity_rounding, "on", False)


@contextlib.contextmanager
def identity_rounding():
    """Swap every rounding step for the identity within this context.

    With rounding disabled the companding quantizer reduces to the exact
    identity inside the clip range, which is what the null-gradient and
    smooth finite-difference checks rely on.  Not safe to toggle while other
    threads quantize.
    """
    prev = identity_rounding_active()
    _identity_rounding.on = True
    try:
        yield
    finally:
        _identity_rounding.on = prev


# ---------------------------------------------------------------------------
# helpers

def _split(x):
    arr = np.asarray(x)
    scalar = arr.ndim == 0
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return np.atleast_1d(arr), scalar, arr.dtype


def _ret(out, scalar):
    return out[()] if not scalar else out.reshape(())[()]


def _round_half_away(x):
    # np.round ties to even; the documented tie rule here is away from zero.
    return np.floor(x + 0.5)


def _qb_raw(v, s, dtype):
    """round(s*v)/s without domain validation; tolerates v == 1."""
    if identity_rounding_active():
        return v
    s = dtype.type(s)
    return _round_half_away(v * s) / s


def _check_unit_domain(v, name):
    if v.size and (np.any(v < 0) or np.any(v >= 1) or not np.all(np.isfinite(v))):
        raise ContractViolation(f"{name} must lie in [0, 1)")


def _interval_index(breaks, v, n):
    """0-based index i such that v is in [breaks[i], breaks[i+1])."""
    idx = np.searchsorted(breaks, v, side="right") - 1
    return np.clip(idx, 0, n - 1)


# ---------------------------------------------------------------------------
# operations

def uniform_quantize(v, s):
    """Map v in [0, 1) onto the lattice {0, 1/s, ..., 1} by rounding s*v.

    Ties round away from zero.  With identity rounding active this is the
    identity map.
    """
    if s <= 0 or int(s) != s:
        raise ContractViolation(f"s must be a positive integer, got {s}")
    arr, scalar, dtype = _split(v)
    _check_unit_domain(arr, "v")
    return _ret(_qb_raw(arr, int(s), dtype), scalar)


def clip_uniform_quantize(x, alpha, spec: QuantSpec):
    """Clipped uniform quantizer: sgn(x) * alpha * q_b(|x|/alpha), saturating
    at +/- alpha.  Unsigned specs send x <= 0 to 0."""
    if not (alpha > 0):
        raise ContractViolation(f"alpha must be > 0, got {alpha}")
    arr, scalar, dtype = _split(x)
    alpha = dtype.type(alpha)
    mag = np.abs(arr)
    sgn = np.sign(arr)
    if not spec.signed:
        sgn = np.where(arr > 0, dtype.type(1), dtype.type(0))
    v = mag / alpha
    inside = v < 1
    q = _qb_raw(np.where(inside, v, dtype.type(0)), spec.scale, dtype)
    out = sgn * alpha * np.where(inside, q, dtype.type(1))
    return _ret(out.astype(dtype, copy=False), scalar)


def compress(v, state: CompandingState):
    """Piecewise linear compressing map on [0, 1): slope gamma_k on the k-th
    equal-width input interval."""
    arr, scalar, dtype = _split(v)
    _check_unit_domain(arr, "v")
    gamma, beta, d = state.tables(dtype)
    i = _interval_index(d, arr, state.intervals)
    out = gamma[i] * (arr - d[i]) + beta[i]
    return _ret(out, scalar)


def expand(u, state: CompandingState):
    """Exact inverse of :func:`compress` over the output intervals
    [beta_{k-1}, beta_k).  Out-of-range u is clamped into [0, 1 - eps)
    before the interval search."""
    arr, scalar, dtype = _split(u)
    eps = np.spacing(dtype.type(1))
    arr = np.clip(arr, dtype.type(0), dtype.type(1) - eps)
    gamma, beta, d = state.tables(dtype)
    i = _interval_index(beta, arr, state.intervals)
    out = (arr - beta[i]) / gamma[i] + d[i]
    return _ret(out, scalar)


def compand(v, state: CompandingState, spec: QuantSpec):
    """Companding map g = expand . q_b . compress on [0, 1).

    Rounding can push the compressed value to 1, outside expand's half-open
    domain; that output is the exact saturation level, so g returns 1 there
    (the continuous extension of the inverse, which also keeps the reduction
    to the plain uniform quantizer bit-exact for identity states).
    """
    arr, scalar, dtype = _split(v)
    _check_unit_domain(arr, "v")
    fv = compress(arr, state)
    vq = _qb_raw(fv, spec.scale, dtype)
    sat = vq >= 1
    out = np.where(sat, dtype.type(1), expand(np.where(sat, dtype.type(0), vq), state))
    return _ret(out, scalar)


def _clipped_apply(x, alpha, spec, inner, dtype_sign=True):
    arr, scalar, dtype = _split(x)
    alpha = dtype.type(alpha)
    mag = np.abs(arr)
    sgn = np.sign(arr)
    if not spec.signed:
        sgn = np.where(arr > 0, dtype.type(1), dtype.type(0))
    v = mag / alpha
    inside = v < 1
    g = inner(np.where(inside, v, dtype.type(0)), dtype)
    out = sgn * alpha * np.where(inside, g, dtype.type(1))
    return _ret(out.astype(dtype, copy=False), scalar)


def lcq_forward(x, state: CompandingState, spec: QuantSpec):
    """Companding quantizer: sgn(x) * alpha * g(|x|/alpha), saturating at
    +/- alpha; unsigned specs send x <= 0 to 0."""
    return _clipped_apply(
        x, state.alpha, spec, lambda v, dt: compand(v, state, spec)
    )


def lcq_forward_requant(x, state: CompandingState, spec: QuantSpec):
    """Companding quantizer with outer re-quantization: the companding output
    is rounded once more on the finer 1/s' lattice so every emitted level is
    an exact small-integer multiple of alpha/s'."""

    def inner(v, dtype):
        g = compand(v, state, spec)
        return _qb_raw(g, spec.outer_scale, dtype)

    return _clipped_apply(x, state.alpha, spec, inner)


def quant_levels(state: CompandingState, spec: QuantSpec) -> np.ndarray:
    """Every representable output of :func:`lcq_forward_requant`, strictly
    increasing, at float64.

    Unsigned: the expanded image of each inner lattice point, re-quantized on
    the outer lattice, plus the saturation level alpha (which coincides with
    the top lattice point).  Signed: the symmetric closure with a single zero.
    """
    s = spec.scale
    sp = spec.outer_scale
    inner = np.arange(s, dtype=np.float64) / s
    g = expand(inner, state)
    g = np.concatenate([g, [1.0]])
    mags = np.unique(_round_half_away(g * sp) / sp) * state.alpha
    if not spec.signed:
        return mags
    return np.unique(np.concatenate([-mags, mags])) + 0.0


# ---------------------------------------------------------------------------
# flat per-quantizer record (shared with the LUT engine and reporting)

_ROLES = ("weight", "activation")
_METHODS = ("lcq", "uniform")


def quantizer_record(
    layer_id: str, role: str, method: str, spec: QuantSpec, state: CompandingState
) -> str:
    """One-line text record:

    ``layer_id,role,method,b,b',K,alpha,theta_0,...,theta_{K-1}``
    """
    if role not in _ROLES:
        raise ContractViolation(f"role must be one of {_ROLES}")
    if method not in _METHODS:
        raise ContractViolation(f"method must be one of {_METHODS}")
    if "," in layer_id:
        raise ContractViolation("layer_id must not contain commas")
    theta = ",".join(repr(float(t)) for t in state.theta_raw)
    return (
        f"{layer_id},{role},{method},{spec.bits},{spec.outer_bits},"
        f"{state.intervals},{state.alpha!r},{theta}"
    )


def parse_quantizer_record(line: str):
    """Inverse of :func:`quantizer_record`.

    Returns (layer_id, role, method, spec, state); the spec is signed for
    weights and unsigned for activations.
    """
    parts = line.strip().split(",")
    if len(parts) < 8:
        raise ContractViolation(f"malformed quantizer record: {line!r}")
    layer_id, role, method = parts[0], parts[1], parts[2]
    if role not in _ROLES or method not in _METHODS:
        raise ContractViolation(f"malformed quantizer record: {line!r}")
    bits, outer_bits, k = int(parts[3]), int(parts[4]), int(parts[5])
    alpha = float(parts[6])
    theta = np.array([float(t) for t in parts[7:]], dtype=np.float64)
    if theta.size != k:
        raise ContractViolation(
            f"record declares K={k} but carries {theta.size} parameters"
        )
    spec = QuantSpec(bits=bits, signed=(role == "weight"), outer_bits=outer_bits,
                     intervals=k)
    return layer_id, role, method, spec, CompandingState.derive(theta, alpha)
