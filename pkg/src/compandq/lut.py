"""Lookup-table integer inference.

After outer re-quantization every quantized weight magnitude is an exact
multiple of (sigma_w * alpha_w) / s'_w and every activation level a multiple
of alpha_a / s'_a, so each weight*activation product is an integer times one
layer-constant rescale factor.  The table stores those integer products for
all nonzero level pairs; signs ride separately and zeros are skipped, which
is why the table only needs (2^(b_w-1)-1) * (2^b_a - 1) entries.  Convolution
and fully-connected layers then run as table gathers plus int32 sums, with
one float multiply per output at the end.

Uniform (non-companding) layers fit the same scheme with the outer lattice
equal to their own lattice, since their levels are already small rationals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._conv import unfold
from .quantizer import ContractViolation, InternalConsistencyError, scale_factor

__all__ = [
    "Lut",
    "EncodedTensor",
    "LevelCodebook",
    "lut_element_count",
    "lut_memory_bytes",
    "build_lut",
    "lut_infer_conv2d",
    "lut_infer_fc",
    "lut_infer_layer",
    "write_lut",
    "read_lut",
]

_LUT_MAGIC = b"CQLT"
_LUT_VERSION = 1
_ACC_LIMIT = 2**31

# numerator extraction must land this close to an integer (float32 forward
# values carry a few ulp of noise)
_LATTICE_TOL = 1e-3


def lut_element_count(b_w: int, b_a: int) -> int:
    """Nonzero (weight magnitude, activation level) pairs: signs ride
    separately and zeros are skipped."""
    return (2 ** (b_w - 1) - 1) * (2**b_a - 1)


def lut_memory_bytes(b_w: int, b_a: int, outer_b_w: int, outer_b_a: int) -> float:
    """Table bytes: each entry needs outer_b_w + outer_b_a bits."""
    if min(b_w, b_a, outer_b_w, outer_b_a) < 2:
        raise ContractViolation("bit-widths must be >= 2")
    return (outer_b_w + outer_b_a) * lut_element_count(b_w, b_a) / 8.0


@dataclass(frozen=True)
class Lut:
    """Integer product table plus the scalar that undoes all fixed factors
    (alpha_w * alpha_a * sigma_w / (s'_w * s'_a)) after accumulation."""

    entries: np.ndarray  # int32, (m_w, m_a)
    rescale: float
    b_w: int
    b_a: int
    outer_b_w: int
    outer_b_a: int

    @property
    def m_w(self) -> int:
        return self.entries.shape[0]

    @property
    def m_a(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class LevelCodebook:
    """Maps quantized values to small-integer codes and back.

    ``scale`` is the value of the top level (alpha, times sigma_w for
    weights); ``numerators`` holds the integer lattice codes of the nonzero
    magnitudes in increasing order.
    """

    scale: float
    s_prime: int
    numerators: np.ndarray  # int64, strictly increasing, >= 1
    signed: bool

    @classmethod
    def from_levels(cls, levels, s_prime: int, signed: bool) -> "LevelCodebook":
        nums, scale = _numerators(levels, s_prime, "codebook")
        return cls(scale=scale, s_prime=s_prime, numerators=nums, signed=signed)

    def _code_of_numerator(self) -> np.ndarray:
        lut = np.full(self.s_prime + 1, -1, dtype=np.int16)
        lut[self.numerators] = np.arange(self.numerators.size, dtype=np.int16)
        return lut

    def encode(self, values) -> "EncodedTensor":
        values = np.asarray(values)
        n_real = values.astype(np.float64) / self.scale * self.s_prime
        n = np.round(n_real).astype(np.int64)
        if np.any(np.abs(n_real - n) > _LATTICE_TOL * self.s_prime):
            raise InternalConsistencyError("values are not quantizer outputs")
        signs = np.sign(n).astype(np.int8)
        mag = np.abs(n)
        if mag.max(initial=0) > self.s_prime:
            raise InternalConsistencyError("value beyond the top level")
        zero = mag == 0
        codes = self._code_of_numerator()[mag]
        if np.any(codes[~zero] < 0):
            raise InternalConsistencyError("value not in the level set")
        codes[zero] = 0
        return EncodedTensor(
            codes=codes.astype(np.uint8), zero=zero, signs=signs, codebook=self
        )


@dataclass(frozen=True)
class EncodedTensor:
    """Quantized tensor as level indices, with zero mask and sign plane."""

    codes: np.ndarray  # uint8, index into the nonzero level list
    zero: np.ndarray  # bool
    signs: np.ndarray  # int8 in {-1, 0, +1}
    codebook: LevelCodebook

    @property
    def shape(self):
        return self.codes.shape

    def decode(self, dtype=np.float64) -> np.ndarray:
        cb = self.codebook
        vals = cb.numerators[self.codes].astype(np.float64) / cb.s_prime * cb.scale
        vals = np.where(self.zero, 0.0, vals * self.signs)
        return vals.astype(dtype)


def _numerators(levels, s_prime, what):
    """Integer lattice codes of the positive levels in a full level list."""
    levels = np.asarray(levels, dtype=np.float64)
    top = levels.max(initial=0.0)
    if top <= 0:
        raise ContractViolation(f"{what} levels must include a positive top level")
    pos = np.sort(levels[levels > 0])
    n_real = pos / top * s_prime
    n = np.round(n_real).astype(np.int64)
    if (
        np.any(np.abs(n_real - n) > _LATTICE_TOL * s_prime)
        or np.any(n < 1)
        or np.any(n > s_prime)
    ):
        raise InternalConsistencyError(
            f"{what} levels do not lie on the 1/{s_prime} lattice"
        )
    if np.unique(n).size != n.size:
        raise InternalConsistencyError(f"duplicate {what} levels after encoding")
    return n, float(top)


def build_lut(
    w_levels,
    a_levels,
    outer_b_w: int,
    outer_b_a: int,
    sigma_w: float = 1.0,
) -> Lut:
    """Tabulate integer products for every nonzero level pair.

    ``w_levels``/``a_levels`` are the representable quantizer outputs (the
    signed weight list carries negatives; only positive magnitudes are
    stored).  ``sigma_w`` folds the weight-normalization restore factor into
    the rescale.
    """
    s_w = scale_factor(outer_b_w, signed=True)
    s_a = scale_factor(outer_b_a, signed=False)
    num_w, alpha_w = _numerators(w_levels, s_w, "weight")
    num_a, alpha_a = _numerators(a_levels, s_a, "activation")
    entries = np.outer(num_w, num_a)
    if entries.max(initial=0) >= 2 ** (outer_b_w + outer_b_a):
        raise InternalConsistencyError("table entry exceeds its declared bit-width")
    b_w = int(np.ceil(np.log2(num_w.size + 1))) + 1
    b_a = int(np.ceil(np.log2(num_a.size + 1)))
    rescale = alpha_w * alpha_a * float(sigma_w) / (s_w * s_a)
    return Lut(
        entries=entries.astype(np.int32),
        rescale=rescale,
        b_w=b_w,
        b_a=b_a,
        outer_b_w=outer_b_w,
        outer_b_a=outer_b_a,
    )


def _check_acc_bound(lut: Lut, taps: int):
    peak = taps * int(lut.entries.max(initial=0))
    if peak >= _ACC_LIMIT:
        raise InternalConsistencyError(
            f"int32 accumulator could overflow: {taps} taps x max entry "
            f"{lut.entries.max(initial=0)}"
        )


def _gather_accumulate(lut, w_codes, w_zero, w_signs, a_codes, a_zero):
    """Core integer accumulation over (P positions, T taps, F filters).

    Zero-weight taps are dropped from the gather index set; zero activations
    are masked per position.  Each output is an ordered int32 sum of signed
    table entries.
    """
    f, t = w_codes.shape
    _check_acc_bound(lut, t)
    p = a_codes.shape[0]
    out = np.empty((p, f), dtype=np.int32)
    a_live = ~a_zero
    for fi in range(f):
        idx = np.nonzero(~w_zero[fi])[0]
        if idx.size == 0:
            out[:, fi] = 0
            continue
        gathered = lut.entries[w_codes[fi, idx][None, :], a_codes[:, idx]]
        term = gathered * w_signs[fi, idx].astype(np.int32)[None, :]
        out[:, fi] = np.sum(
            np.where(a_live[:, idx], term, 0), axis=1, dtype=np.int32
        )
    return out


def lut_infer_conv2d(
    w_enc: EncodedTensor, a_enc: EncodedTensor, lut: Lut, stride=1, pad=0
) -> np.ndarray:
    """Convolution by table gathers: zeros skipped, weight signs applied,
    one rescale multiply per output.  Returns float32 (N, F, Ho, Wo)."""
    f, c, kh, kw = w_enc.shape
    n = a_enc.shape[0]
    cols = unfold(a_enc.codes, kh, kw, stride, pad, fill=0)
    zcols = unfold(a_enc.zero, kh, kw, stride, pad, fill=True)
    ho, wo = cols.shape[-2:]
    t = c * kh * kw
    a_codes = cols.transpose(0, 4, 5, 1, 2, 3).reshape(-1, t)
    a_zero = zcols.transpose(0, 4, 5, 1, 2, 3).reshape(-1, t)
    acc = _gather_accumulate(
        lut,
        w_enc.codes.reshape(f, t),
        w_enc.zero.reshape(f, t),
        w_enc.signs.reshape(f, t),
        a_codes,
        a_zero,
    )
    out = acc.astype(np.float64) * lut.rescale
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2).astype(np.float32)


def lut_infer_fc(w_enc: EncodedTensor, a_enc: EncodedTensor, lut: Lut) -> np.ndarray:
    """Fully-connected layer by table gathers.  Returns float32 (N, F)."""
    f, t = w_enc.shape
    acc = _gather_accumulate(
        lut,
        w_enc.codes,
        w_enc.zero,
        w_enc.signs,
        a_enc.codes.reshape(-1, t),
        a_enc.zero.reshape(-1, t),
    )
    return (acc.astype(np.float64) * lut.rescale).astype(np.float32)


def lut_infer_layer(w_enc, a_enc, lut, geometry) -> np.ndarray:
    """Dispatch on layer geometry: {'kind': 'conv', 'stride': s, 'pad': p}
    or {'kind': 'fc'}."""
    kind = geometry.get("kind")
    if kind == "conv":
        return lut_infer_conv2d(
            w_enc, a_enc, lut, stride=geometry.get("stride", 1),
            pad=geometry.get("pad", 0),
        )
    if kind == "fc":
        return lut_infer_fc(w_enc, a_enc, lut)
    raise ContractViolation(f"unknown layer geometry {geometry!r}")


def write_lut(path, lut: Lut):
    """Little-endian binary: magic, version, {b_w, b_a, b'_w, b'_a, m_w, m_a}
    as int32, row-major int32 entries, float64 rescale."""
    with open(path, "wb") as fh:
        fh.write(_LUT_MAGIC)
        fh.write(struct.pack("<i", _LUT_VERSION))
        fh.write(
            struct.pack(
                "<6i", lut.b_w, lut.b_a, lut.outer_b_w, lut.outer_b_a,
                lut.m_w, lut.m_a,
            )
        )
        fh.write(np.ascontiguousarray(lut.entries, dtype="<i4").tobytes())
        fh.write(struct.pack("<d", lut.rescale))


def read_lut(path) -> Lut:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _LUT_MAGIC:
        raise InternalConsistencyError(f"{path}: not a LUT file")
    version = struct.unpack_from("<i", blob, 4)[0]
    if version != _LUT_VERSION:
        raise InternalConsistencyError(f"{path}: unsupported LUT version {version}")
    b_w, b_a, ob_w, ob_a, m_w, m_a = struct.unpack_from("<6i", blob, 8)
    off = 8 + 24
    n = m_w * m_a
    entries = np.frombuffer(blob, dtype="<i4", count=n, offset=off).reshape(m_w, m_a)
    rescale = struct.unpack_from("<d", blob, off + 4 * n)[0]
    return Lut(
        entries=entries.astype(np.int32),
        rescale=rescale,
        b_w=b_w,
        b_a=b_a,
        outer_b_w=ob_w,
        outer_b_a=ob_a,
    )
