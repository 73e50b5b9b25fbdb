"""Integer inference through lookup tables.

Builds the product table for one quantized layer, shows its size arithmetic,
runs a convolution entirely on int32 accumulation of table entries, and
confirms agreement with the float path.
"""

import numpy as np

from compandq.lut import (
    LevelCodebook,
    build_lut,
    lut_infer_conv2d,
    lut_memory_bytes,
)
from compandq.quantizer import CompandingState, QuantSpec, quant_levels, \
    scale_factor

rng = np.random.default_rng(0)

# quantizers for one layer: signed 3-bit weights, unsigned 3-bit activations,
# both re-quantized on 8-bit outer lattices
w_state = CompandingState.derive(rng.normal(0, 1, 8), alpha=2.0)
a_state = CompandingState.derive(rng.normal(0, 1, 8), alpha=1.5)
w_spec = QuantSpec(3, True, 8, 8)
a_spec = QuantSpec(3, False, 8, 8)
w_levels = quant_levels(w_state, w_spec)
a_levels = quant_levels(a_state, a_spec)
print("weight levels    :", np.round(w_levels, 4))
print("activation levels:", np.round(a_levels, 4))

sigma_w = 0.42  # weight-normalization restore factor, folded into the table
lut = build_lut(w_levels, a_levels, 8, 8, sigma_w=sigma_w)
print(f"\ntable: {lut.m_w} x {lut.m_a} entries "
      f"({lut_memory_bytes(3, 3, 8, 8)} bytes at 8/8 outer bits, "
      f"vs {4 * lut.m_w * lut.m_a:.1f} bytes for float32 products)")
print(lut.entries)
print(f"rescale folds alpha_w * alpha_a * sigma_w / (s'_w * s'_a) = "
      f"{lut.rescale:.3e}")

# encode a weight tensor and an activation tensor as level indices
cb_w = LevelCodebook.from_levels(w_levels, scale_factor(8, True), signed=True)
import dataclasses
cb_w = dataclasses.replace(cb_w, scale=cb_w.scale * sigma_w)
cb_a = LevelCodebook.from_levels(a_levels, scale_factor(8, False), signed=False)

w = rng.choice(w_levels, size=(4, 3, 3, 3)) * sigma_w
a = rng.choice(a_levels, size=(2, 3, 8, 8))
w_enc = cb_w.encode(w)
a_enc = cb_a.encode(a)
print(f"\nencoded weights: codes {w_enc.codes.shape} uint8, "
      f"{int(w_enc.zero.sum())} zeros skipped, signs stored separately")

y_int = lut_infer_conv2d(w_enc, a_enc, lut, stride=1, pad=1)

# float reference
from compandq._conv import unfold
cols = unfold(a.astype(np.float64), 3, 3, 1, 1)
mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(-1, 27)
y_ref = (mat @ w.reshape(4, -1).T).reshape(2, 8, 8, 4).transpose(0, 3, 1, 2)

err = np.abs(y_int - y_ref).max() / np.abs(y_ref).max()
print(f"\ninteger conv vs float conv, max relative difference: {err:.2e}")
