"""A walking tour of the companding quantizer.

Shows, with small printed tables: how the learnable piecewise-linear
compressing map reshapes quantization levels, the exact reduction to the
plain uniform quantizer at zero parameters, the effect of the outer
re-quantization, and the level sets the lookup tables are built from.
"""

import numpy as np

from compandq.quantizer import (
    CompandingState,
    QuantSpec,
    clip_uniform_quantize,
    compand,
    compress,
    expand,
    identity_state,
    lcq_forward,
    lcq_forward_requant,
    quant_levels,
)

np.set_printoptions(precision=5, suppress=True)

# --- a hand-made state: steep first interval, shallow second ---------------
state = CompandingState.derive([np.log(3), 0.0], alpha=1.0)
print("companding parameters -> tables")
print("  softmax weights:", state.theta_tilde)
print("  slopes         :", state.gamma)
print("  breakpoints in :", state.d)
print("  breakpoints out:", state.beta)

# the compressing map is steep near zero, so after uniform rounding and
# expansion, quantization levels crowd toward zero
spec = QuantSpec(bits=2, signed=False, outer_bits=8, intervals=2)
vs = np.array([0.1, 0.25, 0.3, 0.5, 0.75, 0.9])
print("\nv, compress(v), compand(v) at 2 bits:")
for v in vs:
    print(f"  {v:4.2f}  {float(compress(v, state)):.5f}  "
          f"{float(compand(v, state, spec)):.5f}")

print("\nnon-uniform levels:", quant_levels(state, spec))
print("uniform levels    :", quant_levels(identity_state(2), spec))

# --- zero parameters reduce to the plain clipped uniform quantizer ---------
x = np.linspace(-1.5, 1.5, 7)
ident = identity_state(16, alpha=1.0)
spec_s = QuantSpec(bits=3, signed=True, outer_bits=8, intervals=16)
assert np.array_equal(lcq_forward(x, ident, spec_s),
                      clip_uniform_quantize(x, 1.0, spec_s))
print("\nzero companding parameters == plain uniform quantizer (bitwise)")

# --- outer re-quantization snaps levels onto a finer integer lattice -------
out = lcq_forward_requant(np.array([0.3]), identity_state(4),
                          QuantSpec(3, False, 8, 4))
print(f"\nre-quantized output of 0.3 at 3 bits: {float(out):.6f} "
      f"(= {round(float(out) * 255)}/255, a small-integer lattice point)")

# --- inverse property --------------------------------------------------------
rng = np.random.default_rng(0)
st = CompandingState.derive(rng.normal(0, 1, 16))
v = rng.uniform(0, 1, 100_000)
err = np.abs(expand(compress(v, st), st) - v).max()
print(f"\nexpand(compress(v)) round-trip error over 1e5 points: {err:.2e}")
