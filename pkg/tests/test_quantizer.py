import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compandq.quantizer import (
    CompandingState,
    ContractViolation,
    ParameterCorruption,
    QuantSpec,
    clip_uniform_quantize,
    compand,
    compress,
    expand,
    identity_rounding,
    identity_state,
    lcq_forward,
    lcq_forward_requant,
    parse_quantizer_record,
    quant_levels,
    quantizer_record,
    scale_factor,
    uniform_quantize,
)
from compandq.verify import (
    enumerate_levels_bruteforce,
    oracle_compress,
    oracle_expand,
)


def rand_state(rng, k=8, alpha=None):
    return CompandingState.derive(
        rng.normal(0, 1, k), alpha or float(rng.uniform(0.5, 4))
    )


class TestSpec:
    def test_scale_factors(self):
        assert scale_factor(2, True) == 1
        assert scale_factor(2, False) == 3
        assert scale_factor(3, False) == 7
        assert scale_factor(8, True) == 127
        assert scale_factor(8, False) == 255

    def test_outer_bits_must_exceed_bits(self):
        with pytest.raises(ContractViolation):
            QuantSpec(4, True, 4, 8)
        with pytest.raises(ContractViolation):
            QuantSpec(4, True, 3, 8)
        assert QuantSpec(4, True, 5, 8).outer_scale == 15

    def test_bits_floor(self):
        with pytest.raises(ContractViolation):
            QuantSpec(1, True, 8, 8)


class TestDerive:
    def test_symmetric_two_intervals(self):
        st_ = CompandingState.derive([0.0, 0.0])
        np.testing.assert_allclose(st_.theta_tilde, [0.5, 0.5])
        np.testing.assert_allclose(st_.gamma, [1.0, 1.0])
        np.testing.assert_allclose(st_.beta, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(st_.d, [0.0, 0.5, 1.0])

    @pytest.mark.parametrize("k", [1, 3, 7, 16])
    def test_zeros_give_unit_slopes(self, k):
        st_ = CompandingState.derive(np.zeros(k))
        np.testing.assert_array_equal(st_.gamma, np.ones(k))
        # identity state: output breakpoints coincide bitwise with inputs
        assert np.array_equal(st_.beta, st_.d)

    def test_worked_example(self):
        st_ = CompandingState.derive([np.log(3), 0.0])
        np.testing.assert_allclose(st_.theta_tilde, [0.75, 0.25], atol=1e-15)
        np.testing.assert_allclose(st_.gamma, [1.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(st_.beta, [0.0, 0.75, 1.0], atol=1e-15)

    def test_invariants_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(2, 24))
            st_ = rand_state(rng, k)
            assert abs(st_.theta_tilde.sum() - 1.0) < 1e-12
            assert np.all(st_.theta_tilde > 0) and np.all(st_.theta_tilde < 1)
            assert np.all(st_.gamma > 0)
            assert abs(st_.beta[-1] - 1.0) < 1e-12
            assert np.all(np.diff(st_.beta) > 0)
            assert np.all(np.diff(st_.d) > 0)
            assert abs(st_.d[-1] - 1.0) < 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(ParameterCorruption):
            CompandingState.derive([0.0, np.nan])
        with pytest.raises(ParameterCorruption):
            CompandingState.derive([0.0, 0.0], alpha=-1.0)
        with pytest.raises(ParameterCorruption):
            CompandingState.derive([0.0, 0.0], alpha=np.inf)


class TestUniformQuantize:
    def test_zero(self):
        assert uniform_quantize(0.0, 7) == 0.0

    def test_worked(self):
        assert uniform_quantize(0.3, 7) == pytest.approx(2 / 7, abs=1e-15)

    def test_tie_rounds_away_from_zero(self):
        assert uniform_quantize(0.5, 7) == pytest.approx(4 / 7, abs=1e-15)
        assert uniform_quantize(2.5 / 7, 7) == pytest.approx(3 / 7, abs=1e-15)

    def test_domain(self):
        with pytest.raises(ContractViolation):
            uniform_quantize(1.0, 7)
        with pytest.raises(ContractViolation):
            uniform_quantize(-0.1, 7)
        with pytest.raises(ContractViolation):
            uniform_quantize(0.5, 0)

    @given(st.floats(0, 1, exclude_max=True), st.integers(1, 255))
    def test_lattice_membership(self, v, s):
        q = uniform_quantize(v, s)
        assert 0.0 <= q <= 1.0
        assert abs(q * s - round(q * s)) < 1e-9
        assert abs(q - v) <= 0.5 / s + 1e-12


class TestClipUniform:
    def test_saturation(self):
        spec = QuantSpec(2, True, 8, 4)
        assert clip_uniform_quantize(5.0, 1.0, spec) == 1.0
        assert clip_uniform_quantize(-5.0, 1.0, spec) == -1.0

    def test_ternary(self):
        spec = QuantSpec(2, True, 8, 4)
        assert clip_uniform_quantize(-0.4, 1.0, spec) == 0.0
        vals = clip_uniform_quantize(np.linspace(-2, 2, 101), 1.0, spec)
        assert set(np.unique(vals)) <= {-1.0, 0.0, 1.0}

    def test_unsigned_worked(self):
        spec = QuantSpec(3, False, 8, 4)
        assert clip_uniform_quantize(0.3, 1.0, spec) == pytest.approx(2 / 7,
                                                                      abs=1e-15)

    def test_unsigned_negative_clips_to_zero(self):
        spec = QuantSpec(3, False, 8, 4)
        assert clip_uniform_quantize(-0.7, 1.0, spec) == 0.0

    def test_bad_alpha(self):
        with pytest.raises(ContractViolation):
            clip_uniform_quantize(0.3, 0.0, QuantSpec(3, False, 8, 4))


class TestCompressExpand:
    def test_identity_state_is_identity(self):
        st_ = identity_state(5)
        v = np.linspace(0, 1, 100, endpoint=False)
        np.testing.assert_array_equal(compress(v, st_), v)
        np.testing.assert_array_equal(expand(v, st_), v)

    def test_worked_points(self):
        st_ = CompandingState.derive([np.log(3), 0.0])
        assert compress(0.25, st_) == pytest.approx(0.375, abs=1e-15)
        assert compress(0.75, st_) == pytest.approx(0.875, abs=1e-15)
        assert expand(0.375, st_) == pytest.approx(0.25, abs=1e-15)
        assert expand(0.875, st_) == pytest.approx(0.75, abs=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = int(rng.integers(1, 12))
            theta = rng.normal(0, 1, k)
            st_ = CompandingState.derive(theta)
            for v in rng.uniform(0, 1, 20):
                assert compress(v, st_) == pytest.approx(
                    oracle_compress(v, theta), abs=1e-12)
                assert expand(v, st_) == pytest.approx(
                    oracle_expand(v, theta), abs=1e-12)

    def test_domain_checks(self):
        st_ = identity_state(4)
        with pytest.raises(ContractViolation):
            compress(1.0, st_)
        # expand clamps instead of raising
        assert expand(1.0, st_) <= 1.0
        assert expand(-0.5, st_) == 0.0

    @settings(max_examples=200)
    @given(st.floats(0, 1, exclude_max=True),
           st.lists(st.floats(-3, 3), min_size=1, max_size=16))
    def test_inverse_property(self, v, theta):
        st_ = CompandingState.derive(theta)
        assert expand(compress(v, st_), st_) == pytest.approx(v, abs=1e-12)

    def test_monotonicity(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            st_ = rand_state(rng, int(rng.integers(1, 16)))
            v = np.sort(rng.uniform(0, 1, 200))
            assert np.all(np.diff(compress(v, st_)) > 0)
            assert np.all(np.diff(expand(v, st_)) > 0)

    def test_range(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            st_ = rand_state(rng, 8)
            v = rng.uniform(0, 1, 500)
            fv = compress(v, st_)
            assert np.all(fv >= 0) and np.all(fv < 1)
            ev = expand(v, st_)
            assert np.all(ev >= 0) and np.all(ev < 1)


class TestCompand:
    def test_identity_state_reduces_to_uniform(self):
        spec = QuantSpec(2, False, 8, 2)
        assert compand(0.4, identity_state(2), spec) == pytest.approx(1 / 3,
                                                                      abs=1e-15)

    def test_worked_chain(self):
        st_ = CompandingState.derive([np.log(3), 0.0])
        spec = QuantSpec(2, False, 8, 2)
        # f(0.3)=0.45 -> rounds to 1/3 -> expand gives 2/9
        assert compand(0.3, st_, spec) == pytest.approx(2 / 9, abs=1e-15)

    def test_saturating_round_emits_exact_one(self):
        st_ = identity_state(4)
        spec = QuantSpec(2, False, 8, 4)
        assert compand(0.99, st_, spec) == 1.0

    def test_monotone_nondecreasing(self):
        rng = np.random.default_rng(4)
        for bits in (2, 3, 4):
            spec = QuantSpec(bits, False, 8, 8)
            st_ = rand_state(rng, 8)
            v = np.sort(rng.uniform(0, 1, 400))
            assert np.all(np.diff(compand(v, st_, spec)) >= 0)


class TestForward:
    def test_saturation(self):
        st_ = rand_state(np.random.default_rng(5), alpha=1.2)
        spec = QuantSpec(3, True, 8, 8)
        assert lcq_forward(5.0, st_, spec) == pytest.approx(1.2)
        assert lcq_forward(-5.0, st_, spec) == pytest.approx(-1.2)

    def test_unsigned_nonpositive_to_zero(self):
        st_ = rand_state(np.random.default_rng(6))
        spec = QuantSpec(3, False, 8, 8)
        assert lcq_forward(0.0, st_, spec) == 0.0
        assert lcq_forward(-3.0, st_, spec) == 0.0

    @pytest.mark.parametrize("bits,signed", [(2, True), (2, False), (3, True),
                                             (3, False), (4, True), (4, False)])
    @pytest.mark.parametrize("k", [4, 7, 16])
    def test_identity_reduction_bitexact(self, bits, signed, k):
        rng = np.random.default_rng(7)
        spec = QuantSpec(bits, signed, 9, k)
        st_ = CompandingState.derive(np.zeros(k), 1.3)
        x = rng.uniform(-2.0, 2.0, 20000)
        assert np.array_equal(lcq_forward(x, st_, spec),
                              clip_uniform_quantize(x, 1.3, spec))

    def test_identity_reduction_float32(self):
        spec = QuantSpec(3, False, 9, 16)
        st_ = CompandingState.derive(np.zeros(16), 1.0)
        x = np.random.default_rng(8).uniform(0, 1.5, 20000).astype(np.float32)
        out = lcq_forward(x, st_, spec)
        assert out.dtype == np.float32
        assert np.array_equal(out, clip_uniform_quantize(x, 1.0, spec))

    def test_reduction_case_value(self):
        spec = QuantSpec(3, False, 8, 4)
        assert lcq_forward(0.3, identity_state(4), spec) == pytest.approx(
            2 / 7, abs=1e-15)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(9)
        theta = rng.normal(0, 1, 8)
        spec = QuantSpec(3, True, 8, 8)
        x = rng.uniform(-2, 2, 1000)
        for c in (0.5, 2.0, 7.3):
            a = lcq_forward(c * x, CompandingState.derive(theta, c * 1.1), spec)
            b = c * lcq_forward(x, CompandingState.derive(theta, 1.1), spec)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_requant_levels_on_outer_lattice(self):
        rng = np.random.default_rng(10)
        st_ = rand_state(rng, 8, alpha=1.0)
        spec = QuantSpec(3, False, 8, 8)
        out = lcq_forward_requant(rng.uniform(0, 1.5, 5000), st_, spec)
        n = out * 255
        np.testing.assert_allclose(n, np.round(n), atol=1e-9)

    def test_requant_worked_value(self):
        # companding output 2/7 re-quantized on the 255 lattice
        spec = QuantSpec(3, False, 8, 4)
        out = lcq_forward_requant(0.3, identity_state(4), spec)
        assert out == pytest.approx(73 / 255, abs=1e-15)

    def test_requant_saturation_unchanged(self):
        st_ = rand_state(np.random.default_rng(11), alpha=0.9)
        spec = QuantSpec(3, True, 8, 8)
        assert lcq_forward_requant(2.0, st_, spec) == pytest.approx(0.9)


class TestQuantLevels:
    def test_identity_unsigned(self):
        levels = quant_levels(identity_state(8, 2.0), QuantSpec(2, False, 16, 8))
        np.testing.assert_allclose(levels, [0, 2 / 3, 4 / 3, 2.0], atol=1e-12)

    def test_signed_ternary(self):
        levels = quant_levels(identity_state(8, 1.5), QuantSpec(2, True, 16, 8))
        np.testing.assert_allclose(levels, [-1.5, 0.0, 1.5], atol=1e-15)

    def test_worked_companding_case(self):
        # K=2, slopes (1.5, 0.5): inner levels {0, 1/3, 2/3, 1} expand to
        # {0, 2/9, 4/9, 1} and land on the 255-lattice at {0, 57, 113, 255}
        st_ = CompandingState.derive([np.log(3), 0.0], 1.0)
        spec = QuantSpec(2, False, 8, 2)
        levels = quant_levels(st_, spec)
        np.testing.assert_allclose(levels, [0, 57 / 255, 113 / 255, 1.0],
                                   atol=1e-15)

    def test_matches_bruteforce_enumeration(self):
        rng = np.random.default_rng(12)
        for bits in (2, 3, 4):
            for signed in (True, False):
                st_ = rand_state(rng, int(rng.integers(2, 16)))
                spec = QuantSpec(bits, signed, 8, st_.intervals)
                assert np.array_equal(quant_levels(st_, spec),
                                      enumerate_levels_bruteforce(st_, spec,
                                                                  300_000))

    def test_level_count_bounds(self):
        rng = np.random.default_rng(13)
        for _ in range(40):
            st_ = rand_state(rng, 16)
            bits = int(rng.choice([2, 3, 4]))
            unsigned = quant_levels(st_, QuantSpec(bits, False, 8, 16))
            assert len(unsigned) <= 2**bits
            signed = quant_levels(st_, QuantSpec(bits, True, 8, 16))
            assert len(signed) <= 2**bits - 1
            assert np.all(np.diff(unsigned) > 0)
            assert np.all(np.diff(signed) > 0)


class TestIdentityRoundingMode:
    def test_forward_becomes_identity_inside_clip(self):
        st_ = rand_state(np.random.default_rng(14), alpha=1.0)
        spec = QuantSpec(3, True, 8, 8)
        x = np.random.default_rng(15).uniform(-0.99, 0.99, 100)
        with identity_rounding():
            np.testing.assert_allclose(lcq_forward(x, st_, spec), x, atol=1e-12)
            np.testing.assert_allclose(lcq_forward_requant(x, st_, spec), x,
                                       atol=1e-12)
        # and rounding returns afterwards
        assert lcq_forward(0.3, identity_state(4), QuantSpec(3, False, 8, 4)) \
            == pytest.approx(2 / 7, abs=1e-15)


class TestRecords:
    def test_roundtrip(self):
        st_ = CompandingState.derive([0.3, -0.2, 0.1], 2.5)
        spec = QuantSpec(3, True, 8, 3)
        line = quantizer_record("conv2", "weight", "lcq", spec, st_)
        layer_id, role, method, spec2, st2 = parse_quantizer_record(line)
        assert (layer_id, role, method) == ("conv2", "weight", "lcq")
        assert spec2 == spec
        np.testing.assert_allclose(st2.theta_raw, st_.theta_raw, atol=0)
        assert st2.alpha == st_.alpha

    def test_malformed(self):
        with pytest.raises(ContractViolation):
            parse_quantizer_record("conv1,weight,lcq,3,8")
        with pytest.raises(ContractViolation):
            parse_quantizer_record("conv1,banana,lcq,3,8,2,1.0,0.0,0.0")
