import math

import numpy as np
import pytest

from s4dquant.quant import QuantSpec, quantize_complex_array
from s4dquant.stability import (
    AmplificationCurve,
    amplification_curve,
    default_transition_diagonal,
    dense_power_error,
    divergence_demo,
    enumerate_lattice,
    stable_fraction,
)


class TestLattice:
    def test_two_bit_grid_has_sixteen_points(self):
        points = enumerate_lattice(2, -1.0, 1.0)
        assert len(points) == 16
        coords = {(p.re, p.im) for p in points}
        assert len(coords) == 16

    def test_classification_matches_predicate(self):
        for bits in range(2, 9):
            for p in enumerate_lattice(bits, -1.2, 1.2):
                assert p.stable == (p.re**2 + p.im**2 < 1.0)

    def test_point_on_circle_is_unstable(self):
        from s4dquant.stability import LatticePoint

        p = LatticePoint(1.0, 0.0, 1.0**2 + 0.0**2 < 1.0)
        assert not p.stable

    def test_stable_fraction_grows_with_bits(self):
        fracs = [stable_fraction(enumerate_lattice(b, -1.5, 1.5)) for b in (2, 4, 6, 8)]
        assert all(b >= a for a, b in zip(fracs, fracs[1:]))
        assert fracs[-1] > fracs[0]

    def test_bits_bounds(self):
        with pytest.raises(ValueError):
            enumerate_lattice(1)


class TestAmplification:
    def test_16_bit_single_step_error_small(self):
        a = default_transition_diagonal(64, 0.01)
        (curve,) = amplification_curve(a, [16], [1])
        assert curve.mean_error[0] < 1e-3

    def test_lower_bits_never_smaller_error(self):
        a = default_transition_diagonal(32, 0.01)
        steps = [1, 2, 5, 10, 20, 50, 100]
        curves = {c.bits: c for c in amplification_curve(a, [4, 8, 16], steps)}
        for lo_bits, hi_bits in ((4, 8), (8, 16)):
            lo = np.array(curves[lo_bits].mean_error)
            hi = np.array(curves[hi_bits].mean_error)
            assert np.all(lo >= hi - 1e-15)

    def test_error_grows_when_quantized_point_escapes_disk(self):
        # one entry close to the circle, 3 bits: the nearest lattice point
        # falls outside and powers diverge
        a = np.array([0.97 * np.exp(0.4j), 0.5])
        curves = amplification_curve(a, [3], [1, 10, 50, 100, 200])
        aq = quantize_complex_array(a, QuantSpec(3, "asymmetric", "per-tensor"))
        if np.any(np.abs(aq) > 1.0):
            errs = curves[0].mean_error
            assert errs[-1] > errs[0]

    def test_no_quantization_is_identically_zero(self):
        a = default_transition_diagonal(16, 0.01)
        errs = [float(np.mean(np.abs(a**k - a**k))) for k in (1, 10, 100)]
        assert all(e == 0.0 for e in errs)

    def test_matches_dense_power_oracle(self):
        a = default_transition_diagonal(12, 0.02)
        aq = quantize_complex_array(a, QuantSpec(6, "asymmetric", "per-tensor"))
        for k in (1, 3, 7, 15):
            fast = float(np.mean(np.abs(a**k - aq**k)))
            brute = dense_power_error(a, aq, k)
            assert abs(fast - brute) < 1e-10

    def test_unstable_input_rejected(self):
        with pytest.raises(ValueError):
            amplification_curve(np.array([1.0 + 0j]), [8], [1])

    def test_curve_length_invariant(self):
        with pytest.raises(ValueError):
            AmplificationCurve(8, [1, 2], [0.0])


class TestDivergence:
    def test_geometric_growth_crosses_threshold(self):
        trace = divergence_demo(1.1 + 0j, 200, clip=False)
        bound = math.ceil(math.log(1e6) / math.log(1.1))
        assert trace.first_step_over_1e6 is not None
        assert trace.first_step_over_1e6 <= bound

    def test_stable_system_bounded_by_geometric_series(self):
        trace = divergence_demo(0.9 + 0j, 500, clip=False)
        assert trace.first_step_over_1e6 is None
        assert max(trace.max_component) <= 10.0 * 1.0 + 1e-9  # |B|/(1-0.9)

    def test_clip_bounds_any_system(self):
        trace = divergence_demo(1.5 * np.exp(0.3j), 300, clip=True)
        assert max(trace.max_component) <= 50.0
        assert trace.first_step_over_1e6 is None

    def test_envelope_is_componentwise(self):
        trace = divergence_demo(np.array([1.2 + 0j, 0.5 + 0j]), 120, clip=True)
        assert max(trace.max_component) <= 50.0
