"""Randomized algebraic checks for the fake-quantization lattice.

Shared between the unit tests (small case counts) and the acceptance suite
(1e4 cases per property). Each function draws `cases` total random values
spread over freshly drawn schemes and asserts the property exactly.
"""

import numpy as np

from s4dquant.quant import QuantSpec, calibrate, fake_quant_array, params_from_range


def _random_params(rng, symmetry=None):
    bits = int(rng.integers(2, 17))
    sym = symmetry or ("symmetric" if rng.random() < 0.5 else "asymmetric")
    spec = QuantSpec(bits=bits, symmetry=sym, granularity="per-tensor")
    span = 10.0 ** rng.uniform(-3, 3)
    center = rng.uniform(-span, span)
    lo, hi = center - span, center + span
    return spec, params_from_range(lo, hi, spec)


def check_idempotence(rng, cases):
    per = max(1, cases // 100)
    for _ in range(100):
        spec, qp = _random_params(rng)
        x = rng.uniform(-5, 5, size=per) * float(qp.scale[0]) * qp.qmax
        once = fake_quant_array(x, qp)
        twice = fake_quant_array(once, qp)
        assert np.array_equal(once, twice)


def check_monotonicity(rng, cases):
    per = max(2, cases // 100)
    for _ in range(100):
        spec, qp = _random_params(rng)
        x = np.sort(rng.uniform(-4, 4, size=per) * float(qp.scale[0]) * qp.qmax)
        y = fake_quant_array(x, qp)
        assert np.all(np.diff(y) >= 0)


def check_boundedness(rng, cases):
    per = max(1, cases // 100)
    for _ in range(100):
        spec, qp = _random_params(rng)
        x = rng.uniform(-50, 50, size=per) * float(qp.scale[0]) * max(1, qp.qmax)
        y = fake_quant_array(x, qp)
        lo = (qp.qmin - qp.zero_point[0]) * qp.scale[0]
        hi = (qp.qmax - qp.zero_point[0]) * qp.scale[0]
        assert np.all(y >= lo) and np.all(y <= hi)


def check_lattice_cardinality(rng, cases):
    per = max(1, cases // 50)
    for _ in range(50):
        spec, qp = _random_params(rng)
        x = rng.uniform(-10, 10, size=per) * float(qp.scale[0]) * qp.qmax
        distinct = np.unique(fake_quant_array(x, qp))
        assert distinct.size <= 2 ** spec.bits


def check_error_bound_in_range(rng, cases):
    per = max(1, cases // 100)
    for _ in range(100):
        spec, qp = _random_params(rng)
        lo = (qp.qmin - qp.zero_point[0]) * qp.scale[0]
        hi = (qp.qmax - qp.zero_point[0]) * qp.scale[0]
        x = rng.uniform(lo, hi, size=per)
        err = np.abs(x - fake_quant_array(x, qp))
        assert np.all(err <= qp.scale[0] * 0.5 * (1 + 1e-12))


def check_symmetric_zero_point(rng, cases):
    per = max(4, cases // 100)
    for _ in range(100):
        bits = int(rng.integers(2, 17))
        spec = QuantSpec(bits=bits, symmetry="symmetric", granularity="per-tensor")
        x = rng.standard_normal(per) * 10.0 ** rng.uniform(-2, 2)
        qp = calibrate(x, spec)
        assert np.all(qp.zero_point == 0.0)


def check_asymmetric_beats_symmetric_on_skewed(rng, cases):
    per = max(32, cases // 50)
    for _ in range(50):
        bits = int(rng.integers(3, 13))
        x = rng.uniform(0.0, 1.0, size=per)
        mses = {}
        for sym in ("symmetric", "asymmetric"):
            spec = QuantSpec(bits=bits, symmetry=sym, granularity="per-tensor")
            qp = calibrate(x, spec)
            mses[sym] = float(np.mean((x - fake_quant_array(x, qp)) ** 2))
        assert mses["asymmetric"] < mses["symmetric"]


def check_per_head_mse_not_worse(rng, cases):
    per = max(64, cases // 50)
    for _ in range(50):
        bits = int(rng.integers(3, 13))
        heads = int(rng.integers(2, 9))
        scales = 10.0 ** rng.uniform(-2, 2, size=heads)
        x = rng.standard_normal((per, heads)) * scales
        sym = "symmetric" if rng.random() < 0.5 else "asymmetric"
        qp_head = calibrate(x, QuantSpec(bits, sym, "per-head"), channel_axis=1)
        qp_tensor = calibrate(x, QuantSpec(bits, sym, "per-tensor"))
        mse_head = np.mean((x - fake_quant_array(x, qp_head, channel_axis=1)) ** 2)
        mse_tensor = np.mean((x - fake_quant_array(x, qp_tensor)) ** 2)
        assert mse_head <= mse_tensor + 1e-15


ALL_PROPERTIES = {
    "idempotence": check_idempotence,
    "monotonicity": check_monotonicity,
    "boundedness": check_boundedness,
    "lattice_cardinality": check_lattice_cardinality,
    "error_bound_in_range": check_error_bound_in_range,
    "symmetric_zero_point": check_symmetric_zero_point,
    "asymmetric_beats_symmetric": check_asymmetric_beats_symmetric_on_skewed,
    "per_head_mse_not_worse": check_per_head_mse_not_worse,
}
