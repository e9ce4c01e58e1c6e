"""Why the state transition matrix and the state resist quantization.

A discrete diagonal system is stable iff every entry of its transition
matrix lies strictly inside the unit circle. Quantizing real and imaginary
parts onto a shared Cartesian lattice can push entries outside, and those
errors compound geometrically under repeated multiplication. The tools here
quantify that: lattice classification, error amplification of matrix
powers, and a divergence demonstration with and without state clipping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import DEFAULT_STATE_CLIP
from .quant import QuantSpec, fake_quant_array, params_from_range, quantize_complex_array


@dataclass
class LatticePoint:
    re: float
    im: float
    stable: bool  # strictly inside the unit circle


@dataclass
class AmplificationCurve:
    bits: int
    steps: list[int]
    mean_error: list[float]  # mean_n |A_fp[n]^k - A_q[n]^k| per k

    def __post_init__(self):
        if len(self.steps) != len(self.mean_error):
            raise ValueError("steps and mean_error lengths disagree")


def enumerate_lattice(
    bits: int, range_lo: float = -1.0, range_hi: float = 1.0
) -> list[LatticePoint]:
    """All representable (re, im) pairs under one shared scheme on [lo, hi]^2."""
    if not (2 <= bits <= 16):
        raise ValueError("bits must be in [2, 16]")
    spec = QuantSpec(bits=bits, symmetry="asymmetric", granularity="per-tensor")
    qp = params_from_range(range_lo, range_hi, spec)
    levels = (np.arange(qp.qmin, qp.qmax + 1) - qp.zero_point[0]) * qp.scale[0]
    points = []
    for re in levels:
        for im in levels:
            points.append(LatticePoint(float(re), float(im), bool(re * re + im * im < 1.0)))
    return points


def stable_fraction(points: list[LatticePoint]) -> float:
    return sum(p.stable for p in points) / len(points)


def default_transition_diagonal(n: int = 64, dt: float = 0.01) -> np.ndarray:
    """Diagonal-linear spectrum discretized with a fixed step: exp((-1/2 + i*pi*k) dt)."""
    a = -0.5 + 1j * np.pi * np.arange(n)
    return np.exp(a * dt)


def amplification_curve(
    a_fp: np.ndarray,
    bits_list: list[int],
    steps: list[int],
    spec_template: Optional[QuantSpec] = None,
) -> list[AmplificationCurve]:
    """Mean per-entry modulus error between powers of A and of its quantized copy."""
    a_fp = np.asarray(a_fp, dtype=np.complex128)
    if np.any(np.abs(a_fp) >= 1.0):
        raise ValueError("amplification_curve expects a stable diagonal (all |a| < 1)")
    curves = []
    for bits in bits_list:
        spec = (
            QuantSpec(bits=bits, symmetry="asymmetric", granularity="per-tensor")
            if spec_template is None
            else QuantSpec(
                bits=bits,
                symmetry=spec_template.symmetry,
                granularity=spec_template.granularity,
                calibration=spec_template.calibration,
                percentile=spec_template.percentile,
            )
        )
        a_q = quantize_complex_array(a_fp, spec)
        errs = [float(np.mean(np.abs(a_fp**k - a_q**k))) for k in steps]
        curves.append(AmplificationCurve(bits=bits, steps=list(steps), mean_error=errs))
    return curves


def dense_power_error(a_fp: np.ndarray, a_q: np.ndarray, k: int) -> float:
    """Brute-force oracle: embed diagonals in dense matrices, power by repeated matmul."""
    m_fp = np.diag(np.asarray(a_fp, dtype=np.complex128))
    m_q = np.diag(np.asarray(a_q, dtype=np.complex128))
    p_fp = np.eye(m_fp.shape[0], dtype=np.complex128)
    p_q = np.eye(m_q.shape[0], dtype=np.complex128)
    for _ in range(k):
        p_fp = p_fp @ m_fp
        p_q = p_q @ m_q
    return float(np.mean(np.abs(np.diagonal(p_fp) - np.diagonal(p_q))))


@dataclass
class DivergenceTrace:
    steps: list[int]
    max_component: list[float]  # max over entries of max(|re|, |im|)
    first_step_over_1e6: Optional[int]


def divergence_demo(
    a: np.ndarray | complex,
    n_steps: int,
    clip: bool,
    b: np.ndarray | complex = 1.0,
    state_clip: tuple[float, float] = DEFAULT_STATE_CLIP,
    threshold: float = 1e6,
) -> DivergenceTrace:
    """Drive x[k+1] = a*x[k] + b with constant unit input; track the state envelope."""
    a = np.atleast_1d(np.asarray(a, dtype=np.complex128))
    b = np.broadcast_to(np.asarray(b, dtype=np.complex128), a.shape).copy()
    lo, hi = state_clip
    x = np.zeros_like(a)
    steps, env = [], []
    first_cross = None
    for k in range(1, n_steps + 1):
        x = a * x + b
        if clip:
            x = np.clip(x.real, lo, hi) + 1j * np.clip(x.imag, lo, hi)
        peak = float(np.max(np.maximum(np.abs(x.real), np.abs(x.imag))))
        steps.append(k)
        env.append(peak)
        if first_cross is None and peak > threshold:
            first_cross = k
    return DivergenceTrace(steps=steps, max_component=env, first_step_over_1e6=first_cross)
