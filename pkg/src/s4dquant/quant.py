"""Uniform signed-integer quantization: schemes, calibration, fake quantization.

Everything simulates integer precision in float64 ("fake" quantization):
values are rounded and clipped onto the lattice (q - zero_point) * scale
with q in the signed range of the configured bit width. Backward passes use
the straight-through convention: identity where the pre-rounding value lies
inside [qmin, qmax], zero outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ComplexTensor, NonFiniteError, Tensor, record

SYMMETRIES = ("symmetric", "asymmetric")
GRANULARITIES = ("per-tensor", "per-head")
CALIBRATIONS = ("static", "dynamic")


class CalibrationMissing(LookupError):
    """Static quantization was requested at a site with no calibrated range."""

    def __init__(self, site: str):
        super().__init__(f"no calibrated range for site {site!r}; run a calibration pass first")
        self.site = site


@dataclass(frozen=True)
class QuantSpec:
    """Declarative description of one quantization scheme."""

    bits: int
    symmetry: str = "asymmetric"
    granularity: str = "per-head"
    calibration: str = "static"
    percentile: float = 0.99999

    def __post_init__(self):
        if not (2 <= self.bits <= 16):
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.symmetry not in SYMMETRIES:
            raise ValueError(f"symmetry must be one of {SYMMETRIES}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.calibration not in CALIBRATIONS:
            raise ValueError(f"calibration must be one of {CALIBRATIONS}")
        if not (0.5 < self.percentile <= 1.0):
            raise ValueError(f"percentile must be in (0.5, 1.0], got {self.percentile}")

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "symmetry": self.symmetry,
            "granularity": self.granularity,
            "calibration": self.calibration,
            "percentile": self.percentile,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(**d)


@dataclass
class QuantParams:
    """Calibrated realization of a QuantSpec: one (scale, zero_point) per channel."""

    scale: np.ndarray        # [C], strictly positive
    zero_point: np.ndarray   # [C], zeros when symmetric
    qmin: int
    qmax: int
    bits: int

    @property
    def channels(self) -> int:
        return int(self.scale.size)


def signed_range(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero, platform-independent."""
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def params_from_range(lo, hi, spec: QuantSpec) -> QuantParams:
    """Scale/zero-point for mapping [lo, hi] (per channel) onto the signed lattice.

    Degenerate ranges (hi == lo) get scale 1 and a zero point that
    reconstructs the constant exactly.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    qmin, qmax = signed_range(spec.bits)
    if spec.symmetry == "symmetric":
        amp = np.maximum(np.abs(lo), np.abs(hi))
        scale = amp / qmax
        degenerate = ~(scale > 0)
        scale = np.where(degenerate, 1.0, scale)
        zp = np.zeros_like(scale)
    else:
        scale = (hi - lo) / (qmax - qmin)
        degenerate = ~(scale > 0)
        scale = np.where(degenerate, 1.0, scale)
        zp = round_half_away(qmin - lo / scale)
        zp = np.where(degenerate, -lo, zp)
    return QuantParams(scale=scale, zero_point=zp, qmin=qmin, qmax=qmax, bits=spec.bits)


def _values_2d(values: np.ndarray, channel_axis: Optional[int]) -> np.ndarray:
    """Reshape to [samples, channels]; channels collapse to 1 when axis is None."""
    if channel_axis is None:
        return values.reshape(-1, 1)
    moved = np.moveaxis(values, channel_axis, -1)
    return moved.reshape(-1, moved.shape[-1])


def calibrate(values, spec: QuantSpec, channel_axis: Optional[int] = None) -> QuantParams:
    """Range-calibrate from observed values via two-sided percentile trimming.

    Quantiles use sorting with linear interpolation between order statistics.
    Per-head granularity requires a channel axis identifying the head dimension.
    """
    data = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot calibrate from an empty tensor")
    if not np.isfinite(data).all():
        raise NonFiniteError("cannot calibrate from non-finite values")
    if spec.granularity == "per-head" and channel_axis is None:
        raise ValueError("per-head calibration needs a channel axis")
    cols = _values_2d(data, channel_axis if spec.granularity == "per-head" else None)
    p = spec.percentile
    lo, hi = np.quantile(cols, [1.0 - p, p], axis=0, method="linear")
    return params_from_range(lo, hi, spec)


def _broadcast_params(qp: QuantParams, ndim: int, channel_axis: Optional[int]):
    if qp.channels == 1:
        return float(qp.scale[0]), float(qp.zero_point[0])
    if channel_axis is None:
        raise ValueError("per-channel params need a channel axis to broadcast along")
    shape = [1] * ndim
    shape[channel_axis] = qp.channels
    return qp.scale.reshape(shape), qp.zero_point.reshape(shape)


def fake_quant_array(
    x: np.ndarray, qp: QuantParams, channel_axis: Optional[int] = None
) -> np.ndarray:
    """Round-and-clip x onto the lattice; pure numpy, no gradient bookkeeping."""
    scale, zp = _broadcast_params(qp, np.ndim(x), channel_axis)
    v = x / scale + zp
    q = np.clip(round_half_away(v), qp.qmin, qp.qmax)
    return (q - zp) * scale


def ste_mask(x: np.ndarray, qp: QuantParams, channel_axis: Optional[int] = None) -> np.ndarray:
    """1.0 where the pre-rounding value is inside [qmin, qmax], else 0.0."""
    scale, zp = _broadcast_params(qp, np.ndim(x), channel_axis)
    v = x / scale + zp
    return ((v >= qp.qmin) & (v <= qp.qmax)).astype(np.float64)


def fake_quant(x: Tensor, qp: QuantParams, channel_axis: Optional[int] = None) -> Tensor:
    """Fake-quantize a tensor with straight-through gradients."""
    y = fake_quant_array(x.data, qp, channel_axis)
    mask = ste_mask(x.data, qp, channel_axis)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * mask,))


def dynamic_fake_quant(
    x: Tensor,
    spec: QuantSpec,
    channel_axis: Optional[int] = None,
    batch_axis: Optional[int] = None,
) -> Tensor:
    """Calibrate on the tensor itself, then fake-quantize.

    Statistics are computed per sample (batch_axis kept separate) so results
    do not depend on how evaluation is batched.
    """
    keep = set()
    if batch_axis is not None:
        keep.add(batch_axis % x.ndim)
    if spec.granularity == "per-head":
        if channel_axis is None:
            raise ValueError("per-head dynamic quantization needs a channel axis")
        keep.add(channel_axis % x.ndim)
    red = tuple(i for i in range(x.ndim) if i not in keep)
    p = spec.percentile
    if red:
        lo, hi = np.quantile(x.data, [1.0 - p, p], axis=red, keepdims=True, method="linear")
    else:
        lo, hi = x.data, x.data
    qmin, qmax = signed_range(spec.bits)
    base = params_from_range(lo.reshape(-1), hi.reshape(-1), spec)
    scale = base.scale.reshape(lo.shape)
    zp = base.zero_point.reshape(lo.shape)
    v = x.data / scale + zp
    q = np.clip(round_half_away(v), qmin, qmax)
    out = Tensor((q - zp) * scale)
    mask = ((v >= qmin) & (v <= qmax)).astype(np.float64)
    return record(out, (x,), lambda g: (g * mask,))


def quantize_complex(
    z: ComplexTensor,
    spec: QuantSpec,
    channel_axis: Optional[int] = None,
    pooled: bool = True,
) -> ComplexTensor:
    """Quantize a complex pair with one shared scheme for both parts.

    By default the range is calibrated over the union of real and imaginary
    values; pooled=False calibrates each part on its own range instead.
    """
    if pooled:
        stacked = np.concatenate([z.re.data[None], z.im.data[None]], axis=0)
        axis = None if channel_axis is None else (channel_axis % z.re.ndim) + 1
        qp = calibrate(stacked, spec, channel_axis=axis)
        return ComplexTensor(
            fake_quant(z.re, qp, channel_axis), fake_quant(z.im, qp, channel_axis)
        )
    qp_re = calibrate(z.re.data, spec, channel_axis)
    qp_im = calibrate(z.im.data, spec, channel_axis)
    return ComplexTensor(
        fake_quant(z.re, qp_re, channel_axis), fake_quant(z.im, qp_im, channel_axis)
    )


def calibrate_complex(
    z: np.ndarray, spec: QuantSpec, channel_axis: Optional[int] = None
) -> QuantParams:
    """Shared-range params over the union of real and imaginary parts."""
    z = np.asarray(z)
    stacked = np.concatenate([z.real[None], z.imag[None]], axis=0)
    axis = None if channel_axis is None else (channel_axis % (stacked.ndim - 1)) + 1
    return calibrate(stacked, spec, channel_axis=axis)


def quantize_complex_array(
    z: np.ndarray, spec: QuantSpec, channel_axis: Optional[int] = None
) -> np.ndarray:
    """Numpy-level pooled complex quantization (analysis paths, no gradients)."""
    qp = calibrate_complex(z, spec, channel_axis)
    return fake_quant_array(z.real, qp, channel_axis) + 1j * fake_quant_array(
        z.imag, qp, channel_axis
    )


def qgelu(x: Tensor) -> Tensor:
    """Piecewise-linear GeLU surrogate x * clamp(x + 2, 0, 1), quantization-friendly."""
    from . import tensor as T

    return T.mul(x, T.clamp(T.add(x, Tensor(2.0)), 0.0, 1.0))


def qgelu_array(x: np.ndarray) -> np.ndarray:
    return x * np.clip(x + 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# static-calibration bookkeeping

class CalibrationStore:
    """Write-once container of observed values and their calibrated ranges.

    Observations accumulate as [rows, channels] chunks per site. To bound
    memory the store decimates deterministically (every second retained row,
    applied uniformly) whenever a site exceeds cap_values; percentile tails
    stay resolvable at the default cap.
    """

    def __init__(self, cap_values: int = 8_000_000):
        self.cap_values = cap_values
        self._chunks: dict[str, list[np.ndarray]] = {}
        self._counts: dict[str, int] = {}
        self._strides: dict[str, int] = {}
        self.params: dict[str, QuantParams] = {}

    def sites(self) -> list[str]:
        return sorted(set(self._chunks) | set(self.params))

    def observe(self, site: str, values: np.ndarray) -> None:
        """Record a [rows, channels] chunk of observed values for a site."""
        chunk = np.asarray(values, dtype=np.float64)
        if chunk.ndim != 2:
            raise ValueError("observations must be [rows, channels]")
        stride = self._strides.setdefault(site, 1)
        chunk = chunk[::stride]
        self._chunks.setdefault(site, []).append(chunk)
        self._counts[site] = self._counts.get(site, 0) + chunk.size
        while self._counts[site] > self.cap_values:
            self._chunks[site] = [c[::2] for c in self._chunks[site]]
            self._counts[site] = sum(c.size for c in self._chunks[site])
            self._strides[site] = stride = stride * 2

    def finalize(self, site: str, spec: QuantSpec) -> QuantParams:
        """Calibrate a site from its accumulated observations and freeze the result."""
        chunks = self._chunks.get(site)
        if not chunks:
            raise CalibrationMissing(site)
        values = np.concatenate(chunks, axis=0)
        axis = 1 if spec.granularity == "per-head" else None
        qp = calibrate(values, spec, channel_axis=axis)
        self.params[site] = qp
        self._chunks.pop(site, None)
        self._counts.pop(site, None)
        return qp

    def get(self, site: str) -> QuantParams:
        try:
            return self.params[site]
        except KeyError:
            raise CalibrationMissing(site) from None

    def has(self, site: str) -> bool:
        return site in self.params


def quantize_activation(
    x: Tensor,
    spec: QuantSpec,
    calib_store: Optional[CalibrationStore],
    site: str,
    channel_axis: Optional[int] = -1,
    batch_axis: Optional[int] = None,
) -> Tensor:
    """Quantize a runtime value: statically from stored ranges, or dynamically."""
    if spec.calibration == "dynamic":
        return dynamic_fake_quant(x, spec, channel_axis=channel_axis, batch_axis=batch_axis)
    if calib_store is None:
        raise CalibrationMissing(site)
    qp = calib_store.get(site)
    return fake_quant(x, qp, channel_axis)


# ---------------------------------------------------------------------------
# runtime plan consulted by the model forward

ACT_COMPONENTS = ("state", "ssm_activations", "outer_activations")
WEIGHT_COMPONENTS = ("A_bar", "B_bar", "C_bar", "D_bar", "outer_weights")


class QuantRuntime:
    """Per-forward quantization plan: which sites quantize, with what, and how.

    act_specs / weight_specs map component names to QuantSpec (or None for
    full precision). weight_mode:
      "none"    leave weight values alone (already baked, or full precision)
      "live"    fake-quantize from ranges recalibrated on the current values
      "frozen"  fake-quantize with pre-computed params in frozen_weight_params
    During a calibration pass set observing=True: activation sites record
    their values into the store and pass data through unquantized.
    """

    def __init__(
        self,
        act_specs: Optional[dict[str, Optional[QuantSpec]]] = None,
        weight_specs: Optional[dict[str, Optional[QuantSpec]]] = None,
        store: Optional[CalibrationStore] = None,
        observing: bool = False,
        weight_mode: str = "none",
        use_qgelu: Optional[bool] = None,
        frozen_weight_params: Optional[dict[str, QuantParams]] = None,
        skip_weight_roles: frozenset = frozenset(),
        pooled_complex: bool = True,
    ):
        self.act_specs = dict(act_specs or {})
        self.weight_specs = dict(weight_specs or {})
        for k in self.act_specs:
            if k not in ACT_COMPONENTS:
                raise ValueError(f"unknown activation component {k!r}")
        for k in self.weight_specs:
            if k not in WEIGHT_COMPONENTS:
                raise ValueError(f"unknown weight component {k!r}")
        if weight_mode not in ("none", "live", "frozen"):
            raise ValueError(f"unknown weight_mode {weight_mode!r}")
        self.store = store if store is not None else CalibrationStore()
        self.observing = observing
        self.weight_mode = weight_mode
        self.frozen_weight_params = frozen_weight_params or {}
        self.skip_weight_roles = frozenset(skip_weight_roles)
        self.pooled_complex = pooled_complex
        if use_qgelu is None:
            use_qgelu = self.act_specs.get("outer_activations") is not None
        self.use_qgelu = use_qgelu

    # -- activations --------------------------------------------------------
    def act(
        self,
        x: Tensor,
        site: str,
        component: str,
        channel_axis: Optional[int] = -1,
        batch_axis: Optional[int] = 0,
    ) -> Tensor:
        spec = self.act_specs.get(component)
        if spec is None:
            return x
        if self.observing:
            if spec.calibration == "static":
                self.store.observe(site, _values_2d(x.data, channel_axis))
            return x
        return quantize_activation(x, spec, self.store, site, channel_axis, batch_axis)

    def state_plan(self, site: str):
        """(kind, payload) handed to the recurrent scan, or None."""
        spec = self.act_specs.get("state")
        if spec is None or self.observing:
            return None
        if spec.calibration == "dynamic":
            return ("dynamic", spec)
        return ("static", self.store.get(site))

    def state_observer(self, site: str):
        spec = self.act_specs.get("state")
        if spec is None or not self.observing or spec.calibration != "static":
            return None
        return lambda rows: self.store.observe(site, rows)

    # -- weights -------------------------------------------------------------
    def weight(
        self, t: Tensor, role: str, site: str, channel_axis: Optional[int]
    ) -> Tensor:
        spec = self.weight_specs.get(role)
        if spec is None or self.weight_mode == "none" or role in self.skip_weight_roles:
            return t
        axis = channel_axis if spec.granularity == "per-head" else None
        if self.weight_mode == "live":
            qp = calibrate(t.data, spec, axis)
        else:
            qp = self.frozen_weight_params.get(site)
            if qp is None:
                raise CalibrationMissing(site)
        return fake_quant(t, qp, axis)

    def weight_complex(
        self, z: ComplexTensor, role: str, site: str, channel_axis: Optional[int]
    ) -> ComplexTensor:
        spec = self.weight_specs.get(role)
        if spec is None or self.weight_mode == "none" or role in self.skip_weight_roles:
            return z
        axis = channel_axis if spec.granularity == "per-head" else None
        if self.weight_mode == "live":
            if self.pooled_complex:
                qp = calibrate_complex(z.re.data + 1j * z.im.data, spec, axis)
                return ComplexTensor(fake_quant(z.re, qp, axis), fake_quant(z.im, qp, axis))
            return quantize_complex(z, spec, axis, pooled=False)
        qp = self.frozen_weight_params.get(site)
        if qp is None:
            raise CalibrationMissing(site)
        return ComplexTensor(fake_quant(z.re, qp, axis), fake_quant(z.im, qp, axis))
