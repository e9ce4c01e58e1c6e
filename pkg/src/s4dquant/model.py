"""Diagonal state-space sequence model.

One head is a complex diagonal LTI system trained in continuous time and
discretized (zero-order hold by default) before execution. A layer runs H
heads in parallel, concatenates their scalar outputs, applies GeLU, a
position-wise channel-mixing projection with a GLU gate, and a residual
connection; the stack is encoder -> D layers -> mean pool -> classifier.

Execution modes:
  recurrent      step-by-step state update x[k+1] = A_bar*x[k] + B_bar*u[k]
                 with component-wise state clipping (and optional state
                 quantization), the mode used for evaluation and fine-tuning;
  convolutional  materializes the impulse-response kernel by iterated
                 diagonal powers (no FFT anywhere) and convolves via a
                 Toeplitz matmul, the fast mode used for pretraining.

Both modes share parameters and agree when clipping never engages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import quant as Q
from . import tensor as T
from .tensor import ComplexTensor, NonFiniteError, ShapeError, Tensor

try:  # optional compiled fast path for the recurrent loop
    from . import _scanjit
except ImportError:  # pragma: no cover - numba not installed
    _scanjit = None

DEFAULT_STATE_CLIP = (-50.0, 50.0)


# ---------------------------------------------------------------------------
# configuration and parameter containers

@dataclass
class ModelConfig:
    heads: int = 16
    state_size: int = 16
    depth: int = 1
    seq_len: int = 784
    n_classes: int = 10
    mode: str = "recurrent"
    seed: int = 0
    # readout of a complex half-spectrum state: y = factor * Re(C x) + D u
    output_factor: float = 2.0
    use_layernorm: bool = True
    use_residual: bool = True
    state_clip: tuple[float, float] = DEFAULT_STATE_CLIP
    discretization: str = "zoh"

    def __post_init__(self):
        for name in ("heads", "state_size", "depth", "seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mode not in ("recurrent", "convolutional"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.discretization not in ("zoh", "bilinear"):
            raise ValueError(f"unknown discretization {self.discretization!r}")
        self.state_clip = (float(self.state_clip[0]), float(self.state_clip[1]))

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["state_clip"] = list(self.state_clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "state_clip" in d:
            d["state_clip"] = tuple(d["state_clip"])
        return cls(**d)


@dataclass
class SSMHeadParams:
    """Continuous-time parameters of a single head (N complex modes)."""

    A_log_re: Tensor   # [N], trains log of -Re(A)
    A_im: Tensor       # [N]
    B: ComplexTensor   # [N]
    C: ComplexTensor   # [N]
    D: Tensor          # [1]
    log_dt: Tensor     # [1], trains log of the step size

    def A(self) -> ComplexTensor:
        return ComplexTensor(T.neg(T.exp(self.A_log_re)), self.A_im)

    def dt(self) -> Tensor:
        return T.exp(self.log_dt)


@dataclass
class DiscreteSSMParams:
    """Discretized single-head system."""

    A_bar: ComplexTensor  # [N]
    B_bar: ComplexTensor  # [N]
    C_bar: ComplexTensor  # [N]
    D_bar: Tensor         # [1]


@dataclass
class ContinuousSSM:
    """All H heads of one layer, stacked on a leading head axis."""

    a_log_re: Tensor  # [H, N]
    a_im: Tensor      # [H, N]
    b_re: Tensor      # [H, N]
    b_im: Tensor      # [H, N]
    c_re: Tensor      # [H, N]
    c_im: Tensor      # [H, N]
    d: Tensor         # [H]
    log_dt: Tensor    # [H, 1]

    kind = "continuous"

    def fields(self):
        return [
            ("a_log_re", self.a_log_re),
            ("a_im", self.a_im),
            ("b_re", self.b_re),
            ("b_im", self.b_im),
            ("c_re", self.c_re),
            ("c_im", self.c_im),
            ("d", self.d),
            ("log_dt", self.log_dt),
        ]


@dataclass
class DiscreteSSM:
    """Discrete-form heads; what quantization and discrete-mode training act on."""

    a_re: Tensor  # [H, N]
    a_im: Tensor  # [H, N]
    b_re: Tensor  # [H, N]
    b_im: Tensor  # [H, N]
    c_re: Tensor  # [H, N]
    c_im: Tensor  # [H, N]
    d: Tensor     # [H]

    kind = "discrete"

    def fields(self):
        return [
            ("a_re", self.a_re),
            ("a_im", self.a_im),
            ("b_re", self.b_re),
            ("b_im", self.b_im),
            ("c_re", self.c_re),
            ("c_im", self.c_im),
            ("d", self.d),
        ]


@dataclass
class Layer:
    ssm: Union[ContinuousSSM, DiscreteSSM]
    mix_w: Tensor  # [H, 2H]
    mix_b: Tensor  # [2H]
    ln_g: Tensor   # [H]
    ln_b: Tensor   # [H]


@dataclass
class S4DModel:
    config: ModelConfig
    enc_w: Tensor  # [1, H]
    enc_b: Tensor  # [H]
    layers: list[Layer]
    dec_w: Tensor  # [H, n_classes]
    dec_b: Tensor  # [n_classes]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Deterministic traversal; this order is the checkpoint blob order."""
        out = [("encoder.w", self.enc_w), ("encoder.b", self.enc_b)]
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.ln.gain", layer.ln_g))
            out.append((f"layers.{i}.ln.bias", layer.ln_b))
            for name, t in layer.ssm.fields():
                out.append((f"layers.{i}.ssm.{name}", t))
            out.append((f"layers.{i}.mix.w", layer.mix_w))
            out.append((f"layers.{i}.mix.b", layer.mix_b))
        out.append(("decoder.w", self.dec_w))
        out.append(("decoder.b", self.dec_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def head(self, layer_idx: int, head_idx: int) -> SSMHeadParams:
        """Per-head view (copies) of a continuous-form layer."""
        ssm = self.layers[layer_idx].ssm
        if ssm.kind != "continuous":
            raise ValueError("head() requires the continuous parameter form")
        h = head_idx
        return SSMHeadParams(
            A_log_re=Tensor(ssm.a_log_re.data[h].copy()),
            A_im=Tensor(ssm.a_im.data[h].copy()),
            B=ComplexTensor(Tensor(ssm.b_re.data[h].copy()), Tensor(ssm.b_im.data[h].copy())),
            C=ComplexTensor(Tensor(ssm.c_re.data[h].copy()), Tensor(ssm.c_im.data[h].copy())),
            D=Tensor(ssm.d.data[h : h + 1].copy()),
            log_dt=Tensor(ssm.log_dt.data[h].copy()),
        )

    def copy(self) -> "S4DModel":
        def t(x: Tensor) -> Tensor:
            return Tensor(x.data.copy(), requires_grad=x.requires_grad)

        layers = []
        for layer in self.layers:
            ssm = layer.ssm
            if ssm.kind == "continuous":
                new = ContinuousSSM(*[t(x) for _, x in ssm.fields()])
            else:
                new = DiscreteSSM(*[t(x) for _, x in ssm.fields()])
            layers.append(Layer(new, t(layer.mix_w), t(layer.mix_b), t(layer.ln_g), t(layer.ln_b)))
        return S4DModel(
            replace(self.config),
            t(self.enc_w),
            t(self.enc_b),
            layers,
            t(self.dec_w),
            t(self.dec_b),
        )


# ---------------------------------------------------------------------------
# initialization

def init_s4d(config: ModelConfig) -> S4DModel:
    """Fresh model with the diagonal-linear init A[n] = -1/2 + i*pi*n."""
    rng = np.random.default_rng(config.seed)
    H, N = config.heads, config.state_size

    def p(arr) -> Tensor:
        return Tensor(arr, requires_grad=True)

    a_im_row = math.pi * np.arange(N, dtype=np.float64)
    layers = []
    for _ in range(config.depth):
        ssm = ContinuousSSM(
            a_log_re=p(np.full((H, N), math.log(0.5))),
            a_im=p(np.tile(a_im_row, (H, 1))),
            b_re=p(np.ones((H, N))),
            b_im=p(np.zeros((H, N))),
            c_re=p(rng.standard_normal((H, N))),
            c_im=p(rng.standard_normal((H, N))),
            d=p(np.ones(H)),
            log_dt=p(rng.uniform(math.log(1e-3), math.log(1e-1), size=(H, 1))),
        )
        mix_w = p(rng.standard_normal((H, 2 * H)) / math.sqrt(H))
        mix_b = p(np.zeros(2 * H))
        layers.append(Layer(ssm, mix_w, mix_b, p(np.ones(H)), p(np.zeros(H))))
    enc_w = p(rng.standard_normal((1, H)))
    enc_b = p(np.zeros(H))
    dec_w = p(rng.standard_normal((H, config.n_classes)) / math.sqrt(H))
    dec_b = p(np.zeros(config.n_classes))
    return S4DModel(config, enc_w, enc_b, layers, dec_w, dec_b)


# ---------------------------------------------------------------------------
# discretization

def _discretize_parts(a_log_re, a_im, b_re, b_im, log_dt, method: str):
    """Shared core; shapes [*, N] with log_dt broadcast onto them."""
    a = ComplexTensor(T.neg(T.exp(a_log_re)), a_im)
    dt = T.expand(T.exp(log_dt), a_log_re.shape)
    b = ComplexTensor(b_re, b_im)
    if method == "zoh":
        a_bar = ComplexTensor(T.mul(a.re, dt), T.mul(a.im, dt)).exp()
        # B_bar = (A_bar - 1)/A * B, the diagonal closed form
        num = ComplexTensor(T.sub(a_bar.re, Tensor(1.0)), a_bar.im)
        b_bar = num.div(a).mul(b)
    elif method == "bilinear":
        half = ComplexTensor(T.mul(a.re, T.mul(dt, Tensor(0.5))), T.mul(a.im, T.mul(dt, Tensor(0.5))))
        den = ComplexTensor(T.sub(Tensor(1.0), half.re), T.neg(half.im))
        num = ComplexTensor(T.add(Tensor(1.0), half.re), half.im)
        a_bar = num.div(den)
        b_bar = b.mul_real(dt).div(den)
    else:
        raise ValueError(f"unknown discretization {method!r}")
    return a_bar, b_bar


def discretize_zoh(head: SSMHeadParams) -> DiscreteSSMParams:
    return discretize(head, "zoh")


def discretize(head: SSMHeadParams, method: str = "zoh") -> DiscreteSSMParams:
    a_bar, b_bar = _discretize_parts(
        head.A_log_re, head.A_im, head.B.re, head.B.im, head.log_dt, method
    )
    return DiscreteSSMParams(A_bar=a_bar, B_bar=b_bar, C_bar=head.C, D_bar=head.D)


def discretize_layer(ssm: ContinuousSSM, method: str = "zoh") -> DiscreteSSM:
    a_bar, b_bar = _discretize_parts(
        ssm.a_log_re, ssm.a_im, ssm.b_re, ssm.b_im, ssm.log_dt, method
    )
    return DiscreteSSM(
        a_re=a_bar.re,
        a_im=a_bar.im,
        b_re=b_bar.re,
        b_im=b_bar.im,
        c_re=ssm.c_re,
        c_im=ssm.c_im,
        d=ssm.d,
    )


def to_discrete(model: S4DModel, method: Optional[str] = None) -> S4DModel:
    """Convert every layer to the discrete parameter form (values baked)."""
    method = method or model.config.discretization
    out = model.copy()
    for layer in out.layers:
        if layer.ssm.kind == "continuous":
            dssm = discretize_layer(layer.ssm, method)
            layer.ssm = DiscreteSSM(
                *[Tensor(t.data.copy(), requires_grad=True) for _, t in dssm.fields()]
            )
    return out


# ---------------------------------------------------------------------------
# single-head reference ops

def recurrent_step(
    x: ComplexTensor,
    u,
    p: DiscreteSSMParams,
    state_clip: tuple[float, float] = DEFAULT_STATE_CLIP,
    output_factor: float = 2.0,
) -> tuple[ComplexTensor, Tensor]:
    """One state update and readout for a single head.

    x_next = clip(A_bar*x + B_bar*u); y = factor*Re(sum(C_bar*x_next)) + D*u.
    """
    if not (np.isfinite(x.re.data).all() and np.isfinite(x.im.data).all()):
        raise NonFiniteError("recurrent_step received a non-finite state")
    u = u if isinstance(u, Tensor) else Tensor(float(u))
    lo, hi = state_clip
    s = p.A_bar.mul(x).add(p.B_bar.mul_real(u))
    x_next = ComplexTensor(T.clamp(s.re, lo, hi), T.clamp(s.im, lo, hi))
    readout = T.sum_(T.sub(T.mul(p.C_bar.re, x_next.re), T.mul(p.C_bar.im, x_next.im)))
    y = T.add(T.mul(readout, Tensor(output_factor)), T.sum_(T.mul(p.D_bar, u)))
    return x_next, y


def scan(
    u_seq: Tensor,
    p: DiscreteSSMParams,
    state_clip: tuple[float, float] = DEFAULT_STATE_CLIP,
    output_factor: float = 2.0,
) -> Tensor:
    """Run the head over a full sequence from x = 0; returns all outputs [L]."""
    if u_seq.ndim != 1 or u_seq.size < 1:
        raise ShapeError("scan expects a non-empty 1-D sequence")
    n = p.A_bar.shape[0]
    x = ComplexTensor(T.zeros(n), T.zeros(n))
    ys = []
    for t in range(u_seq.size):
        u_t = T.slice_axis(u_seq, 0, t, t + 1)
        x, y = recurrent_step(x, T.reshape(u_t, ()), p, state_clip, output_factor)
        ys.append(T.reshape(y, (1,)))
    return T.concat(ys, axis=0)


def compute_kernel(p: DiscreteSSMParams, length: int, output_factor: float = 2.0) -> Tensor:
    """Impulse-response kernel K[i] = factor*Re(sum_n C[n] A[n]^i B[n]) of one head."""
    if length < 1:
        raise ShapeError("kernel length must be >= 1")
    dssm = DiscreteSSM(
        a_re=T.reshape(p.A_bar.re, (1, -1)),
        a_im=T.reshape(p.A_bar.im, (1, -1)),
        b_re=T.reshape(p.B_bar.re, (1, -1)),
        b_im=T.reshape(p.B_bar.im, (1, -1)),
        c_re=T.reshape(p.C_bar.re, (1, -1)),
        c_im=T.reshape(p.C_bar.im, (1, -1)),
        d=p.D_bar,
    )
    return T.reshape(ssm_kernel(dssm, length, output_factor), (length,))


def conv_forward(
    u_seq: Tensor, p: DiscreteSSMParams, output_factor: float = 2.0
) -> Tensor:
    """Convolutional-mode equivalent of scan (single head, clipping ignored)."""
    length = u_seq.size
    k = compute_kernel(p, length, output_factor)
    u3 = T.reshape(u_seq, (1, length, 1))
    y = causal_conv(u3, T.reshape(k, (length, 1)))
    d = T.expand(T.reshape(p.D_bar, (1, 1, 1)), (1, length, 1))
    return T.reshape(T.add(y, T.mul(d, u3)), (length,))


# ---------------------------------------------------------------------------
# fused batched ops (hand-derived backward passes)

StateQuant = Optional[tuple[str, object]]  # ("static", QuantParams) | ("dynamic", QuantSpec)


def _state_quant_step(xr, xi, state_q):
    """Quantize one step's state; returns new parts plus straight-through masks."""
    mode, payload = state_q
    if mode == "static":
        qp: Q.QuantParams = payload
        if qp.channels == 1:
            scale, zp = float(qp.scale[0]), float(qp.zero_point[0])
        else:
            scale = qp.scale.reshape(1, -1, 1)
            zp = qp.zero_point.reshape(1, -1, 1)
        qmin, qmax = qp.qmin, qp.qmax
    else:
        spec: Q.QuantSpec = payload
        # per-sample stats, pooled over the complex pair
        pooled = np.stack([xr, xi])  # [2, B, H, N]
        if spec.granularity == "per-head":
            red = (0, 3)
        else:
            red = (0, 2, 3)
        p = spec.percentile
        lo, hi = np.quantile(pooled, [1.0 - p, p], axis=red, keepdims=True, method="linear")
        base = Q.params_from_range(lo.reshape(-1), hi.reshape(-1), spec)
        scale = base.scale.reshape(lo.shape[1:])
        zp = base.zero_point.reshape(lo.shape[1:])
        qmin, qmax = base.qmin, base.qmax

    def fq(v):
        t = v / scale + zp
        q = np.clip(Q.round_half_away(t), qmin, qmax)
        return (q - zp) * scale, (t >= qmin) & (t <= qmax)

    xr2, mr = fq(xr)
    xi2, mi = fq(xi)
    return xr2, xi2, mr, mi


def ssm_scan(
    u: Tensor,
    ssm: DiscreteSSM,
    state_clip: tuple[float, float] = DEFAULT_STATE_CLIP,
    output_factor: float = 2.0,
    state_q: StateQuant = None,
    state_observer: Optional[Callable[[np.ndarray], None]] = None,
    observer_stride: int = 4,
) -> Tensor:
    """Batched recurrent execution of all heads: u [B, L, H] -> y [B, L, H].

    One tape node covers the whole time loop. Backward is full-length BPTT
    with the clip subgradient and, when the state is quantized, the
    straight-through mask folded in at every step. Dispatches to compiled
    kernels when available; per-step dynamic calibration always runs the
    numpy reference path.
    """
    if u.ndim != 3:
        raise ShapeError(f"ssm_scan expects [batch, time, heads], got {u.shape}")
    if _scanjit is not None and (state_q is None or state_q[0] == "static"):
        return _ssm_scan_jit(
            u, ssm, state_clip, output_factor, state_q, state_observer, observer_stride
        )
    return _ssm_scan_numpy(
        u, ssm, state_clip, output_factor, state_q, state_observer, observer_stride
    )


_SCRATCH: dict[tuple, list[np.ndarray]] = {}


def _scratch_take(shape, dtype) -> np.ndarray:
    pool = _SCRATCH.get((shape, np.dtype(dtype).str))
    if pool:
        return pool.pop()
    return np.empty(shape, dtype=dtype)


def _scratch_give(*arrays: np.ndarray) -> None:
    # recycling avoids re-faulting ~100 MB of history pages every batch
    for a in arrays:
        pool = _SCRATCH.setdefault((a.shape, a.dtype.str), [])
        if len(pool) < 8:
            pool.append(a)


def _ssm_scan_jit(u, ssm, state_clip, output_factor, state_q, state_observer, observer_stride):
    B, L, H = u.shape
    ar, ai = ssm.a_re.data, ssm.a_im.data
    br, bi = ssm.b_re.data, ssm.b_im.data
    cr, ci = ssm.c_re.data, ssm.c_im.data
    d = ssm.d.data
    n = ar.shape[1]
    lo, hi = state_clip
    f = float(output_factor)

    inputs = (u, ssm.a_re, ssm.a_im, ssm.b_re, ssm.b_im, ssm.c_re, ssm.c_im, ssm.d)
    need_grad = T.grad_enabled_for(*inputs)
    store = need_grad or state_observer is not None
    if store:
        hist = (L, B, H, n)
        xs_r = _scratch_take(hist, np.float64)
        xs_i = _scratch_take(hist, np.float64)
        mask_r = _scratch_take(hist, np.bool_)
        mask_i = _scratch_take(hist, np.bool_)
    else:
        xs_r = xs_i = np.empty((1, 1, 1, 1))
        mask_r = mask_i = np.empty((1, 1, 1, 1), dtype=bool)

    if state_q is None:
        y = _scanjit.scan_fwd(
            ar, ai, br, bi, cr, ci, d, u.data, lo, hi, f, store, xs_r, xs_i, mask_r, mask_i
        )
    else:
        qp: Q.QuantParams = state_q[1]
        scale = np.full(H, qp.scale[0]) if qp.channels == 1 else np.asarray(qp.scale)
        zp = np.full(H, qp.zero_point[0]) if qp.channels == 1 else np.asarray(qp.zero_point)
        y = _scanjit.scan_fwd_quant(
            ar, ai, br, bi, cr, ci, d, u.data, lo, hi, f,
            scale, zp, float(qp.qmin), float(qp.qmax),
            store, xs_r, xs_i, mask_r, mask_i,
        )
    if state_observer is not None:
        for t in range(0, L, observer_stride):
            rows = np.concatenate(
                [
                    np.moveaxis(xs_r[t], 1, -1).reshape(-1, H),
                    np.moveaxis(xs_i[t], 1, -1).reshape(-1, H),
                ]
            )
            state_observer(rows)

    out = Tensor(y)
    if not need_grad:
        if store:
            _scratch_give(xs_r, xs_i, mask_r, mask_i)
        return out

    def bwd(gy):
        grads = _scanjit.scan_bwd(
            ar, ai, br, bi, cr, ci, d, u.data,
            np.ascontiguousarray(gy), xs_r, xs_i, mask_r, mask_i, f,
        )
        _scratch_give(xs_r, xs_i, mask_r, mask_i)
        return grads

    return T.record(out, inputs, bwd)


def _ssm_scan_numpy(u, ssm, state_clip, output_factor, state_q, state_observer, observer_stride):
    """Reference implementation; also the only route for dynamic state quantization."""
    B, L, H = u.shape
    ar, ai = ssm.a_re.data, ssm.a_im.data          # [H, N]
    br, bi = ssm.b_re.data, ssm.b_im.data
    cr, ci = ssm.c_re.data, ssm.c_im.data
    d = ssm.d.data                                  # [H]
    n = ar.shape[1]
    lo, hi = state_clip
    f = output_factor
    inputs = (u, ssm.a_re, ssm.a_im, ssm.b_re, ssm.b_im, ssm.c_re, ssm.c_im, ssm.d)
    need_grad = T.grad_enabled_for(*inputs)

    xr = np.zeros((B, H, n))
    xi = np.zeros((B, H, n))
    y = np.empty((B, L, H))
    if need_grad:
        xs_r = np.empty((L, B, H, n))
        xs_i = np.empty((L, B, H, n))
        mask_r = np.empty((L, B, H, n), dtype=bool)
        mask_i = np.empty((L, B, H, n), dtype=bool)

    ud = u.data
    for t in range(L):
        u_t = ud[:, t, :]                           # [B, H]
        sr = ar * xr - ai * xi + br * u_t[:, :, None]
        si = ar * xi + ai * xr + bi * u_t[:, :, None]
        mr = (sr >= lo) & (sr <= hi)
        mi = (si >= lo) & (si <= hi)
        xr = np.clip(sr, lo, hi)
        xi = np.clip(si, lo, hi)
        if state_observer is not None and t % observer_stride == 0:
            rows = np.concatenate(
                [np.moveaxis(xr, 1, -1).reshape(-1, H), np.moveaxis(xi, 1, -1).reshape(-1, H)]
            )
            state_observer(rows)
        if state_q is not None:
            xr, xi, qr, qi = _state_quant_step(xr, xi, state_q)
            mr &= qr
            mi &= qi
        if need_grad:
            xs_r[t] = xr
            xs_i[t] = xi
            mask_r[t] = mr
            mask_i[t] = mi
        y[:, t, :] = f * ((xr * cr).sum(axis=2) - (xi * ci).sum(axis=2)) + d * u_t

    out = Tensor(y)
    if not need_grad:
        return out

    def bwd(gy):
        gxr = np.zeros((B, H, n))
        gxi = np.zeros((B, H, n))
        da_r = np.zeros((H, n))
        da_i = np.zeros((H, n))
        db_r = np.zeros((H, n))
        db_i = np.zeros((H, n))
        dc_r = np.zeros((H, n))
        dc_i = np.zeros((H, n))
        dd = np.zeros(H)
        gu = np.empty((B, L, H))
        for t in range(L - 1, -1, -1):
            g_t = gy[:, t, :]                       # [B, H]
            u_t = ud[:, t, :]
            xr_t, xi_t = xs_r[t], xs_i[t]
            # readout
            gf = f * g_t[:, :, None]
            gxr += gf * cr
            gxi -= gf * ci
            dc_r += np.einsum("bhn,bh->hn", xs_r[t], g_t) * f
            dc_i -= np.einsum("bhn,bh->hn", xs_i[t], g_t) * f
            dd += np.einsum("bh,bh->h", g_t, u_t)
            gu_t = g_t * d
            # through clip (+ straight-through) masks
            hr = gxr * mask_r[t]
            hi_ = gxi * mask_i[t]
            if t > 0:
                xpr, xpi = xs_r[t - 1], xs_i[t - 1]
                da_r += np.einsum("bhn,bhn->hn", hr, xpr) + np.einsum("bhn,bhn->hn", hi_, xpi)
                da_i += np.einsum("bhn,bhn->hn", hi_, xpr) - np.einsum("bhn,bhn->hn", hr, xpi)
            db_r += np.einsum("bhn,bh->hn", hr, u_t)
            db_i += np.einsum("bhn,bh->hn", hi_, u_t)
            gu_t = gu_t + (hr * br).sum(axis=2) + (hi_ * bi).sum(axis=2)
            gu[:, t, :] = gu_t
            # propagate to the previous state: conj(A) * h
            gxr, gxi = ar * hr + ai * hi_, ar * hi_ - ai * hr
        return (gu, da_r, da_i, db_r, db_i, dc_r, dc_i, dd)

    return T.record(out, inputs, bwd)


def ssm_kernel(ssm: DiscreteSSM, length: int, output_factor: float = 2.0) -> Tensor:
    """Materialize impulse-response kernels K [L, H] by iterated diagonal powers."""
    if length < 1:
        raise ShapeError("kernel length must be >= 1")
    a = ssm.a_re.data + 1j * ssm.a_im.data          # [H, N]
    b = ssm.b_re.data + 1j * ssm.b_im.data
    c = ssm.c_re.data + 1j * ssm.c_im.data
    H, n = a.shape
    f = output_factor

    powers = np.ones((length, H, n), dtype=np.complex128)
    if length > 1:
        powers[1:] = a
        powers = np.cumprod(powers, axis=0)         # powers[i] = a**i
    w = c * b
    k = f * np.einsum("lhn,hn->lh", powers, w).real
    out = Tensor(k)

    inputs = (ssm.a_re, ssm.a_im, ssm.b_re, ssm.b_im, ssm.c_re, ssm.c_im)
    if not T.grad_enabled_for(*inputs):
        return out

    def bwd(gk):
        # work on real/imag views to avoid materializing 2x L*H*N complex temps
        pr, pi = powers.real, powers.imag
        dw = f * (
            np.einsum("lh,lhn->hn", gk, pr) - 1j * np.einsum("lh,lhn->hn", gk, pi)
        )
        if length > 1:
            lg = np.arange(1, length, dtype=np.float64)[:, None] * gk[1:]
            s = np.einsum("lh,lhn->hn", lg, pr[:-1]) - 1j * np.einsum(
                "lh,lhn->hn", lg, pi[:-1]
            )
            da = f * w.conj() * s  # sum_l l*conj(P[l-1])*gk[l]*f*conj(w)
        else:
            da = np.zeros((H, n), dtype=np.complex128)
        dc = b.conj() * dw
        db = c.conj() * dw
        return (da.real, da.imag, db.real, db.imag, dc.real, dc.imag)

    return T.record(out, inputs, bwd)


_TOEPLITZ_IDX: dict[int, np.ndarray] = {}


def _toeplitz_index(length: int) -> np.ndarray:
    idx = _TOEPLITZ_IDX.get(length)
    if idx is None:
        i = np.arange(length)
        idx = (length - 1) - i[:, None] + i[None, :]  # row j, col i -> k[i - j]
        _TOEPLITZ_IDX[length] = idx
    return idx


def causal_conv(u: Tensor, k: Tensor) -> Tensor:
    """Causal per-head convolution y[b,t,h] = sum_{j<=t} u[b,j,h] * k[t-j,h].

    Realized as one Toeplitz matmul per head so BLAS does the O(L^2) work.
    """
    if u.ndim != 3 or k.ndim != 2 or u.shape[1] != k.shape[0] or u.shape[2] != k.shape[1]:
        raise ShapeError(f"causal_conv shapes disagree: u {u.shape}, k {k.shape}")
    B, L, H = u.shape
    idx = _toeplitz_index(L)
    mats = []
    y = np.empty((B, L, H))
    # contiguous copies matter: BLAS needs them, and the head slices are strided
    uc = [np.ascontiguousarray(u.data[:, :, h]) for h in range(H)]
    for h in range(H):
        padded = np.concatenate([np.zeros(L - 1), k.data[:, h]])
        m = padded[idx]                              # upper-triangular Toeplitz [L, L]
        mats.append(m)
        y[:, :, h] = uc[h] @ m

    out = Tensor(y)
    if not T.grad_enabled_for(u, k):
        return out

    def bwd(gy):
        gu = np.empty((B, L, H))
        gk = np.empty((L, H))
        keys = idx.ravel()  # idx[i, j] = (j - i) + L - 1, the diagonal offset key
        for h in range(H):
            m = mats[h]
            gyh = np.ascontiguousarray(gy[:, :, h])
            gu[:, :, h] = gyh @ m.T
            # gk[d] = sum_i G[i, i-d] with G = gy^T u: sum the (-d)-diagonal
            g = gyh.T @ uc[h]
            sums = np.bincount(keys, weights=g.ravel(), minlength=2 * L - 1)
            gk[:, h] = sums[L - 1 :: -1]
        return (gu, gk)

    return T.record(out, (u, k), bwd)


# ---------------------------------------------------------------------------
# layer and model forward

_ACT_COMPONENT = {
    "ssm_input": "ssm_activations",
    "ssm_output": "ssm_activations",
    "post_gelu": "outer_activations",
    "post_glu": "outer_activations",
    "encoder_output": "outer_activations",
    "decoder_output": "outer_activations",
}


def _act(qrt: Optional[Q.QuantRuntime], x: Tensor, site: str, kind: str) -> Tensor:
    if qrt is None:
        return x
    return qrt.act(x, site, _ACT_COMPONENT[kind], channel_axis=-1, batch_axis=0)


def _effective_dssm(layer: Layer, cfg: ModelConfig, qrt: Optional[Q.QuantRuntime], prefix: str) -> DiscreteSSM:
    """Discrete-form system for this forward, with weight hooks applied."""
    ssm = layer.ssm
    dssm = discretize_layer(ssm, cfg.discretization) if ssm.kind == "continuous" else ssm
    if qrt is None or qrt.weight_mode == "none":
        return dssm
    a = qrt.weight_complex(ComplexTensor(dssm.a_re, dssm.a_im), "A_bar", f"{prefix}.A_bar", 0)
    b = qrt.weight_complex(ComplexTensor(dssm.b_re, dssm.b_im), "B_bar", f"{prefix}.B_bar", 0)
    c = qrt.weight_complex(ComplexTensor(dssm.c_re, dssm.c_im), "C_bar", f"{prefix}.C_bar", 0)
    d = qrt.weight(dssm.d, "D_bar", f"{prefix}.D_bar", 0)
    return DiscreteSSM(a.re, a.im, b.re, b.im, c.re, c.im, d)


def layer_forward_batch(
    x: Tensor,
    layer: Layer,
    cfg: ModelConfig,
    mode: Optional[str] = None,
    qrt: Optional[Q.QuantRuntime] = None,
    prefix: str = "layers.0",
) -> Tensor:
    """One block over a batch: [B, L, H] -> [B, L, H]."""
    if x.ndim != 3 or x.shape[2] != cfg.heads:
        raise ShapeError(f"expected [batch, time, {cfg.heads}] input, got {x.shape}")
    mode = mode or cfg.mode
    H = cfg.heads

    if qrt is not None and qrt.weight_mode != "none":
        ln_g = qrt.weight(layer.ln_g, "outer_weights", f"{prefix}.ln.gain", 0)
        ln_b = qrt.weight(layer.ln_b, "outer_weights", f"{prefix}.ln.bias", 0)
        mix_w = qrt.weight(layer.mix_w, "outer_weights", f"{prefix}.mix.w", 1)
        mix_b = qrt.weight(layer.mix_b, "outer_weights", f"{prefix}.mix.b", 0)
    else:
        ln_g, ln_b, mix_w, mix_b = layer.ln_g, layer.ln_b, layer.mix_w, layer.mix_b

    z = T.layer_norm(x, ln_g, ln_b) if cfg.use_layernorm else x
    z = _act(qrt, z, f"{prefix}.ssm_input", "ssm_input")

    dssm = _effective_dssm(layer, cfg, qrt, prefix)
    if mode == "recurrent":
        state_site = f"{prefix}.state"
        state_q = qrt.state_plan(state_site) if qrt is not None else None
        observer = qrt.state_observer(state_site) if qrt is not None else None
        y = ssm_scan(
            z,
            dssm,
            state_clip=cfg.state_clip,
            output_factor=cfg.output_factor,
            state_q=state_q,
            state_observer=observer,
        )
    else:
        k = ssm_kernel(dssm, x.shape[1], cfg.output_factor)
        y = causal_conv(z, k)
        d3 = T.expand(T.reshape(dssm.d, (1, 1, H)), z.shape)
        y = T.add(y, T.mul(d3, z))
    y = _act(qrt, y, f"{prefix}.ssm_output", "ssm_output")

    g = Q.qgelu(y) if (qrt is not None and qrt.use_qgelu) else T.gelu(y)
    g = _act(qrt, g, f"{prefix}.post_gelu", "post_gelu")

    m = T.linear(g, mix_w, mix_b)
    gate = T.sigmoid(T.slice_axis(m, 2, H, 2 * H))
    glu = T.mul(T.slice_axis(m, 2, 0, H), gate)
    glu = _act(qrt, glu, f"{prefix}.post_glu", "post_glu")

    return T.add(x, glu) if cfg.use_residual else glu


def model_forward_batch(
    model: S4DModel,
    seqs: Tensor,
    mode: Optional[str] = None,
    qrt: Optional[Q.QuantRuntime] = None,
) -> Tensor:
    """Full stack over a batch of scalar sequences: [B, L] -> logits [B, classes]."""
    cfg = model.config
    if seqs.ndim != 2 or seqs.shape[1] != cfg.seq_len:
        raise ShapeError(f"expected [batch, {cfg.seq_len}] sequences, got {seqs.shape}")
    B, L = seqs.shape
    if qrt is not None and qrt.weight_mode != "none":
        enc_w = qrt.weight(model.enc_w, "outer_weights", "encoder.w", 1)
        enc_b = qrt.weight(model.enc_b, "outer_weights", "encoder.b", 0)
        dec_w = qrt.weight(model.dec_w, "outer_weights", "decoder.w", 1)
        dec_b = qrt.weight(model.dec_b, "outer_weights", "decoder.b", 0)
    else:
        enc_w, enc_b, dec_w, dec_b = model.enc_w, model.enc_b, model.dec_w, model.dec_b

    x = T.linear(T.reshape(seqs, (B, L, 1)), enc_w, enc_b)
    x = _act(qrt, x, "encoder_output", "encoder_output")
    for i, layer in enumerate(model.layers):
        x = layer_forward_batch(x, layer, cfg, mode, qrt, prefix=f"layers.{i}")
    pooled = T.mean_(x, axis=1)
    logits = T.linear(pooled, dec_w, dec_b)
    return _act(qrt, logits, "decoder_output", "decoder_output")


def layer_forward(
    u: Tensor,
    layer: Layer,
    cfg: ModelConfig,
    mode: Optional[str] = None,
    qrt: Optional[Q.QuantRuntime] = None,
) -> Tensor:
    """Single-sequence block forward: [L, H] -> [L, H]."""
    out = layer_forward_batch(
        T.reshape(u, (1, *u.shape)), layer, cfg, mode, qrt, prefix="layers.0"
    )
    return T.reshape(out, u.shape)


def model_forward(
    seq: Tensor,
    model: S4DModel,
    mode: Optional[str] = None,
    qrt: Optional[Q.QuantRuntime] = None,
) -> Tensor:
    """Single-sequence forward: [L] -> logits [classes]."""
    logits = model_forward_batch(model, T.reshape(seq, (1, -1)), mode, qrt)
    return T.reshape(logits, (model.config.n_classes,))


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob

CHECKPOINT_FORMAT = "s4d-checkpoint-v1"


def save_checkpoint(model: S4DModel, path, extra: Optional[dict] = None) -> None:
    """Write `<path>.json` (manifest) and `<path>.bin` (parameter blob)."""
    path = Path(path)
    tensors = []
    offset = 0
    blobs = []
    for name, t in model.named_parameters():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "<f8",
        "config": model.config.to_dict(),
        "param_form": model.layers[0].ssm.kind,
        "tensors": tensors,
        "total_values": offset,
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    path.with_suffix(".bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> tuple[S4DModel, dict]:
    """Rebuild a model from a manifest/blob pair; returns (model, manifest)."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint manifest: {path.with_suffix('.json')}")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != manifest["total_values"]:
        raise ValueError("checkpoint blob size disagrees with its manifest")
    config = ModelConfig.from_dict(manifest["config"])
    model = init_s4d(config)
    if manifest["param_form"] == "discrete":
        model = to_discrete(model)
    named = dict(model.named_parameters())
    listed = {e["name"] for e in manifest["tensors"]}
    if listed != set(named):
        raise ValueError("checkpoint tensor names do not match this model layout")
    for entry in manifest["tensors"]:
        t = named[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise ValueError(f"shape mismatch for {entry['name']}: {shape} vs {t.shape}")
        start = entry["offset"]
        t.data = blob[start : start + t.size].reshape(shape).copy()
    return model, manifest
