"""Quantization-aware fine-tuning in recurrent mode.

Starts from a PTQ'd model, keeps fake quantization active in every forward
pass, and trains with straight-through gradients, component-wise gradient
clipping, and state clipping. Three transition-matrix parameterizations are
supported:

  discrete     train the discrete system matrices directly
  continuous   train the original continuous-time parameters; the
               transition matrix is rebuilt every step as
               quantize(discretize(A, dt)) with gradients passed through
  frozen_abar  as discrete, but the (already quantized) transition matrix
               receives no updates at all
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import data as D
from . import tensor as T
from .model import (
    DiscreteSSMParams,
    S4DModel,
    SSMHeadParams,
    discretize,
    model_forward_batch,
)
from .ptq import HeteroQuantConfig, apply_ptq
from .quant import QuantRuntime, QuantSpec, calibrate, calibrate_complex, quantize_complex
from .tensor import ComplexTensor, Tape, Tensor
from .training import Adam, DivergenceError, clip_gradients, evaluate

PARAMETERIZATIONS = ("discrete", "continuous", "frozen_abar")
RECALIBRATIONS = ("frozen", "per_step", "per_epoch")


@dataclass
class QATConfig:
    epochs: int = 10
    lr: float = 1e-4
    grad_clip: tuple[float, float] = (-1000.0, 1000.0)
    state_clip: tuple[float, float] = (-50.0, 50.0)
    hetero: HeteroQuantConfig = field(default_factory=HeteroQuantConfig)
    parameterization: str = "discrete"
    weight_recalibration: str = "per_step"
    batch_size: int = 64
    seed: int = 0
    project_abar_to_unit_disk: bool = False

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.weight_recalibration not in RECALIBRATIONS:
            raise ValueError(f"unknown recalibration policy {self.weight_recalibration!r}")
        for name in ("grad_clip", "state_clip"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo == -hi and hi > 0):
                raise ValueError(f"{name} must be a finite symmetric range, got {(lo, hi)}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["grad_clip"] = list(self.grad_clip)
        d["state_clip"] = list(self.state_clip)
        d["hetero"] = self.hetero.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QATConfig":
        d = dict(d)
        d["grad_clip"] = tuple(d.get("grad_clip", (-1000.0, 1000.0)))
        d["state_clip"] = tuple(d.get("state_clip", (-50.0, 50.0)))
        if isinstance(d.get("hetero"), dict):
            d["hetero"] = HeteroQuantConfig.from_dict(d["hetero"])
        return cls(**d)


def rebuild_abar_continuous(
    head: SSMHeadParams, hetero: HeteroQuantConfig
) -> DiscreteSSMParams:
    """Discretize a continuous head, then quantize: the per-step rebuild used
    by the continuous parameterization. Gradients reach the continuous
    parameters through the straight-through rounding."""
    p = discretize(head, "zoh")
    a_bar, b_bar, c_bar, d_bar = p.A_bar, p.B_bar, p.C_bar, p.D_bar
    if hetero.A_bar is not None:
        a_bar = quantize_complex(a_bar, hetero.A_bar, channel_axis=None, pooled=hetero.pooled_complex)
    if hetero.B_bar is not None:
        b_bar = quantize_complex(b_bar, hetero.B_bar, channel_axis=None, pooled=hetero.pooled_complex)
    if hetero.C_bar is not None:
        c_bar = quantize_complex(c_bar, hetero.C_bar, channel_axis=None, pooled=hetero.pooled_complex)
    if hetero.D_bar is not None:
        from .quant import fake_quant

        qp = calibrate(d_bar.data, hetero.D_bar, None)
        d_bar = fake_quant(d_bar, qp, None)
    return DiscreteSSMParams(A_bar=a_bar, B_bar=b_bar, C_bar=c_bar, D_bar=d_bar)


def trainable_parameters(model: S4DModel, parameterization: str) -> list[tuple[str, Tensor]]:
    """The named tensors the optimizer may update under a parameterization."""
    named = model.named_parameters()
    if parameterization == "frozen_abar":
        return [(n, t) for n, t in named if ".ssm.a_re" not in n and ".ssm.a_im" not in n]
    return named


def _weight_sites_params(model: S4DModel, hetero: HeteroQuantConfig) -> dict:
    """Calibrated params for every quantized weight site (frozen policies)."""
    out = {}

    def real(site, t, spec, axis):
        if spec is None:
            return
        ax = axis if spec.granularity == "per-head" else None
        out[site] = calibrate(t.data, spec, ax)

    def cplx(site, tr, ti, spec, axis):
        if spec is None:
            return
        ax = axis if spec.granularity == "per-head" else None
        out[site] = calibrate_complex(tr.data + 1j * ti.data, spec, ax)

    real("encoder.w", model.enc_w, hetero.outer_weights, 1)
    real("encoder.b", model.enc_b, hetero.outer_weights, 0)
    for i, layer in enumerate(model.layers):
        p = f"layers.{i}"
        ssm = layer.ssm
        if ssm.kind == "discrete":
            cplx(f"{p}.A_bar", ssm.a_re, ssm.a_im, hetero.A_bar, 0)
            cplx(f"{p}.B_bar", ssm.b_re, ssm.b_im, hetero.B_bar, 0)
            cplx(f"{p}.C_bar", ssm.c_re, ssm.c_im, hetero.C_bar, 0)
            real(f"{p}.D_bar", ssm.d, hetero.D_bar, 0)
        real(f"{p}.ln.gain", layer.ln_g, hetero.outer_weights, 0)
        real(f"{p}.ln.bias", layer.ln_b, hetero.outer_weights, 0)
        real(f"{p}.mix.w", layer.mix_w, hetero.outer_weights, 1)
        real(f"{p}.mix.b", layer.mix_b, hetero.outer_weights, 0)
    real("decoder.w", model.dec_w, hetero.outer_weights, 1)
    real("decoder.b", model.dec_b, hetero.outer_weights, 0)
    return out


def prepare_qat(
    pretrained: S4DModel,
    cfg: QATConfig,
    calib_data: Optional[list] = None,
) -> tuple[S4DModel, QuantRuntime]:
    """PTQ the pretrained model, then set up the trainable form and runtime."""
    qm = apply_ptq(pretrained, cfg.hetero, calib_data)
    if cfg.parameterization == "continuous":
        model = pretrained.copy()
        if model.layers[0].ssm.kind != "continuous":
            raise ValueError("continuous parameterization needs a continuous-form model")
    else:
        model = qm.model  # discrete form, PTQ lattices baked in as the start
    model.config.state_clip = cfg.state_clip

    skip = frozenset({"A_bar"}) if cfg.parameterization == "frozen_abar" else frozenset()
    weight_mode = "live" if cfg.weight_recalibration == "per_step" else "frozen"
    runtime = QuantRuntime(
        act_specs=cfg.hetero.act_specs(),
        weight_specs=cfg.hetero.weight_specs(),
        store=qm.runtime.store,
        weight_mode=weight_mode,
        use_qgelu=cfg.hetero.qgelu_active(),
        frozen_weight_params=(
            _weight_sites_params(model, cfg.hetero) if weight_mode == "frozen" else None
        ),
        skip_weight_roles=skip,
        pooled_complex=cfg.hetero.pooled_complex,
    )
    return model, runtime


def _nonfinite_tensor_name(model: S4DModel) -> str:
    for name, t in model.named_parameters():
        if not np.isfinite(t.data).all():
            return name
        if t.grad is not None and not np.isfinite(t.grad).all():
            return name + ".grad"
    return "unknown"


def qat_step(
    model: S4DModel,
    values: np.ndarray,
    labels: np.ndarray,
    cfg: QATConfig,
    runtime: QuantRuntime,
    opt: Adam,
    epoch: int = 0,
    batch: int = 0,
) -> float:
    """One fine-tuning step: quantized recurrent forward, STE backward,
    gradient clipping, optimizer update on the parameterization's set."""
    opt.zero_grad()
    with Tape() as tape:
        logits = model_forward_batch(model, Tensor(values), mode="recurrent", qrt=runtime)
        loss = T.softmax_cross_entropy(logits, labels)
        if not np.isfinite(loss.data):
            raise DivergenceError(epoch, batch, f"tensor {_nonfinite_tensor_name(model)}")
        tape.backward(loss)
    clip_gradients(opt.params, cfg.grad_clip)
    opt.step()
    if cfg.project_abar_to_unit_disk and cfg.parameterization == "discrete":
        for layer in model.layers:
            ssm = layer.ssm
            if ssm.kind == "discrete":
                mag = np.sqrt(ssm.a_re.data**2 + ssm.a_im.data**2)
                shrink = np.where(mag > 1.0, 1.0 / np.maximum(mag, 1e-12), 1.0)
                ssm.a_re.data = ssm.a_re.data * shrink
                ssm.a_im.data = ssm.a_im.data * shrink
    return float(loss.data)


def qat_train(
    pretrained: S4DModel,
    split: D.DatasetSplit,
    cfg: QATConfig,
    eval_samples: Optional[list] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[S4DModel, QuantRuntime, list[dict]]:
    """Fine-tune for cfg.epochs; returns the tuned model, its runtime plan,
    and per-epoch records (train loss, test accuracy)."""
    model, runtime = prepare_qat(pretrained, cfg, split.calibration)
    eval_samples = eval_samples if eval_samples is not None else split.test
    abar_before = [
        (layer.ssm.a_re.data.copy(), layer.ssm.a_im.data.copy())
        for layer in model.layers
        if layer.ssm.kind == "discrete"
    ]
    opt = Adam([t for _, t in trainable_parameters(model, cfg.parameterization)], cfg.lr)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        t0 = time.time()
        if cfg.weight_recalibration == "per_epoch":
            runtime.frozen_weight_params = _weight_sites_params(model, cfg.hetero)
        losses = []
        for b, (values, labels) in enumerate(
            D.batches(split.train, cfg.batch_size, seed=cfg.seed, epoch=epoch)
        ):
            losses.append(qat_step(model, values, labels, cfg, runtime, opt, epoch, b))
        acc, test_loss = evaluate(model, eval_samples, 128, "recurrent", runtime)
        rec = {
            "epoch": epoch,
            "parameterization": cfg.parameterization,
            "train_loss": float(np.mean(losses)),
            "accuracy": acc,
            "loss": test_loss,
            "seed": cfg.seed,
            "seconds": time.time() - t0,
        }
        history.append(rec)
        if log:
            log(
                f"qat {cfg.parameterization} epoch {epoch}: "
                f"loss {rec['train_loss']:.4f} acc {acc:.4f} ({rec['seconds']:.1f}s)"
            )
    if cfg.parameterization == "frozen_abar":
        after = [
            (layer.ssm.a_re.data, layer.ssm.a_im.data)
            for layer in model.layers
            if layer.ssm.kind == "discrete"
        ]
        for (br, bi), (ar, ai) in zip(abar_before, after):
            if not (np.array_equal(br, ar) and np.array_equal(bi, ai)):
                raise AssertionError("frozen transition matrix drifted during fine-tuning")
    return model, runtime, history
