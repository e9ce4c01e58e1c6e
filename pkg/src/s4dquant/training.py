"""Optimizer, evaluation, and the pretraining loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as D
from . import tensor as T
from .model import S4DModel, model_forward_batch
from .quant import QuantRuntime
from .tensor import Tape, Tensor


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: Optional[tuple[float, float]] = None
    mode: str = "convolutional"  # the parallel mode; evaluation is recurrent
    seed: int = 0
    early_stop_accuracy: Optional[float] = None
    eval_batch_size: int = 128

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["betas"] = list(self.betas)
        d["grad_clip"] = list(self.grad_clip) if self.grad_clip else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        gc = d.get("grad_clip")
        d["grad_clip"] = tuple(gc) if gc else None
        return cls(**d)


class Adam:
    """Plain Adam over a fixed parameter list; state keyed by position."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            p.data = p.data - self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def clip_gradients(params: list[Tensor], bounds: tuple[float, float]) -> None:
    lo, hi = bounds
    for p in params:
        if p.grad is not None:
            np.clip(p.grad, lo, hi, out=p.grad)


def evaluate(
    model: S4DModel,
    samples: list[D.SequenceSample],
    batch_size: int = 128,
    mode: str = "recurrent",
    qrt: Optional[QuantRuntime] = None,
) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) over samples in their stored order."""
    correct = 0
    loss_sum = 0.0
    n = len(samples)
    for values, labels in D.batches(samples, batch_size):
        logits = model_forward_batch(model, Tensor(values), mode=mode, qrt=qrt)
        loss = T.softmax_cross_entropy(logits, labels)
        loss_sum += float(loss.data) * len(labels)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / n, loss_sum / n


def run_calibration_pass(
    model: S4DModel,
    calibration_samples: list[D.SequenceSample],
    qrt: QuantRuntime,
    batch_size: int = 64,
    mode: str = "recurrent",
) -> None:
    """Forward all calibration data with observers on, then freeze site ranges."""
    qrt.observing = True
    try:
        for values, _ in D.batches(calibration_samples, batch_size):
            model_forward_batch(model, Tensor(values), mode=mode, qrt=qrt)
    finally:
        qrt.observing = False
    for component in ("state", "ssm_activations", "outer_activations"):
        spec = qrt.act_specs.get(component)
        if spec is not None and spec.calibration == "static":
            for site in list(qrt.store._chunks):
                if _component_of_site(site) == component:
                    qrt.store.finalize(site, spec)


def _component_of_site(site: str) -> str:
    leaf = site.rsplit(".", 1)[-1]
    if leaf == "state":
        return "state"
    if leaf in ("ssm_input", "ssm_output"):
        return "ssm_activations"
    return "outer_activations"


def pretrain(
    model: S4DModel,
    split: D.DatasetSplit,
    cfg: TrainConfig,
    log=None,
) -> list[dict]:
    """Minimize cross-entropy with Adam; returns one metrics record per epoch."""
    if not split.train:
        raise D.DataError("empty training split")
    opt = Adam(model.parameters(), cfg.lr, cfg.betas, cfg.eps)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        t0 = time.time()
        losses = []
        for b, (values, labels) in enumerate(
            D.batches(split.train, cfg.batch_size, seed=cfg.seed, epoch=epoch)
        ):
            opt.zero_grad()
            with Tape() as tape:
                logits = model_forward_batch(model, Tensor(values), mode=cfg.mode)
                loss = T.softmax_cross_entropy(logits, labels)
                if not np.isfinite(loss.data):
                    raise DivergenceError(epoch, b, "non-finite loss")
                tape.backward(loss)
            if cfg.grad_clip is not None:
                clip_gradients(opt.params, cfg.grad_clip)
            opt.step()
            losses.append(float(loss.data))
        val_acc, val_loss = (
            evaluate(model, split.validation, cfg.eval_batch_size)
            if split.validation
            else (float("nan"), float("nan"))
        )
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_accuracy": val_acc,
            "val_loss": val_loss,
            "seconds": time.time() - t0,
        }
        history.append(rec)
        if log:
            log(
                f"epoch {epoch}: train_loss {rec['train_loss']:.4f} "
                f"val_acc {val_acc:.4f} ({rec['seconds']:.1f}s)"
            )
        if cfg.early_stop_accuracy is not None and val_acc >= cfg.early_stop_accuracy:
            break
    return history
