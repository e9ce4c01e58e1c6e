"""Post-training quantization: heterogeneous schemes and sensitivity sweeps.

apply_ptq bakes weight lattices into a discrete-form copy of a pretrained
model, calibrates any static activation/state ranges on a held-out split,
and returns a wrapper that always evaluates in recurrent mode. The sweep
drivers reproduce the sensitivity ablations: per-matrix, state versus other
activations under both calibration modes, granularity, symmetry, and width
scaling.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import data as D
from .model import S4DModel, model_forward_batch, to_discrete
from .quant import (
    CalibrationMissing,
    CalibrationStore,
    QuantRuntime,
    QuantSpec,
    calibrate,
    calibrate_complex,
    fake_quant_array,
)
from .tensor import Tensor
from .training import evaluate, run_calibration_pass

COMPONENTS = (
    "A_bar",
    "B_bar",
    "C_bar",
    "D_bar",
    "state",
    "ssm_activations",
    "outer_weights",
    "outer_activations",
)


@dataclass
class HeteroQuantConfig:
    """Per-component quantization assignment; None means full precision."""

    A_bar: Optional[QuantSpec] = None
    B_bar: Optional[QuantSpec] = None
    C_bar: Optional[QuantSpec] = None
    D_bar: Optional[QuantSpec] = None
    state: Optional[QuantSpec] = None
    ssm_activations: Optional[QuantSpec] = None
    outer_weights: Optional[QuantSpec] = None
    outer_activations: Optional[QuantSpec] = None
    use_qgelu: Optional[bool] = None  # None: follow activation quantization
    pooled_complex: bool = True

    def spec(self, component: str) -> Optional[QuantSpec]:
        if component not in COMPONENTS:
            raise ValueError(f"unknown component {component!r}")
        return getattr(self, component)

    def weight_specs(self) -> dict[str, Optional[QuantSpec]]:
        return {
            "A_bar": self.A_bar,
            "B_bar": self.B_bar,
            "C_bar": self.C_bar,
            "D_bar": self.D_bar,
            "outer_weights": self.outer_weights,
        }

    def act_specs(self) -> dict[str, Optional[QuantSpec]]:
        return {
            "state": self.state,
            "ssm_activations": self.ssm_activations,
            "outer_activations": self.outer_activations,
        }

    def qgelu_active(self) -> bool:
        if self.use_qgelu is not None:
            return self.use_qgelu
        return self.ssm_activations is not None or self.outer_activations is not None

    def needs_static_calibration(self) -> bool:
        return any(
            s is not None and s.calibration == "static" for s in self.act_specs().values()
        )

    def is_fully_fp(self) -> bool:
        return all(self.spec(c) is None for c in COMPONENTS)

    def to_dict(self) -> dict:
        out = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, QuantSpec) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HeteroQuantConfig":
        kw = {}
        for f in dc_fields(cls):
            v = d.get(f.name)
            if f.name in COMPONENTS and isinstance(v, dict):
                v = QuantSpec.from_dict(v)
            if v is not None or f.name in d:
                kw[f.name] = v
        return cls(**kw)

    @classmethod
    def uniform(
        cls,
        bits: int,
        symmetry: str = "asymmetric",
        granularity: str = "per-head",
        calibration: str = "static",
        percentile: float = 0.99999,
    ) -> "HeteroQuantConfig":
        """Everything quantized at one width (the full-model sweep setting)."""
        mk = lambda: QuantSpec(bits, symmetry, granularity, calibration, percentile)
        return cls(
            A_bar=mk(),
            B_bar=mk(),
            C_bar=mk(),
            D_bar=mk(),
            state=mk(),
            ssm_activations=mk(),
            outer_weights=mk(),
            outer_activations=mk(),
        )

    @classmethod
    def w4a6(cls, a_bar_bits: int = 8, state_bits: int = 8) -> "HeteroQuantConfig":
        """The heterogeneous scheme: 4-bit weights, 6-bit activations, with
        the transition matrix and state at their own widths."""
        w = lambda b: QuantSpec(b, "asymmetric", "per-head", "static")
        return cls(
            A_bar=w(a_bar_bits),
            B_bar=w(4),
            C_bar=w(4),
            D_bar=w(4),
            state=w(state_bits),
            ssm_activations=w(6),
            outer_weights=w(4),
            outer_activations=w(6),
        )


# ---------------------------------------------------------------------------
# applying PTQ

def _bake_weights(model: S4DModel, cfg: HeteroQuantConfig) -> None:
    """Fake-quantize parameter values in place (model must be discrete-form)."""

    def bake_real(t, spec, axis):
        if spec is None:
            return
        ax = axis if spec.granularity == "per-head" else None
        qp = calibrate(t.data, spec, ax)
        t.data = fake_quant_array(t.data, qp, ax)

    def bake_complex(tr, ti, spec, axis):
        if spec is None:
            return
        ax = axis if spec.granularity == "per-head" else None
        if cfg.pooled_complex:
            qp = calibrate_complex(tr.data + 1j * ti.data, spec, ax)
            tr.data = fake_quant_array(tr.data, qp, ax)
            ti.data = fake_quant_array(ti.data, qp, ax)
        else:
            bake_real(tr, spec, axis)
            bake_real(ti, spec, axis)

    bake_real(model.enc_w, cfg.outer_weights, 1)
    bake_real(model.enc_b, cfg.outer_weights, 0)
    for layer in model.layers:
        ssm = layer.ssm
        bake_complex(ssm.a_re, ssm.a_im, cfg.A_bar, 0)
        bake_complex(ssm.b_re, ssm.b_im, cfg.B_bar, 0)
        bake_complex(ssm.c_re, ssm.c_im, cfg.C_bar, 0)
        bake_real(ssm.d, cfg.D_bar, 0)
        bake_real(layer.mix_w, cfg.outer_weights, 1)
        bake_real(layer.mix_b, cfg.outer_weights, 0)
        bake_real(layer.ln_g, cfg.outer_weights, 0)
        bake_real(layer.ln_b, cfg.outer_weights, 0)
    bake_real(model.dec_w, cfg.outer_weights, 1)
    bake_real(model.dec_b, cfg.outer_weights, 0)


@dataclass
class QuantizedModel:
    """A PTQ'd model plus the runtime plan needed to evaluate it."""

    model: S4DModel  # discrete form, weight lattices baked in
    hetero: HeteroQuantConfig
    runtime: QuantRuntime

    def forward(self, seqs: Tensor) -> Tensor:
        return model_forward_batch(self.model, seqs, mode="recurrent", qrt=self.runtime)

    def evaluate(self, samples, batch_size: int = 128) -> tuple[float, float]:
        return evaluate(self.model, samples, batch_size, "recurrent", self.runtime)


def apply_ptq(
    model: S4DModel,
    cfg: HeteroQuantConfig,
    calib_data: Optional[list] = None,
    calib_batch_size: int = 64,
) -> QuantizedModel:
    """Quantize a pretrained model per the heterogeneous assignment.

    Weights are baked onto their lattices; static activation/state sites are
    calibrated with a forward pass over calib_data (required in that case).
    Evaluation of the result runs in recurrent mode.
    """
    work = to_discrete(model)
    _bake_weights(work, cfg)
    runtime = QuantRuntime(
        act_specs=cfg.act_specs(),
        weight_specs={},
        store=CalibrationStore(),
        weight_mode="none",
        use_qgelu=cfg.qgelu_active(),
        pooled_complex=cfg.pooled_complex,
    )
    if cfg.needs_static_calibration():
        if not calib_data:
            raise CalibrationMissing(
                "static activation quantization needs a calibration split"
            )
        run_calibration_pass(work, calib_data, runtime, calib_batch_size, "recurrent")
    return QuantizedModel(model=work, hetero=cfg, runtime=runtime)


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepResult:
    name: str
    axes: list[str]
    rows: list[dict]  # one evaluated point per row, including seed and accuracy

    def aggregate(self) -> list[dict]:
        """Mean/std over seeds per sweep point; single-seed points are flagged."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            key = tuple(r[a] for a in self.axes)
            groups.setdefault(key, []).append(r)
        out = []
        for key, rs in sorted(groups.items(), key=lambda kv: str(kv[0])):
            accs = np.array([r["accuracy"] for r in rs], dtype=float)
            rec = dict(zip(self.axes, key))
            rec["mean_accuracy"] = float(accs.mean())
            rec["std_accuracy"] = float(accs.std(ddof=1)) if accs.size >= 2 else None
            rec["single_seed"] = accs.size < 2
            rec["seeds"] = sorted(int(r["seed"]) for r in rs)
            out.append(rec)
        return out

    def write_csv(self, path, config_hash: str = "") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = self.axes + ["seed", "accuracy"]
        with open(path, "w", newline="") as f:
            if config_hash:
                f.write(f"# config_hash={config_hash}\n")
            w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def write_json(self, path, config_hash: str = "") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "sweep": self.name,
            "config_hash": config_hash,
            "points": self.aggregate(),
        }
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))


DEFAULT_BITS_GRID = (2, 3, 4, 6, 8, 12, 16)

MATRICES = ("A_bar", "B_bar", "C_bar", "D_bar")


def _points(result: SweepResult, log: Optional[Callable[[str], None]]):
    def emit(row):
        result.rows.append(row)
        if log:
            log("  " + " ".join(f"{k}={v}" for k, v in row.items()))

    return emit


def sweep_matrix_sensitivity(
    models_by_seed: dict[int, S4DModel],
    eval_samples: list,
    bits_list=DEFAULT_BITS_GRID,
    log: Optional[Callable[[str], None]] = None,
) -> SweepResult:
    """Quantize one state-space matrix at a time; everything else stays FP."""
    result = SweepResult("matrix_sensitivity", ["component", "bits"], [])
    emit = _points(result, log)
    for seed, model in sorted(models_by_seed.items()):
        for comp in MATRICES:
            for bits in bits_list:
                cfg = HeteroQuantConfig(
                    **{comp: QuantSpec(bits, "asymmetric", "per-head", "static")}
                )
                qm = apply_ptq(model, cfg)
                acc, _ = qm.evaluate(eval_samples)
                emit({"component": comp, "bits": bits, "seed": seed, "accuracy": acc})
    return result


def sweep_state_vs_activations(
    models_by_seed: dict[int, S4DModel],
    eval_samples: list,
    calib_samples: list,
    bits_list=DEFAULT_BITS_GRID,
    modes=("static", "dynamic"),
    log: Optional[Callable[[str], None]] = None,
) -> SweepResult:
    """State-only versus all-other-activations quantization, static and dynamic."""
    result = SweepResult("state_vs_activations", ["target", "calibration", "bits"], [])
    emit = _points(result, log)
    for seed, model in sorted(models_by_seed.items()):
        for target in ("state", "non_state"):
            for mode in modes:
                for bits in bits_list:
                    spec = QuantSpec(bits, "asymmetric", "per-head", mode)
                    if target == "state":
                        cfg = HeteroQuantConfig(state=spec)
                    else:
                        cfg = HeteroQuantConfig(ssm_activations=spec, outer_activations=spec)
                    qm = apply_ptq(model, cfg, calib_samples)
                    acc, _ = qm.evaluate(eval_samples)
                    emit(
                        {
                            "target": target,
                            "calibration": mode,
                            "bits": bits,
                            "seed": seed,
                            "accuracy": acc,
                        }
                    )
    return result


def sweep_granularity(
    models_by_seed: dict[int, S4DModel],
    eval_samples: list,
    calib_samples: list,
    bits_list=DEFAULT_BITS_GRID,
    log: Optional[Callable[[str], None]] = None,
) -> SweepResult:
    """Full-model quantization, varying only per-head versus per-tensor."""
    result = SweepResult("granularity", ["granularity", "bits"], [])
    emit = _points(result, log)
    for seed, model in sorted(models_by_seed.items()):
        for gran in ("per-head", "per-tensor"):
            for bits in bits_list:
                cfg = HeteroQuantConfig.uniform(bits, "asymmetric", gran, "static")
                qm = apply_ptq(model, cfg, calib_samples)
                acc, _ = qm.evaluate(eval_samples)
                emit({"granularity": gran, "bits": bits, "seed": seed, "accuracy": acc})
    return result


def sweep_symmetry(
    models_by_seed: dict[int, S4DModel],
    eval_samples: list,
    calib_samples: list,
    bits_list=DEFAULT_BITS_GRID,
    log: Optional[Callable[[str], None]] = None,
) -> SweepResult:
    """Full-model quantization, varying only symmetric versus asymmetric."""
    result = SweepResult("symmetry", ["symmetry", "bits"], [])
    emit = _points(result, log)
    for seed, model in sorted(models_by_seed.items()):
        for sym in ("symmetric", "asymmetric"):
            for bits in bits_list:
                cfg = HeteroQuantConfig.uniform(bits, sym, "per-head", "static")
                qm = apply_ptq(model, cfg, calib_samples)
                acc, _ = qm.evaluate(eval_samples)
                emit({"symmetry": sym, "bits": bits, "seed": seed, "accuracy": acc})
    return result


def sweep_width(
    models_by_width_and_seed: dict[tuple[int, int], S4DModel],
    eval_samples: list,
    calib_samples: list,
    bits_list=DEFAULT_BITS_GRID,
    log: Optional[Callable[[str], None]] = None,
) -> SweepResult:
    """Full-model quantization across head counts; keys are (heads, seed)."""
    result = SweepResult("width_scaling", ["heads", "bits"], [])
    emit = _points(result, log)
    for (heads, seed), model in sorted(models_by_width_and_seed.items()):
        for bits in bits_list:
            cfg = HeteroQuantConfig.uniform(bits, "asymmetric", "per-head", "static")
            qm = apply_ptq(model, cfg, calib_samples)
            acc, _ = qm.evaluate(eval_samples)
            emit({"heads": heads, "bits": bits, "seed": seed, "accuracy": acc})
    return result
