"""Parameter inventory and memory accounting under mixed bit widths.

Bits are counted three ways because published savings figures rarely state
their basis: weights only, weights plus state buffers, and everything plus
quantizer overhead (one 32-bit scale per channel, plus a zero point at the
component's width for asymmetric schemes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import S4DModel

ROLES = ("A_bar", "B_bar", "C_bar", "D_bar", "outer_weight", "dt", "state", "activation")

# published reference points for the heterogeneous scheme (model tag -> percent)
REFERENCE_SAVINGS_W4A6_A8X8 = {"16h": 82.96, "64h": 84.05}


@dataclass
class InventoryEntry:
    name: str
    role: str
    element_count: int  # complex entries count once here; real_scalars doubles them
    complex: bool

    @property
    def real_scalars(self) -> int:
        return self.element_count * (2 if self.complex else 1)


@dataclass
class ParamInventory:
    entries: list[InventoryEntry]

    def by_role(self, role: str) -> list[InventoryEntry]:
        return [e for e in self.entries if e.role == role]

    def total_real_scalars(self, roles: Optional[tuple[str, ...]] = None) -> int:
        return sum(e.real_scalars for e in self.entries if roles is None or e.role in roles)


WEIGHT_ROLES = ("A_bar", "B_bar", "C_bar", "D_bar", "outer_weight", "dt")


def inventory(model: S4DModel) -> ParamInventory:
    """Complete enumeration: every parameter once, plus state/activation buffers."""
    entries: list[InventoryEntry] = []
    cfg = model.config
    H, N = cfg.heads, cfg.state_size

    def outer(name, t):
        entries.append(InventoryEntry(name, "outer_weight", t.size, False))

    outer("encoder.w", model.enc_w)
    outer("encoder.b", model.enc_b)
    for i, layer in enumerate(model.layers):
        p = f"layers.{i}"
        outer(f"{p}.ln.gain", layer.ln_g)
        outer(f"{p}.ln.bias", layer.ln_b)
        ssm = layer.ssm
        if ssm.kind == "continuous":
            entries.append(InventoryEntry(f"{p}.ssm.A", "A_bar", H * N, True))
            entries.append(InventoryEntry(f"{p}.ssm.B", "B_bar", H * N, True))
            entries.append(InventoryEntry(f"{p}.ssm.C", "C_bar", H * N, True))
            entries.append(InventoryEntry(f"{p}.ssm.D", "D_bar", H, False))
            entries.append(InventoryEntry(f"{p}.ssm.dt", "dt", H, False))
        else:
            entries.append(InventoryEntry(f"{p}.ssm.A_bar", "A_bar", H * N, True))
            entries.append(InventoryEntry(f"{p}.ssm.B_bar", "B_bar", H * N, True))
            entries.append(InventoryEntry(f"{p}.ssm.C_bar", "C_bar", H * N, True))
            entries.append(InventoryEntry(f"{p}.ssm.D_bar", "D_bar", H, False))
        outer(f"{p}.mix.w", layer.mix_w)
        outer(f"{p}.mix.b", layer.mix_b)
        # runtime buffers, listed separately from trainables
        entries.append(InventoryEntry(f"{p}.state", "state", H * N, True))
        entries.append(InventoryEntry(f"{p}.activations", "activation", H, False))
    outer("decoder.w", model.dec_w)
    outer("decoder.b", model.dec_b)

    inv = ParamInventory(entries)
    counted = inv.total_real_scalars(WEIGHT_ROLES)
    if counted != model.param_count():
        raise AssertionError(
            f"inventory drifted from the model: {counted} vs {model.param_count()}"
        )
    return inv


@dataclass
class FootprintReport:
    fp_bits_total: int
    quant_bits_total: int
    overhead_bits: int
    per_role: dict[str, dict]
    variants: dict[str, float]  # accounting basis -> savings percent

    @property
    def savings_percent(self) -> float:
        return 100.0 * (1.0 - self.quant_bits_total / self.fp_bits_total)


def _role_bits(cfg_bits: dict[str, Optional[int]], role: str, fp_bits: int) -> int:
    bits = cfg_bits.get(role)
    return fp_bits if bits is None else bits


def footprint(
    inv: ParamInventory,
    bits_by_role: dict[str, Optional[int]],
    fp_bits: int = 32,
    asymmetric_roles: frozenset = frozenset(),
    channels_by_role: Optional[dict[str, int]] = None,
    include_overhead: bool = True,
    include_buffers: bool = True,
) -> FootprintReport:
    """Account the model's storage at the given widths.

    bits_by_role maps each role to its width (None = full precision).
    Overhead counts one fp32 scale per quantized channel and, for asymmetric
    roles, a zero point at the role's width per channel.
    """
    per_role: dict[str, dict] = {}
    quant_total = 0
    fp_total = 0
    overhead_total = 0
    channels_by_role = channels_by_role or {}
    for role in ROLES:
        scalars = inv.total_real_scalars((role,))
        if scalars == 0:
            continue
        is_buffer = role in ("state", "activation")
        if is_buffer and not include_buffers:
            per_role[role] = {"real_scalars": scalars, "bits": None, "counted": False}
            continue
        bits = _role_bits(bits_by_role, role, fp_bits)
        q_bits = scalars * bits
        f_bits = scalars * fp_bits
        oh = 0
        if include_overhead and bits_by_role.get(role) is not None:
            channels = channels_by_role.get(role, 1)
            oh = channels * 32
            if role in asymmetric_roles:
                oh += channels * bits
        per_role[role] = {
            "real_scalars": scalars,
            "bits": bits,
            "param_bits": q_bits,
            "overhead_bits": oh,
            "counted": True,
        }
        quant_total += q_bits + oh
        fp_total += f_bits
        overhead_total += oh
    return FootprintReport(
        fp_bits_total=fp_total,
        quant_bits_total=quant_total,
        overhead_bits=overhead_total,
        per_role=per_role,
        variants={},
    )


def footprint_variants(
    inv: ParamInventory,
    bits_by_role: dict[str, Optional[int]],
    fp_bits: int = 32,
    asymmetric_roles: frozenset = frozenset(),
    channels_by_role: Optional[dict[str, int]] = None,
) -> dict[str, FootprintReport]:
    """The three accounting bases, most optimistic to most conservative."""
    weights_only_bits = {k: v for k, v in bits_by_role.items() if k in WEIGHT_ROLES}
    return {
        "weights_only": footprint(
            inv, weights_only_bits, fp_bits, frozenset(), None, False, False
        ),
        "weights_state": footprint(
            inv,
            {**bits_by_role, "activation": bits_by_role.get("activation")},
            fp_bits,
            frozenset(),
            None,
            False,
            True,
        ),
        "weights_state_overhead": footprint(
            inv, bits_by_role, fp_bits, asymmetric_roles, channels_by_role, True, True
        ),
    }


def hetero_bits_w4a6_a8x8() -> dict[str, Optional[int]]:
    """The heterogeneous assignment: 4-bit weights, 6-bit activations,
    8-bit transition matrix and state."""
    return {
        "A_bar": 8,
        "B_bar": 4,
        "C_bar": 4,
        "D_bar": 4,
        "outer_weight": 4,
        "state": 8,
        "activation": 6,
        "dt": None,
    }


def render_table(
    tag: str,
    reports: dict[str, FootprintReport],
    reference_percent: Optional[float] = None,
) -> str:
    """Plain-text table of the accounting variants, with the published point."""
    lines = [f"memory footprint, {tag}", f"{'variant':>24} {'savings %':>10} {'delta':>8}"]
    for name, rep in reports.items():
        s = rep.savings_percent
        if reference_percent is None:
            lines.append(f"{name:>24} {s:>10.2f} {'-':>8}")
        else:
            lines.append(f"{name:>24} {s:>10.2f} {s - reference_percent:>+8.2f}")
    if reference_percent is not None:
        closest = min(
            reports.items(), key=lambda kv: abs(kv[1].savings_percent - reference_percent)
        )
        lines.append(
            f"reference {reference_percent:.2f}%; closest basis: {closest[0]} "
            f"({closest[1].savings_percent:.2f}%)"
        )
    return "\n".join(lines)
