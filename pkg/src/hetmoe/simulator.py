"""Analytical cost model for expert-parallel execution.

Quantifies the compute and communication consequences of mixing
zero-computation experts into the layer:

* The idealized compute ratio versus an all-FFN layer of the same expert
  count is ``tau * n_ffn / (tau * n_ffn + n_zc)`` - the share of routed
  pairs that hit an FFN expert when loads settle at the tau-weighted split.
* Zero-computation experts are replicated on every device (their parameters
  are negligible), so only tokens routed to a remote FFN expert cross
  devices.

FLOP convention: 2 FLOPs per multiply-accumulate; an FFN token costs
2 * 2 * D * D_int, a constant-expert token 2 * 2 * D (tracked, but excluded
from the FFN-fraction numerator since it is negligible), zero/copy cost 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layer import LayerConfig

FLOPS_PER_MAC = 2
FLOAT_WIDTH_BYTES = 8


@dataclass(frozen=True)
class CostModel:
    flops_per_ffn_token: int
    flops_per_const_token: int
    bytes_per_token: int

    @classmethod
    def from_shape(cls, dim: int, intermediate_dim: int) -> "CostModel":
        return cls(
            flops_per_ffn_token=FLOPS_PER_MAC * 2 * dim * intermediate_dim,
            flops_per_const_token=FLOPS_PER_MAC * 2 * dim,
            bytes_per_token=dim * FLOAT_WIDTH_BYTES,
        )


@dataclass(frozen=True)
class Placement:
    """FFN experts spread round-robin over devices; every device also hosts
    replicas of all zero-computation experts."""

    n_devices: int
    ffn_device: np.ndarray  # [n_ffn] device index per FFN expert

    @classmethod
    def balanced(cls, n_ffn: int, n_devices: int) -> "Placement":
        if n_devices < 1:
            raise ValueError("need at least one device")
        return cls(n_devices=n_devices,
                   ffn_device=np.arange(n_ffn, dtype=np.int64) % n_devices)


def complexity_ratio(cfg: LayerConfig) -> float:
    """FFN-compute share of the mixed layer, in (0, 1]; 1 when no
    zero-computation experts are present."""
    return ratio_for(cfg.n_ffn, cfg.n_zc, cfg.tau)


def ratio_for(n_ffn: int, n_zc: int, tau: float) -> float:
    if n_ffn < 1 or n_zc < 0 or tau <= 0:
        raise ValueError("need n_ffn >= 1, n_zc >= 0, tau > 0")
    return tau * n_ffn / (tau * n_ffn + n_zc)


def predicted_speedup(n_ffn: int, n_zc: int, tau: float) -> float:
    """Idealized expert-forward speedup over the all-FFN baseline: 1/ratio - 1.

    An upper bound on measured gains: it ignores router and framework
    overheads, which only shrink the realized improvement.
    """
    return 1.0 / ratio_for(n_ffn, n_zc, tau) - 1.0


# Externally measured expert-forward throughput increases for the published
# shape family (fractions, e.g. 0.252 == +25.2%). Real measurements include
# fixed overheads, so the analytical prediction must dominate each entry.
MEASURED_THROUGHPUT_GAINS: list[tuple[str, int, int, float, float]] = [
    # (shape name, n_ffn, n_zc, tau, measured gain)
    ("small-8x4", 8, 4, 0.10, 1.645),
    ("small-8x4", 8, 4, 0.25, 0.927),
    ("small-8x4", 8, 4, 0.50, 0.382),
    ("small-8x4", 8, 4, 0.75, 0.252),
    ("small-8x4", 8, 4, 1.00, 0.191),
    ("base-16x4", 16, 4, 0.10, 1.112),
    ("base-16x4", 16, 4, 0.25, 0.587),
    ("base-16x4", 16, 4, 0.50, 0.301),
    ("base-16x4", 16, 4, 0.75, 0.221),
    ("base-16x4", 16, 4, 1.00, 0.152),
    ("large-32x8", 32, 8, 0.10, 0.635),
    ("large-32x8", 32, 8, 0.25, 0.443),
    ("large-32x8", 32, 8, 0.50, 0.283),
    ("large-32x8", 32, 8, 0.75, 0.218),
    ("large-32x8", 32, 8, 1.00, 0.157),
    ("deep-16x4", 16, 4, 0.75, 0.278),
]


@dataclass
class PlanView:
    """Minimal dispatch record the simulator needs: who was selected and
    which selections survived capacity. DispatchPlan satisfies the same
    shape; this lightweight form is reconstructed from trace files."""

    selected: np.ndarray  # [T, K] int
    kept: np.ndarray      # [T, K] bool


@dataclass
class CostReport:
    conventions: str
    n_layers: int
    n_tokens: int
    k: int
    selected_pairs: int
    selected_ffn_pairs: int
    kept_pairs: int
    kept_ffn_pairs: int
    kept_const_pairs: int
    formula_ratio: float
    selected_ffn_fraction: float   # pre-capacity; comparable to formula_ratio
    kept_ffn_fraction: float       # post-capacity; what actually executes
    predicted_speedup: float
    ffn_flops: int
    const_flops: int
    per_device_tokens: np.ndarray
    remote_ffn_tokens: int
    comm_bytes: int
    max_over_mean_load: float

    def to_text(self) -> str:
        lines = [
            "expert-parallel cost report",
            f"conventions: {self.conventions}",
            f"layers={self.n_layers} tokens={self.n_tokens} k={self.k}",
            f"selected pairs={self.selected_pairs} (ffn {self.selected_ffn_pairs})",
            f"kept pairs={self.kept_pairs} (ffn {self.kept_ffn_pairs}, const {self.kept_const_pairs})",
            f"formula ffn ratio={self.formula_ratio:.6f}",
            f"selected ffn fraction={self.selected_ffn_fraction:.6f}",
            f"kept ffn fraction={self.kept_ffn_fraction:.6f}",
            f"predicted speedup={self.predicted_speedup:.6f}",
            f"ffn flops={self.ffn_flops} const flops={self.const_flops}",
            f"per-device kept ffn tokens={self.per_device_tokens.tolist()}",
            f"remote ffn tokens={self.remote_ffn_tokens} comm bytes={self.comm_bytes}",
            f"max/mean device load={self.max_over_mean_load:.6f}",
        ]
        return "\n".join(lines) + "\n"


def simulate(plans, cfg: LayerConfig, placement: Placement,
             cost_model: CostModel) -> CostReport:
    """Aggregate dispatch traces into compute/communication totals.

    ``plans`` is a sequence of per-layer :class:`PlanView`-shaped objects
    (``DispatchPlan`` works directly). Tokens are assumed sharded round-robin
    over devices; a kept FFN pair whose expert lives on another device
    contributes one token of dispatch volume. Replicated zero-computation
    experts never cross devices.
    """
    plans = list(plans)
    if not plans:
        raise ValueError("no dispatch traces given")
    n_ffn = cfg.n_ffn
    if placement.ffn_device.shape[0] != n_ffn:
        raise ValueError(
            f"placement covers {placement.ffn_device.shape[0]} FFN experts, config has {n_ffn}"
        )
    const_lo = n_ffn + cfg.n_zero + cfg.n_copy
    const_hi = const_lo + cfg.n_const

    selected_pairs = selected_ffn = kept_total = kept_ffn = kept_const = 0
    per_device = np.zeros(placement.n_devices, dtype=np.int64)
    remote = 0
    n_tokens = 0
    k = plans[0].selected.shape[1]
    for plan in plans:
        sel = np.asarray(plan.selected)
        kept = np.asarray(plan.kept)
        if sel.shape != kept.shape or sel.shape[1] != k:
            raise ValueError("dispatch trace shape mismatch")
        if sel.size and sel.max() >= cfg.n_experts:
            raise ValueError(
                f"trace references expert {sel.max()} but config has {cfg.n_experts}"
            )
        t = sel.shape[0]
        n_tokens += t
        selected_pairs += sel.size
        selected_ffn += int((sel < n_ffn).sum())
        kept_total += int(kept.sum())
        is_ffn_kept = kept & (sel < n_ffn)
        kept_ffn += int(is_ffn_kept.sum())
        kept_const += int((kept & (sel >= const_lo) & (sel < const_hi)).sum())

        token_device = np.arange(t, dtype=np.int64) % placement.n_devices
        rows, ranks = np.nonzero(is_ffn_kept)
        expert_device = placement.ffn_device[sel[rows, ranks]]
        per_device += np.bincount(expert_device, minlength=placement.n_devices)
        remote += int((expert_device != token_device[rows]).sum())

    formula = complexity_ratio(cfg)
    mean_load = per_device.mean() if per_device.sum() else 0.0
    return CostReport(
        conventions=(
            f"{FLOPS_PER_MAC} flops per multiply-accumulate; {FLOAT_WIDTH_BYTES}-byte floats; "
            "communication counts one-way token dispatches to remote FFN experts"
        ),
        n_layers=len(plans),
        n_tokens=n_tokens,
        k=k,
        selected_pairs=selected_pairs,
        selected_ffn_pairs=selected_ffn,
        kept_pairs=kept_total,
        kept_ffn_pairs=kept_ffn,
        kept_const_pairs=kept_const,
        formula_ratio=formula,
        selected_ffn_fraction=selected_ffn / selected_pairs,
        kept_ffn_fraction=kept_ffn / selected_pairs,
        predicted_speedup=1.0 / formula - 1.0,
        ffn_flops=kept_ffn * cost_model.flops_per_ffn_token,
        const_flops=kept_const * cost_model.flops_per_const_token,
        per_device_tokens=per_device,
        remote_ffn_tokens=remote,
        comm_bytes=remote * cost_model.bytes_per_token,
        max_over_mean_load=float(per_device.max() / mean_load) if mean_load else math.nan,
    )


def tau_sweep(n_ffn: int, n_zc: int, taus) -> list[tuple[float, float, float]]:
    """Rows of (tau, ffn ratio, predicted speedup), one per requested tau."""
    rows = []
    for tau in taus:
        r = ratio_for(n_ffn, n_zc, tau)
        rows.append((float(tau), r, 1.0 / r - 1.0))
    return rows
