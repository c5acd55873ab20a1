"""Capacity-constrained mixture layer over heterogeneous experts.

One forward pass routes every token to its top-k experts, enforces per-expert
capacity, evaluates the surviving (token, expert) pairs, and combines them
with their gate weights:

    y_t = sum over surviving pairs (i, g) of g * E_i(x_t)

A token whose pairs all overflowed passes through unchanged (y_t = x_t).

Expert order inside a layer is fixed: FFN experts first, then zero, copy,
and constant experts. The per-type weighting ``tau`` steers both the load
balance loss and the capacity split between FFN and zero-computation experts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .experts import ExpertKind, ExpertSpec, make_expert, parameter_count
from .router import RouterOutput, init_router, route
from .tensor import (
    Tensor,
    add,
    gather_rows,
    mean_rows,
    mul,
    scale,
    scatter_add_rows,
    sum_all,
    take_pairs,
)


def constant_expert_count(n_ffn: int, n_zero: int = 1, n_copy: int = 1) -> int:
    """Default number of constant experts for a layer with ``n_ffn`` FFN experts.

    Scales as a quarter of the FFN count minus the other zero-computation
    experts, floored at 2: the published shape family uses 1/1/2 up to 16 FFN
    experts and 1/1/6 at 32, and the floor of 2 is what reproduces the
    8-expert configuration.
    """
    return max(n_ffn // 4 - n_zero - n_copy, 2)


@dataclass(frozen=True)
class LayerConfig:
    """Expert mix and routing hyper-parameters for one mixture layer.

    ``tau`` weights zero-computation experts in the load-balance loss and the
    capacity split (smaller tau sends more tokens their way); ``gamma`` is the
    slack factor on capacity. ``load_stats_pre_drop`` controls whether the
    selection fractions f_i count pairs before (default) or after capacity
    enforcement.
    """

    n_ffn: int
    n_zero: int = 1
    n_copy: int = 1
    n_const: int = 2
    k: int = 2
    tau: float = 0.75
    gamma: float = 1.1
    residuals_enabled: bool = True
    renormalize_gates: bool = False
    detach_gating_residuals: bool = False
    load_stats_pre_drop: bool = True
    activation: str = "gelu"

    def __post_init__(self):
        if self.n_ffn < 1:
            raise ValueError("need at least one FFN expert")
        if min(self.n_zero, self.n_copy, self.n_const) < 0:
            raise ValueError("expert counts cannot be negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 1 <= self.k <= self.n_experts:
            raise ValueError(f"k={self.k} out of range for {self.n_experts} experts")

    @property
    def n_zc(self) -> int:
        return self.n_zero + self.n_copy + self.n_const

    @property
    def n_experts(self) -> int:
        return self.n_ffn + self.n_zc

    def expert_kinds(self) -> list[ExpertKind]:
        return (
            [ExpertKind.FFN] * self.n_ffn
            + [ExpertKind.ZERO] * self.n_zero
            + [ExpertKind.COPY] * self.n_copy
            + [ExpertKind.CONSTANT] * self.n_const
        )

    def ffn_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_experts, dtype=bool)
        mask[: self.n_ffn] = True
        return mask

    def eta(self) -> np.ndarray:
        """Per-expert load-balance weights: 1 for FFN, tau for zero-computation."""
        out = np.full(self.n_experts, self.tau)
        out[: self.n_ffn] = 1.0
        return out


def capacity(cfg: LayerConfig, n_tokens: int) -> np.ndarray:
    """Per-expert capacities for dispatching ``n_tokens`` routed tokens.

    FFN experts get ceil(gamma * tau * T / (tau * n_ffn + n_zc)) slots and
    zero-computation experts ceil(gamma * T / (tau * n_ffn + n_zc)), so the
    total pool is gamma * T slots. T counts tokens entering the dispatcher:
    a top-k layer routes k tokens per input token and passes T = k * batch
    tokens (the layer handles that; callers sizing capacity by hand must
    too). The arithmetic runs on exact rationals taken at the decimal face
    value of gamma and tau, so capacities like 1.1 * 1000 / 10 land exactly
    on the integer boundary instead of picking up float noise before the
    ceil.
    """
    if n_tokens < 1:
        raise ValueError("need at least one token")
    gamma = Fraction(str(cfg.gamma))
    tau = Fraction(str(cfg.tau))
    denom = tau * cfg.n_ffn + cfg.n_zc
    c_ffn = math.ceil(gamma * tau * n_tokens / denom)
    c_zc = math.ceil(gamma * n_tokens / denom)
    caps = np.full(cfg.n_experts, c_zc, dtype=np.int64)
    caps[: cfg.n_ffn] = c_ffn
    return caps


@dataclass
class DispatchPlan:
    """Token-to-slot assignment after capacity enforcement.

    ``slots[t, r]`` is the slot granted to token t's rank-r selection, or -1
    if that pair was dropped. Assignment is greedy in token order (earlier
    tokens win slots), which keeps a token's fate independent of everything
    after it - causal masking survives the dispatch.
    """

    selected: np.ndarray       # [T, K] expert index per selection
    gate_values: np.ndarray    # [T, K] gate weight per selection
    slots: np.ndarray          # [T, K] slot or -1
    capacities: np.ndarray     # [N]
    counts: np.ndarray = field(init=False)  # [N] slots actually used

    def __post_init__(self):
        n = self.capacities.shape[0]
        kept = self.selected[self.slots >= 0]
        self.counts = np.bincount(kept, minlength=n).astype(np.int64)

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    @property
    def kept(self) -> np.ndarray:
        """[T, K] bool: True where the pair survived capacity."""
        return self.slots >= 0

    def tokens_for_expert(self, i: int) -> np.ndarray:
        """Token ids assigned to expert i, in token order."""
        rows, _ = np.nonzero((self.selected == i) & self.kept)
        return rows

    def pad_count(self, i: int) -> int:
        """Unused slots of expert i, filled by padding in a real deployment."""
        return int(self.capacities[i] - self.counts[i])

    def dropped_pairs(self) -> list[tuple[int, int, float]]:
        """(token, expert, gate) for every pair that overflowed capacity."""
        rows, ranks = np.nonzero(~self.kept)
        return [
            (int(t), int(self.selected[t, r]), float(self.gate_values[t, r]))
            for t, r in zip(rows, ranks)
        ]

    def pass_through_mask(self) -> np.ndarray:
        """[T] bool: tokens whose selections were all dropped."""
        return ~self.kept.any(axis=1)

    @property
    def pair_drop_rate(self) -> float:
        return float((~self.kept).mean())

    @property
    def token_drop_rate(self) -> float:
        return float(self.pass_through_mask().mean())


def dispatch(router_out: RouterOutput, capacities: np.ndarray) -> DispatchPlan:
    selected = router_out.selected
    rows = np.arange(selected.shape[0])[:, None]
    gate_values = router_out.gates.data[rows, selected]
    slots, _counts = kernels.greedy_dispatch(selected, capacities)
    return DispatchPlan(
        selected=selected,
        gate_values=gate_values,
        slots=slots,
        capacities=np.asarray(capacities, dtype=np.int64),
    )


@dataclass
class LoadStats:
    """Per-expert selection fractions and mean gate probabilities for a batch.

    f sums to k over experts (each token selects k experts); P is the mean
    full-softmax probability and stays differentiable; eta carries the
    per-type weights. f is treated as a constant coefficient in the loss.
    """

    f: np.ndarray
    P: Tensor
    eta: np.ndarray
    n_tokens: int
    k: int


def compute_load_stats(cfg: LayerConfig, router_out: RouterOutput,
                       plan: DispatchPlan | None = None) -> LoadStats:
    n = cfg.n_experts
    t = router_out.selected.shape[0]
    if cfg.load_stats_pre_drop or plan is None:
        chosen = router_out.selected.ravel()
    else:
        chosen = plan.selected[plan.kept]
    f = np.bincount(chosen, minlength=n) / t
    return LoadStats(f=f, P=mean_rows(router_out.probs), eta=cfg.eta(),
                     n_tokens=t, k=router_out.k)


def load_balance_loss(stats: LoadStats) -> Tensor:
    """Weighted frequency-probability product: sum_i eta_i * f_i * P_i.

    Gradients flow through P only; the selection fractions f are constants.
    """
    return sum_all(mul(Tensor(stats.eta * stats.f), stats.P))


def total_loss(ce: Tensor, lb: Tensor, beta: float) -> Tensor:
    """Training objective: cross-entropy plus beta times the balance loss."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return add(ce, scale(lb, beta))


@dataclass
class LayerResult:
    output: Tensor
    router: RouterOutput
    stats: LoadStats
    plan: DispatchPlan


class MoELayer:
    """Experts plus router for one layer of the model.

    ``has_residual`` enables the cross-layer score path (off for the first
    layer and for the vanilla baseline).
    """

    def __init__(self, cfg: LayerConfig, dim: int, intermediate_dim: int,
                 rng: np.random.Generator, has_residual: bool = False):
        self.cfg = cfg
        self.dim = dim
        self.intermediate_dim = intermediate_dim
        self.has_residual = has_residual and cfg.residuals_enabled
        self.experts = [
            make_expert(
                ExpertSpec(
                    kind,
                    hidden_size=dim,
                    intermediate_size=intermediate_dim if kind is ExpertKind.FFN else None,
                ),
                rng,
                cfg.activation,
            )
            for kind in cfg.expert_kinds()
        ]
        self.router = init_router(cfg.n_experts, dim, rng, with_residual=self.has_residual)

    def forward(self, x: Tensor, prev_logits: Tensor | None = None,
                capacities: np.ndarray | None = None) -> LayerResult:
        cfg = self.cfg
        n_tokens = x.shape[0]
        if not self.has_residual:
            prev_logits = None
        router_out = route(
            x,
            self.router,
            cfg.k,
            prev_logits=prev_logits,
            renormalize=cfg.renormalize_gates,
            detach_prev=cfg.detach_gating_residuals,
        )
        if capacities is None:
            capacities = capacity(cfg, cfg.k * n_tokens)
        plan = dispatch(router_out, capacities)

        y = Tensor(np.zeros_like(x.data))
        for i, expert in enumerate(self.experts):
            if expert.kind is ExpertKind.ZERO:
                continue  # gate * 0 contributes nothing, exactly
            token_ids = plan.tokens_for_expert(i)
            if token_ids.size == 0:
                continue
            xi = gather_rows(x, token_ids)
            out_i = expert.forward(xi)
            g_i = take_pairs(router_out.gates, token_ids, np.full(token_ids.shape, i))
            y = add(y, scatter_add_rows(mul(g_i, out_i), token_ids, n_tokens))

        passed = plan.pass_through_mask()
        if passed.any():
            y = add(y, mul(Tensor(passed.astype(np.float64)[:, None]), x))

        stats = compute_load_stats(cfg, router_out, plan)
        return LayerResult(output=y, router=router_out, stats=stats, plan=plan)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for name, p in self.router.parameters().items():
            params[f"router.{name}"] = p
        for i, expert in enumerate(self.experts):
            for name, p in expert.parameters().items():
                params[f"experts.{i}.{name}"] = p
        return params

    def expert_parameter_counts(self) -> list[int]:
        return [
            parameter_count(
                ExpertSpec(
                    e.kind,
                    hidden_size=self.dim,
                    intermediate_size=self.intermediate_dim if e.kind is ExpertKind.FFN else None,
                )
            )
            for e in self.experts
        ]
