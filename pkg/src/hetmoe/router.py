"""Top-k router with optional score residuals from the previous layer.

Per-token expert scores are a linear map of the token; from the second layer
on, the previous layer's scores can be folded in through a learned N x N
transform, letting a token's earlier pathway inform the current choice:

    scores_1 = W x            (first layer)
    scores_j = W x + Wg scores_{j-1}

Gate weights are the full-softmax probabilities at the top-k positions and
zero elsewhere. By default the retained k values are NOT renormalized, so a
gate row sums to at most 1 (exactly 1 only when k equals the expert count).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import (
    DimensionError,
    Tensor,
    add,
    matmul,
    mul,
    recip,
    row_sums,
    softmax,
    transpose,
)


@dataclass
class RouterParams:
    """weight is [N, D]; residual_weight is [N, N] and absent on layer 1."""

    weight: Tensor
    residual_weight: Tensor | None = None

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.residual_weight is not None:
            params["residual_weight"] = self.residual_weight
        return params


def init_router(n_experts: int, dim: int, rng: np.random.Generator,
                with_residual: bool, residual_init: float = 0.1) -> RouterParams:
    """Score weights start small and random; the residual transform starts as
    a scaled identity, a mild carry-over of the previous pathway."""
    weight = Tensor(rng.normal(0.0, 0.02, (n_experts, dim)), requires_grad=True)
    residual = None
    if with_residual:
        residual = Tensor(residual_init * np.eye(n_experts), requires_grad=True)
    return RouterParams(weight, residual)


@dataclass
class RouterOutput:
    """logits are retained for the next layer's residual path. gates has
    exactly k nonzeros per row, equal to the full-softmax probabilities at
    the positions listed in ``selected`` (descending score order)."""

    logits: Tensor
    probs: Tensor
    gates: Tensor
    selected: np.ndarray

    @property
    def k(self) -> int:
        return self.selected.shape[1]


def route(x: Tensor, params: RouterParams, k: int,
          prev_logits: Tensor | None = None,
          renormalize: bool = False,
          detach_prev: bool = False) -> RouterOutput:
    n_experts, dim = params.weight.shape
    if x.shape[1] != dim:
        raise DimensionError(f"router expects width {dim}, got {x.shape[1]}")
    if not 1 <= k <= n_experts:
        raise ValueError(f"k={k} out of range for {n_experts} experts")

    logits = matmul(x, transpose(params.weight))
    if prev_logits is not None:
        if params.residual_weight is None:
            raise ValueError("previous-layer scores given but router has no residual weight")
        if prev_logits.shape != (x.shape[0], n_experts):
            raise DimensionError(
                f"previous scores shape {prev_logits.shape}, expected {(x.shape[0], n_experts)}"
            )
        if detach_prev:
            prev_logits = prev_logits.detach()
        logits = add(logits, matmul(prev_logits, transpose(params.residual_weight)))

    probs = softmax(logits, axis=-1)
    selected = kernels.topk_rows(logits.data, k)
    mask = np.zeros_like(probs.data)
    mask[np.arange(selected.shape[0])[:, None], selected] = 1.0
    gates = mul(probs, Tensor(mask))
    if renormalize:
        gates = mul(gates, recip(row_sums(gates)))
    return RouterOutput(logits=logits, probs=probs, gates=gates, selected=selected)


def vanilla_route(x: Tensor, params: RouterParams, k: int) -> RouterOutput:
    """Baseline routing: plain linear scores, no cross-layer residual."""
    return route(x, params, k, prev_logits=None)
