"""The four expert types: FFN plus the three zero-computation experts.

Expert outputs for an input token x of width D:

* FFN      - W2 @ gelu(W1 @ x + b1) + b2, the conventional expert
* zero     - 0 (discard)
* copy     - x (skip)
* constant - a1 * x + a2 * v with [a1, a2] = softmax(Wc @ x): a learned,
             dynamically weighted blend of the token and a trainable vector

Zero and copy experts own no parameters; a constant expert owns 3*D
(v of size D, Wc of size 2*D). All experts are pure functions of their
parameters, so distinct experts may run concurrently on disjoint token
slices.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    gelu,
    matmul,
    mul,
    relu,
    slice_cols,
    softmax,
    transpose,
)


class ExpertKind(Enum):
    FFN = "ffn"
    ZERO = "zero"
    COPY = "copy"
    CONSTANT = "constant"


ZERO_COMPUTATION_KINDS = (ExpertKind.ZERO, ExpertKind.COPY, ExpertKind.CONSTANT)

_ACTIVATIONS = {"gelu": gelu, "relu": relu}


@dataclass(frozen=True)
class ExpertSpec:
    kind: ExpertKind
    hidden_size: int
    intermediate_size: int | None = None

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
        if self.kind is ExpertKind.FFN:
            if self.intermediate_size is None or self.intermediate_size < 1:
                raise ValueError("FFN experts need intermediate_size >= 1")


def parameter_count(spec: ExpertSpec) -> int:
    """Closed-form trainable parameter count for one expert."""
    d = spec.hidden_size
    if spec.kind is ExpertKind.FFN:
        d_int = spec.intermediate_size
        return 2 * d * d_int + d_int + d
    if spec.kind is ExpertKind.CONSTANT:
        return 3 * d
    return 0


class FFNExpert:
    """Two-layer feed-forward network. Weights follow the (out, in) layout:
    w1 is [D_int, D] and w2 is [D, D_int]; biases start at zero."""

    kind = ExpertKind.FFN

    def __init__(self, dim: int, intermediate_dim: int, rng: np.random.Generator,
                 activation: str = "gelu"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.dim = dim
        self.intermediate_dim = intermediate_dim
        self.activation = activation
        self.w1 = Tensor(rng.normal(0.0, 0.02, (intermediate_dim, dim)), requires_grad=True)
        self.b1 = Tensor(np.zeros(intermediate_dim), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 0.02, (dim, intermediate_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dim:
            raise DimensionError(f"expected width {self.dim}, got {x.shape[1]}")
        act = _ACTIVATIONS[self.activation]
        h = act(add(matmul(x, transpose(self.w1)), self.b1))
        return add(matmul(h, transpose(self.w2)), self.b2)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class ZeroExpert:
    """Discards the token: output is zero and contributes no gradient."""

    kind = ExpertKind.ZERO

    def forward(self, x: Tensor) -> Tensor:
        return Tensor(np.zeros_like(x.data))

    def parameters(self) -> dict[str, Tensor]:
        return {}


class CopyExpert:
    """Returns the token unchanged; gradient passes straight through."""

    kind = ExpertKind.COPY

    def forward(self, x: Tensor) -> Tensor:
        return x

    def parameters(self) -> dict[str, Tensor]:
        return {}


class ConstantExpert:
    """Blends the token with a trainable vector, the mix predicted per token.

    v starts at zero so the expert initially behaves like a damped copy,
    avoiding an early routing bias toward or away from it.
    """

    kind = ExpertKind.CONSTANT

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.v = Tensor(np.zeros(dim), requires_grad=True)
        self.wc = Tensor(rng.normal(0.0, 0.02, (2, dim)), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dim:
            raise DimensionError(f"expected width {self.dim}, got {x.shape[1]}")
        alphas = softmax(matmul(x, transpose(self.wc)), axis=-1)
        a1 = slice_cols(alphas, 0, 1)
        a2 = slice_cols(alphas, 1, 2)
        return add(mul(a1, x), mul(a2, self.v))

    def parameters(self) -> dict[str, Tensor]:
        return {"v": self.v, "wc": self.wc}


def make_expert(spec: ExpertSpec, rng: np.random.Generator, activation: str = "gelu"):
    if spec.kind is ExpertKind.FFN:
        return FFNExpert(spec.hidden_size, spec.intermediate_size, rng, activation)
    if spec.kind is ExpertKind.ZERO:
        return ZeroExpert()
    if spec.kind is ExpertKind.COPY:
        return CopyExpert()
    if spec.kind is ExpertKind.CONSTANT:
        return ConstantExpert(spec.hidden_size, rng)
    raise ValueError(f"unknown expert kind {spec.kind}")
