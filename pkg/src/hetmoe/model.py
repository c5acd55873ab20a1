"""Tiny decoder-only language model with a mixture layer in every block.

Each block is pre-norm: multi-head causal self-attention, then the expert
mixture replacing the usual dense feed-forward. Router scores of layer j are
handed to layer j+1 when gating residuals are enabled, so routing decisions
can condition on the previous pathway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layer import LayerConfig, LayerResult, MoELayer
from .experts import ExpertKind, ExpertSpec, parameter_count
from .tensor import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    cross_entropy,
    gather_rows,
    matmul,
    rms_norm,
    scale,
    slice_cols,
    slice_rows,
    softmax,
    transpose,
)

_MASK_FILL = -1e9  # large-but-finite additive mask; exp underflows to exactly 0


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    dim: int
    n_layers: int
    n_heads: int
    head_dim: int
    intermediate_dim: int
    seq_len: int
    layer: LayerConfig = field(default_factory=lambda: LayerConfig(n_ffn=8))

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.n_heads * self.head_dim != self.dim:
            raise ValueError(
                f"n_heads * head_dim must equal dim ({self.n_heads}*{self.head_dim} != {self.dim})"
            )


class Block:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, has_residual: bool):
        d = cfg.dim
        self.cfg = cfg
        self.attn_norm = Tensor(np.ones(d), requires_grad=True)
        self.wq = Tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True)
        self.wk = Tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True)
        self.wo = Tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True)
        self.moe_norm = Tensor(np.ones(d), requires_grad=True)
        self.moe = MoELayer(cfg.layer, d, cfg.intermediate_dim, rng, has_residual=has_residual)

    def _attention(self, x: Tensor, batch_size: int, seq_len: int) -> Tensor:
        cfg = self.cfg
        h = rms_norm(x, self.attn_norm)
        q = matmul(h, self.wq)
        k = matmul(h, self.wk)
        v = matmul(h, self.wv)
        mask = Tensor(np.triu(np.full((seq_len, seq_len), _MASK_FILL), k=1))
        att_scale = 1.0 / np.sqrt(cfg.head_dim)

        seqs = []
        for b in range(batch_size):
            lo, hi = b * seq_len, (b + 1) * seq_len
            heads = []
            for hd in range(cfg.n_heads):
                c0, c1 = hd * cfg.head_dim, (hd + 1) * cfg.head_dim
                qh = slice_cols(slice_rows(q, lo, hi), c0, c1)
                kh = slice_cols(slice_rows(k, lo, hi), c0, c1)
                vh = slice_cols(slice_rows(v, lo, hi), c0, c1)
                scores = add(scale(matmul(qh, transpose(kh)), att_scale), mask)
                heads.append(matmul(softmax(scores, axis=-1), vh))
            seqs.append(concat_cols(heads))
        merged = concat_rows(seqs) if len(seqs) > 1 else seqs[0]
        return matmul(merged, self.wo)

    def forward(self, x: Tensor, batch_size: int, seq_len: int,
                prev_logits: Tensor | None,
                capacities: np.ndarray | None = None) -> tuple[Tensor, LayerResult]:
        x = add(x, self._attention(x, batch_size, seq_len))
        moe_in = rms_norm(x, self.moe_norm)
        result = self.moe.forward(moe_in, prev_logits=prev_logits, capacities=capacities)
        return add(x, result.output), result

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "attn_norm": self.attn_norm,
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo,
            "moe_norm": self.moe_norm,
        }
        for name, p in self.moe.parameters().items():
            params[f"moe.{name}"] = p
        return params


@dataclass
class ForwardResult:
    logits: Tensor                 # [B*S, vocab]
    layer_results: list[LayerResult]

    @property
    def load_stats(self):
        return [r.stats for r in self.layer_results]

    @property
    def plans(self):
        return [r.plan for r in self.layer_results]


class LanguageModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, (cfg.vocab, cfg.dim)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (cfg.seq_len, cfg.dim)), requires_grad=True)
        self.blocks = [Block(cfg, rng, has_residual=(j > 0)) for j in range(cfg.n_layers)]
        self.final_norm = Tensor(np.ones(cfg.dim), requires_grad=True)
        self.head = Tensor(rng.normal(0.0, 0.02, (cfg.dim, cfg.vocab)), requires_grad=True)

    def forward(self, tokens: np.ndarray,
                capacities: np.ndarray | None = None) -> ForwardResult:
        """Run a [B, S] batch of token ids; logits come back as [B*S, vocab]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        batch_size, seq_len = tokens.shape
        if seq_len > self.cfg.seq_len:
            raise ValueError(f"sequence length {seq_len} exceeds limit {self.cfg.seq_len}")
        flat = tokens.reshape(-1)
        if flat.min() < 0 or flat.max() >= self.cfg.vocab:
            raise ValueError(f"token id out of range for vocab {self.cfg.vocab}")

        positions = np.tile(np.arange(seq_len), batch_size)
        x = add(gather_rows(self.tok_emb, flat), gather_rows(self.pos_emb, positions))

        prev_logits = None
        layer_results = []
        for block in self.blocks:
            x, result = block.forward(x, batch_size, seq_len, prev_logits, capacities)
            layer_results.append(result)
            prev_logits = result.router.logits

        logits = matmul(rms_norm(x, self.final_norm), self.head)
        return ForwardResult(logits=logits, layer_results=layer_results)

    def loss(self, tokens: np.ndarray, targets: np.ndarray,
             capacities: np.ndarray | None = None):
        """Cross-entropy on next-token targets plus per-layer stats."""
        result = self.forward(tokens, capacities)
        ce = cross_entropy(result.logits, np.asarray(targets, dtype=np.int64).reshape(-1))
        return ce, result

    def parameters(self) -> dict[str, Tensor]:
        params = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for j, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                params[f"blocks.{j}.{name}"] = p
        params["final_norm"] = self.final_norm
        params["head"] = self.head
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a :class:`LanguageModel` of this shape."""
    d, lc = cfg.dim, cfg.layer
    per_expert = [
        parameter_count(
            ExpertSpec(kind, d, cfg.intermediate_dim if kind is ExpertKind.FFN else None)
        )
        for kind in lc.expert_kinds()
    ]
    router = lc.n_experts * d
    residual = lc.n_experts * lc.n_experts if lc.residuals_enabled else 0
    block_base = 4 * d * d + 2 * d + router + sum(per_expert)
    total = cfg.vocab * d + cfg.seq_len * d          # embeddings
    total += cfg.n_layers * block_base
    total += (cfg.n_layers - 1) * residual           # first layer has no residual path
    total += d + d * cfg.vocab                       # final norm + head
    return total
