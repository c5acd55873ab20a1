"""Named model shapes and run-configuration parsing.

The shape catalog mirrors the published model family (four sizes, each with
an all-FFN baseline variant) and is consumed at full scale by the cost
simulator and at reduced scale by the trainable desk models.

Run configs are JSON documents with five sections::

    {
      "model": {"dim", "n_layers", "n_heads", "head_dim",
                "intermediate_dim", "seq_len"},
      "layer": {"n_ffn", "n_zero", "n_copy", "n_const", "k", "tau", "gamma",
                "residuals_enabled", "renormalize_gates",
                "detach_gating_residuals", "load_stats_pre_drop",
                "activation"},
      "train": {"steps", "lr", "beta", "seed", "corpus", "batch_size",
                "warmup_steps", "weight_decay", "clip_norm",
                "lr_final_factor"},
      "sim":   {"devices", "tau_sweep"},
      "io":    {"out_dir"}
    }

Unknown keys are rejected with the offending key named. Defaults: k=2,
tau=0.75, gamma=1.1, beta=0.01. The vocabulary is always derived from the
corpus (character level), never configured.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .layer import LayerConfig
from .model import ModelConfig


@dataclass(frozen=True)
class ModelShape:
    name: str
    n_layers: int
    dim: int
    intermediate_dim: int
    n_heads: int
    head_dim: int
    n_ffn: int
    n_zero: int
    n_copy: int
    n_const: int

    @property
    def n_zc(self) -> int:
        return self.n_zero + self.n_copy + self.n_const


SHAPES: dict[str, ModelShape] = {
    s.name: s
    for s in [
        ModelShape("small-8x4", 12, 768, 2048, 12, 64, 8, 1, 1, 2),
        ModelShape("base-16x4", 12, 768, 2048, 12, 64, 16, 1, 1, 2),
        ModelShape("large-32x8", 12, 768, 2048, 12, 64, 32, 1, 1, 6),
        ModelShape("deep-16x4", 24, 1536, 4096, 16, 96, 16, 1, 1, 2),
        ModelShape("small-8", 12, 768, 2048, 12, 64, 8, 0, 0, 0),
        ModelShape("base-16", 12, 768, 2048, 12, 64, 16, 0, 0, 0),
        ModelShape("large-32", 12, 768, 2048, 12, 64, 32, 0, 0, 0),
        ModelShape("deep-16", 24, 1536, 4096, 16, 96, 16, 0, 0, 0),
    ]
}

HETEROGENEOUS_SHAPES = ("small-8x4", "base-16x4", "large-32x8", "deep-16x4")


def smoke_model_config(vocab: int, seq_len: int = 32, **layer_overrides) -> ModelConfig:
    """The small-8x4 shape scaled to desk size: dim 64, intermediate 172,
    4 layers, 4 heads of 16; the 8+4 expert mix is kept as published."""
    layer = LayerConfig(n_ffn=8, n_zero=1, n_copy=1, n_const=2, **layer_overrides)
    return ModelConfig(
        vocab=vocab,
        dim=64,
        n_layers=4,
        n_heads=4,
        head_dim=16,
        intermediate_dim=172,
        seq_len=seq_len,
        layer=layer,
    )


# ---------------------------------------------------------------------------
# run configuration


class ConfigError(ValueError):
    """A run-config document is malformed; the message names the key."""


@dataclass
class ModelSection:
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    intermediate_dim: int = 172
    seq_len: int = 32


@dataclass
class TrainSection:
    steps: int = 200
    lr: float = 3e-3
    beta: float = 0.01
    seed: int = 0
    corpus: str = ""
    batch_size: int = 8
    warmup_steps: int = 20
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    lr_final_factor: float = 0.1


@dataclass
class SimSection:
    devices: int = 4
    tau_sweep: list[float] = field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75, 1.0])


@dataclass
class IoSection:
    out_dir: str = "runs/out"


@dataclass
class RunConfig:
    model: ModelSection
    layer: LayerConfig
    train: TrainSection
    sim: SimSection
    io: IoSection

    def model_config(self, vocab: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            vocab=vocab,
            dim=m.dim,
            n_layers=m.n_layers,
            n_heads=m.n_heads,
            head_dim=m.head_dim,
            intermediate_dim=m.intermediate_dim,
            seq_len=m.seq_len,
            layer=self.layer,
        )

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "layer": dataclasses.asdict(self.layer),
            "train": dataclasses.asdict(self.train),
            "sim": dataclasses.asdict(self.sim),
            "io": dataclasses.asdict(self.io),
        }


def _build_section(cls, data: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key {section}.{sorted(unknown)[0]}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from None


def parse_run_config(source) -> RunConfig:
    """Parse a run config from a dict, JSON string, or file path."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    else:
        data = source
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"model", "layer", "train", "sim", "io"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown section {sorted(unknown)[0]!r}")
    return RunConfig(
        model=_build_section(ModelSection, data.get("model", {}), "model"),
        layer=_build_section(LayerConfig, data.get("layer", {"n_ffn": 8}), "layer"),
        train=_build_section(TrainSection, data.get("train", {}), "train"),
        sim=_build_section(SimSection, data.get("sim", {}), "sim"),
        io=_build_section(IoSection, data.get("io", {}), "io"),
    )
