"""Routing trace files: line-delimited JSON, one record per (layer, token).

The first line is a schema header carrying the layer geometry; every
following line is one record::

    {"layer": 0, "pos": 17, "token": 4, "selected": [2, 9], "gates": [...],
     "kept": [true, false], "logit_mean": ..., "logit_var": ..., "top2": [...],
     "tag": "pattern"}

``kept`` marks which selections survived capacity. Streaming-friendly and
diffable; analyses and the simulator both consume this format.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

TRACE_SCHEMA = "hetmoe-trace-v1"


@dataclass
class TraceMeta:
    n_experts: int
    n_ffn: int
    k: int
    tau: float
    n_layers: int

    def to_header(self) -> dict:
        d = asdict(self)
        d["schema"] = TRACE_SCHEMA
        return d


@dataclass
class TraceRecord:
    layer: int
    pos: int              # running token index within the trace
    token: int            # vocabulary id
    selected: list[int]
    gates: list[float]
    kept: list[bool]
    logit_mean: float
    logit_var: float
    top2: list[float]     # two largest softmax probabilities
    tag: str | None = None


def _coerce_numpy(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_trace(path, meta: TraceMeta, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta.to_header(), sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True, default=_coerce_numpy) + "\n")


def read_trace(path) -> tuple[TraceMeta, list[TraceRecord]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"{path}: expected schema {TRACE_SCHEMA!r}, got {header.get('schema')!r}")
        meta = TraceMeta(
            n_experts=header["n_experts"],
            n_ffn=header["n_ffn"],
            k=header["k"],
            tau=header["tau"],
            n_layers=header["n_layers"],
        )
        records = [TraceRecord(**json.loads(line)) for line in fh if line.strip()]
    return meta, records


def collect_trace(model, windows: np.ndarray, tags=None) -> tuple[TraceMeta, list[TraceRecord]]:
    """Run the model over [B, S] windows and capture one record per
    (layer, token). ``tags`` labels each window (e.g. its corpus family)."""
    windows = np.asarray(windows, dtype=np.int64)
    if windows.ndim == 1:
        windows = windows[None, :]
    lc = model.cfg.layer
    meta = TraceMeta(n_experts=lc.n_experts, n_ffn=lc.n_ffn, k=lc.k,
                     tau=lc.tau, n_layers=model.cfg.n_layers)
    records: list[TraceRecord] = []
    flat_tokens = windows.reshape(-1)
    token_tags = None
    if tags is not None:
        if len(tags) != windows.shape[0]:
            raise ValueError("need one tag per window")
        token_tags = [t for t, row in zip(tags, windows) for _ in row]

    result = model.forward(windows)
    for layer_idx, layer_result in enumerate(result.layer_results):
        router = layer_result.router
        plan = layer_result.plan
        logits = router.logits.data
        probs = router.probs.data
        top2 = -np.sort(-probs, axis=1)[:, :2]
        kept = plan.kept
        for pos in range(flat_tokens.shape[0]):
            records.append(
                TraceRecord(
                    layer=layer_idx,
                    pos=pos,
                    token=int(flat_tokens[pos]),
                    selected=[int(i) for i in router.selected[pos]],
                    gates=[float(g) for g in plan.gate_values[pos]],
                    kept=[bool(b) for b in kept[pos]],
                    logit_mean=float(logits[pos].mean()),
                    logit_var=float(logits[pos].var()),
                    top2=[float(v) for v in top2[pos]],
                    tag=None if token_tags is None else token_tags[pos],
                )
            )
    return meta, records


def plans_from_records(meta: TraceMeta, records: list[TraceRecord]):
    """Rebuild per-layer PlanView-shaped dispatch traces from records."""
    from .simulator import PlanView

    by_layer: dict[int, list[TraceRecord]] = {}
    for rec in records:
        by_layer.setdefault(rec.layer, []).append(rec)
    plans = []
    for layer in sorted(by_layer):
        layer_recs = sorted(by_layer[layer], key=lambda r: r.pos)
        sel = np.array([r.selected for r in layer_recs], dtype=np.int64)
        kept = np.array([r.kept for r in layer_recs], dtype=bool)
        plans.append(PlanView(selected=sel, kept=kept))
    return plans
