"""Routing diagnostics over trace files.

All analyses are pure functions of their inputs: rerunning one on the same
trace produces byte-identical CSV output. Plot emission is best-effort and
skipped when matplotlib is unavailable; the CSV is the contract.
"""

from __future__ import annotations

import csv
from collections import defaultdict

import numpy as np

from .traceio import TraceMeta, TraceRecord


def expert_load_distribution(meta: TraceMeta, records: list[TraceRecord],
                             group_by: str = "layer") -> list[tuple[str, np.ndarray]]:
    """Per-expert selection frequencies per group ("layer" or "tag").

    Each group row sums to k: every token contributes k selections, and the
    frequency of expert i is (selections of i) / (tokens in group).
    """
    if group_by not in ("layer", "tag"):
        raise ValueError(f"group_by must be 'layer' or 'tag', got {group_by!r}")
    if not records:
        raise ValueError("empty trace")
    counts: dict[str, np.ndarray] = defaultdict(lambda: np.zeros(meta.n_experts))
    tokens: dict[str, int] = defaultdict(int)
    for rec in records:
        key = str(rec.layer) if group_by == "layer" else str(rec.tag)
        tokens[key] += 1
        for i in rec.selected:
            counts[key][i] += 1
    return [(key, counts[key] / tokens[key]) for key in sorted(counts)]


def ffn_activation_per_token(meta: TraceMeta, records: list[TraceRecord]) -> dict[int, float]:
    """Mean number of FFN experts selected per occurrence of each token id,
    averaged over layers and positions; always within [0, k]."""
    totals: dict[int, float] = defaultdict(float)
    occurrences: dict[int, int] = defaultdict(int)
    for rec in records:
        occurrences[rec.token] += 1
        totals[rec.token] += sum(1 for i in rec.selected if i < meta.n_ffn)
    return {tok: totals[tok] / occurrences[tok] for tok in sorted(totals)}


def _score_stats(values: np.ndarray) -> dict[str, float]:
    return {
        "mean": float(values.mean()),
        "var": float(values.var()),
        "min": float(values.min()),
        "max": float(values.max()),
    }


def routing_score_stats(model, windows: np.ndarray) -> list[dict]:
    """Per-layer statistics of the highest and second-highest gate
    probabilities over a probe batch."""
    result = model.forward(np.asarray(windows, dtype=np.int64))
    rows = []
    for layer_idx, layer_result in enumerate(result.layer_results):
        probs = layer_result.router.probs.data
        top2 = -np.sort(-probs, axis=1)[:, :2]
        rows.append({
            "layer": layer_idx,
            "top1": _score_stats(top2[:, 0]),
            "top2": _score_stats(top2[:, 1]),
        })
    return rows


def residual_variance_study(model_with, model_without, windows: np.ndarray) -> list[dict]:
    """Side-by-side routing-score statistics for two models that differ only
    in whether cross-layer score residuals are enabled. Reported, not judged:
    the variance effect is a property of the trained models."""
    with_stats = routing_score_stats(model_with, windows)
    without_stats = routing_score_stats(model_without, windows)
    return [
        {"layer": w["layer"], "with_residuals": w, "without_residuals": wo}
        for w, wo in zip(with_stats, without_stats)
    ]


# ---------------------------------------------------------------------------
# CSV / plot emission


def write_expert_load_csv(path, meta: TraceMeta, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group"] + [f"expert_{i}" for i in range(meta.n_experts)])
        for key, freqs in rows:
            writer.writerow([key] + [repr(float(f)) for f in freqs])


def write_ffn_per_token_csv(path, values: dict[int, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_id", "mean_ffn_experts"])
        for tok in sorted(values):
            writer.writerow([tok, repr(float(values[tok]))])


def write_residual_study_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "variant", "rank", "mean", "var", "min", "max"])
        for row in rows:
            for variant in ("with_residuals", "without_residuals"):
                for rank in ("top1", "top2"):
                    s = row[variant][rank]
                    writer.writerow([row["layer"], variant, rank,
                                     repr(s["mean"]), repr(s["var"]),
                                     repr(s["min"]), repr(s["max"])])


def maybe_plot_expert_load(path, meta: TraceMeta, rows) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(meta.n_experts)
    width = 0.8 / max(len(rows), 1)
    for j, (key, freqs) in enumerate(rows):
        ax.bar(x + j * width, freqs, width, label=str(key))
    ax.set_xlabel("expert")
    ax.set_ylabel("selection frequency")
    ax.axvline(meta.n_ffn - 0.5, color="gray", linestyle="--", linewidth=1)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return True


def maybe_plot_ffn_per_token(path, values: dict[int, float]) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    toks = sorted(values)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar([str(t) for t in toks], [values[t] for t in toks])
    ax.set_xlabel("token id")
    ax.set_ylabel("mean FFN experts")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return True
