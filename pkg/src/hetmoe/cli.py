"""Command-line entry point.

Subcommands: train, eval, simulate, analyze, sweep-tau, config-check.
Exit codes: 0 success, 2 user error (bad config/arguments/files),
3 numerical failure (training diverged).

Every command is deterministic given (config, seed): rerunning ``train``
with the same inputs reproduces the metrics file byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis as analysis_mod
from . import traceio
from .backend import active_backend
from .checkpoint import load_checkpoint, save_checkpoint
from .configs import ConfigError, RunConfig, parse_run_config
from .layer import LayerConfig
from .model import LanguageModel, ModelConfig
from .simulator import CostModel, Placement, simulate, tau_sweep
from .tensor import NumericalError
from .training import TrainConfig, Vocab, evaluate_perplexity, split_corpus, train

ANALYSES = ("expert-load", "expert-load-by-tag", "ffn-per-token")


def _load_corpus(cfg: RunConfig) -> tuple[str, Vocab, np.ndarray]:
    corpus_path = Path(cfg.train.corpus)
    if not cfg.train.corpus or not corpus_path.exists():
        raise ConfigError(f"corpus file not found: {corpus_path}")
    text = corpus_path.read_text(encoding="utf-8")
    vocab = Vocab(text)
    return text, vocab, vocab.encode(text)


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override) if override else Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config_dict(mc: ModelConfig) -> dict:
    return dataclasses.asdict(mc)


def _model_config_from_dict(d: dict) -> ModelConfig:
    layer = LayerConfig(**d["layer"])
    rest = {k: v for k, v in d.items() if k != "layer"}
    return ModelConfig(layer=layer, **rest)


def cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    text, vocab, tokens = _load_corpus(cfg)
    train_tokens, heldout = split_corpus(tokens)
    out = _out_dir(cfg, args.out)

    model = LanguageModel(cfg.model_config(len(vocab)), seed=cfg.train.seed)
    tc = TrainConfig(
        steps=cfg.train.steps,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr,
        beta=cfg.train.beta,
        seed=cfg.train.seed,
        warmup_steps=cfg.train.warmup_steps,
        weight_decay=cfg.train.weight_decay,
        clip_norm=cfg.train.clip_norm,
        lr_final_factor=cfg.train.lr_final_factor,
    )

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        state = train(model, train_tokens, tc,
                      on_step=lambda m: fh.write(json.dumps(m.to_record(), sort_keys=True) + "\n"))

    arrays = {name: p.data for name, p in model.parameters().items()}
    arrays.update(state.optimizer.state_arrays())
    save_checkpoint(
        out / "checkpoint.bin",
        arrays,
        config={
            "model_config": _model_config_dict(model.cfg),
            "vocab_chars": "".join(vocab.chars),
        },
        extra={"step": state.step, "seed": cfg.train.seed},
    )

    probe = heldout if len(heldout) >= model.cfg.seq_len + 1 else train_tokens
    windows = _probe_windows(probe, model.cfg.seq_len, max_windows=8)
    tag = Path(cfg.train.corpus).stem
    meta, records = traceio.collect_trace(model, windows, tags=[tag] * windows.shape[0])
    traceio.write_trace(out / "trace.jsonl", meta, records)

    last = state.history[-1]
    print(f"trained {tc.steps} steps: lce {state.history[0].lce:.4f} -> {last.lce:.4f}, "
          f"drop rate {last.drop_rate:.4f} (backend: {active_backend()})")
    print(f"artifacts: {metrics_path}, {out / 'checkpoint.bin'}, {out / 'trace.jsonl'}")
    return 0


def _probe_windows(tokens: np.ndarray, seq_len: int, max_windows: int) -> np.ndarray:
    n = min((len(tokens) - 1) // seq_len, max_windows)
    if n < 1:
        raise ConfigError("corpus too short to cut one probe window")
    return np.stack([tokens[w * seq_len : (w + 1) * seq_len] for w in range(n)])


def _load_model(out: Path) -> tuple[LanguageModel, Vocab]:
    ckpt = out / "checkpoint.bin"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt} (run `hetmoe train` first)")
    arrays, config, _extra = load_checkpoint(ckpt)
    model = LanguageModel(_model_config_from_dict(config["model_config"]))
    for name, p in model.parameters().items():
        p.data = np.array(arrays[name])
    vocab = Vocab(config["vocab_chars"])
    return model, vocab


def cmd_eval(args) -> int:
    cfg = parse_run_config(args.config)
    out = _out_dir(cfg, args.out)
    model, vocab = _load_model(out)
    _text, file_vocab, tokens = _load_corpus(cfg)
    if file_vocab.chars != vocab.chars:
        raise ConfigError("corpus vocabulary does not match the checkpoint")
    _train_tokens, heldout = split_corpus(tokens)
    eval_tokens = heldout if len(heldout) > model.cfg.seq_len + 1 else tokens
    ppl = evaluate_perplexity(model, eval_tokens)
    (out / "eval.json").write_text(json.dumps({"perplexity": ppl}, sort_keys=True) + "\n")
    print(f"held-out perplexity: {ppl:.4f}")
    return 0


def _check_trace_matches(cfg: RunConfig, meta: traceio.TraceMeta) -> None:
    lc = cfg.layer
    mismatches = []
    if meta.n_experts != lc.n_experts:
        mismatches.append(f"n_experts {meta.n_experts} != {lc.n_experts}")
    if meta.n_ffn != lc.n_ffn:
        mismatches.append(f"n_ffn {meta.n_ffn} != {lc.n_ffn}")
    if meta.k != lc.k:
        mismatches.append(f"k {meta.k} != {lc.k}")
    if mismatches:
        raise ConfigError("trace does not match config: " + "; ".join(mismatches))


def _write_sweep_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "ffn_ratio", "predicted_speedup"])
        for tau, ratio, speedup in rows:
            writer.writerow([repr(tau), repr(ratio), repr(speedup)])


def cmd_simulate(args) -> int:
    cfg = parse_run_config(args.config)
    if not args.trace:
        raise ConfigError("simulate needs --trace")
    trace_path = Path(args.trace)
    if not trace_path.exists():
        raise ConfigError(f"trace file not found: {trace_path}")
    meta, records = traceio.read_trace(trace_path)
    _check_trace_matches(cfg, meta)
    out = _out_dir(cfg, args.out)

    plans = traceio.plans_from_records(meta, records)
    placement = Placement.balanced(cfg.layer.n_ffn, cfg.sim.devices)
    cost_model = CostModel.from_shape(cfg.model.dim, cfg.model.intermediate_dim)
    report = simulate(plans, cfg.layer, placement, cost_model)
    (out / "cost_report.txt").write_text(report.to_text())

    rows = tau_sweep(cfg.layer.n_ffn, cfg.layer.n_zc, cfg.sim.tau_sweep)
    _write_sweep_csv(out / "tau_sweep.csv", rows)
    print(report.to_text(), end="")
    print(f"wrote {out / 'cost_report.txt'} and {out / 'tau_sweep.csv'}")
    return 0


def cmd_sweep_tau(args) -> int:
    cfg = parse_run_config(args.config)
    out = _out_dir(cfg, args.out)
    rows = tau_sweep(cfg.layer.n_ffn, cfg.layer.n_zc, cfg.sim.tau_sweep)
    _write_sweep_csv(out / "tau_sweep.csv", rows)
    print(f"{'tau':>6} {'ffn_ratio':>10} {'speedup':>9}")
    for tau, ratio, speedup in rows:
        print(f"{tau:6.2f} {ratio:10.4f} {speedup:8.1%}")
    print(f"wrote {out / 'tau_sweep.csv'}")
    return 0


def cmd_analyze(args) -> int:
    if not args.trace:
        raise ConfigError("analyze needs --trace")
    if args.analysis not in ANALYSES:
        raise ConfigError(
            f"unknown analysis {args.analysis!r}; valid names: {', '.join(ANALYSES)}"
        )
    trace_path = Path(args.trace)
    if not trace_path.exists():
        raise ConfigError(f"trace file not found: {trace_path}")
    meta, records = traceio.read_trace(trace_path)
    out = Path(args.out) if args.out else trace_path.parent
    out.mkdir(parents=True, exist_ok=True)

    if args.analysis in ("expert-load", "expert-load-by-tag"):
        group_by = "layer" if args.analysis == "expert-load" else "tag"
        rows = analysis_mod.expert_load_distribution(meta, records, group_by=group_by)
        csv_path = out / f"{args.analysis}.csv"
        analysis_mod.write_expert_load_csv(csv_path, meta, rows)
        plotted = analysis_mod.maybe_plot_expert_load(out / f"{args.analysis}.png", meta, rows)
    else:
        values = analysis_mod.ffn_activation_per_token(meta, records)
        csv_path = out / "ffn-per-token.csv"
        analysis_mod.write_ffn_per_token_csv(csv_path, values)
        plotted = analysis_mod.maybe_plot_ffn_per_token(out / "ffn-per-token.png", values)
    print(f"wrote {csv_path}" + ("" if plotted else " (plot skipped: matplotlib unavailable)"))
    return 0


def cmd_config_check(args) -> int:
    cfg = parse_run_config(args.config)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetmoe",
        description="Train, analyze, and cost-model heterogeneous mixture-of-experts layers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, *, config=True, trace=False, analysis=False):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="override io.out_dir")
        if trace:
            p.add_argument("--trace", default=None, help="path to a routing trace file")
        if analysis:
            p.add_argument("--analysis", required=True,
                           help=f"analysis name: {', '.join(ANALYSES)}")
        p.set_defaults(fn=fn)
        return p

    add("train", cmd_train, "train a model; writes checkpoint, metrics, and trace")
    add("eval", cmd_eval, "evaluate held-out perplexity of a trained checkpoint")
    add("simulate", cmd_simulate, "cost report + tau sweep from a routing trace", trace=True)
    add("sweep-tau", cmd_sweep_tau, "tabulate ffn ratio and predicted speedup over tau")
    add("analyze", cmd_analyze, "run a trace analysis to CSV (and PNG when possible)",
        config=False, trace=True, analysis=True)
    add("config-check", cmd_config_check, "validate a config and print its normalized form")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
