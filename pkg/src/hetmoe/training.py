"""Training loop, optimizer, and synthetic corpora.

All randomness (init, batch sampling) flows from a single seed, so a rerun
with the same config reproduces the metrics stream bit for bit. A NaN/Inf
anywhere in the step surfaces as ``NumericalError`` and aborts training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layer import load_balance_loss, total_loss
from .model import ForwardResult, LanguageModel
from .tensor import Tape, Tensor


class Vocab:
    """Character-level vocabulary with a stable, sorted symbol order."""

    def __init__(self, text: str):
        self.chars = sorted(set(text))
        if len(self.chars) < 2:
            raise ValueError("corpus needs at least two distinct characters")
        self._index = {c: i for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self._index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[int(i)] for i in ids)


def repeated_pattern_text(pattern: str = "the quick brown fox jumps over the lazy dog; 0123456789 abcdef.\n",
                          repeats: int = 400) -> str:
    """A fixed 64-character pattern tiled; trivially learnable."""
    if len(pattern) != 64:
        raise ValueError("pattern must be exactly 64 characters")
    return pattern * repeats


def random_walk_text(n_chars: int = 20000, n_symbols: int = 12, seed: int = 0) -> str:
    """A biased random walk over a small alphabet; learnable local structure."""
    rng = np.random.default_rng(seed)
    symbols = [chr(ord("a") + i) for i in range(n_symbols)]
    state = 0
    out = []
    for _ in range(n_chars):
        step = rng.choice([-1, 0, 1], p=[0.25, 0.5, 0.25])
        state = int(np.clip(state + step, 0, n_symbols - 1))
        out.append(symbols[state])
    return "".join(out)


def split_corpus(tokens: np.ndarray, holdout: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(tokens) * (1.0 - holdout))
    return tokens[:cut], tokens[cut:]


class AdamOptimizer:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1, clip_norm: float = 1.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def clip_gradients(self) -> float:
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        norm = np.sqrt(sq)
        if self.clip_norm and norm > self.clip_norm:
            factor = self.clip_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= factor
        return float(norm)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"opt.m.{name}"])
            self.v[name] = np.array(arrays[f"opt.v.{name}"])
        self.step_count = step_count


def lr_schedule(step: int, total_steps: int, peak: float,
                warmup_steps: int, final_factor: float = 0.1) -> float:
    """Linear warmup to the peak, then cosine decay to final_factor * peak."""
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    floor = peak * final_factor
    return floor + 0.5 * (peak - floor) * (1.0 + np.cos(np.pi * progress))


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 3e-3
    beta: float = 0.01
    seed: int = 0
    warmup_steps: int = 20
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    lr_final_factor: float = 0.1


@dataclass
class StepMetrics:
    step: int
    lce: float
    lb: float
    total: float
    drop_rate: float          # fraction of tokens with every selection dropped
    pair_drop_rate: float     # fraction of (token, expert) selections dropped
    grad_norm: float
    lr: float
    f: list[float]            # selection fraction per expert, averaged over layers

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "lce": self.lce,
            "lb": self.lb,
            "total": self.total,
            "drop_rate": self.drop_rate,
            "pair_drop_rate": self.pair_drop_rate,
            "grad_norm": self.grad_norm,
            "lr": self.lr,
            "f": self.f,
        }


@dataclass
class TrainState:
    model: LanguageModel
    optimizer: AdamOptimizer
    history: list[StepMetrics] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.optimizer.step_count


def sample_batch(rng: np.random.Generator, tokens: np.ndarray,
                 batch_size: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    if len(tokens) < seq_len + 2:
        raise ValueError("corpus shorter than one training window")
    starts = rng.integers(0, len(tokens) - seq_len - 1, size=batch_size)
    x = np.stack([tokens[s : s + seq_len] for s in starts])
    y = np.stack([tokens[s + 1 : s + 1 + seq_len] for s in starts])
    return x, y


def batch_balance_loss(result: ForwardResult) -> Tensor:
    """Balance loss averaged across layers (one forward batch)."""
    losses = [load_balance_loss(stats) for stats in result.load_stats]
    acc = losses[0]
    for term in losses[1:]:
        acc = acc + term
    return acc * (1.0 / len(losses))


def train(model: LanguageModel, tokens: np.ndarray, cfg: TrainConfig,
          on_step=None) -> TrainState:
    """Optimize the model on a token stream; returns state with full history.

    ``on_step`` (if given) receives each :class:`StepMetrics` as it is
    produced, e.g. to stream records to disk.
    """
    params = model.parameters()
    opt = AdamOptimizer(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                        clip_norm=cfg.clip_norm)
    state = TrainState(model=model, optimizer=opt)
    rng = np.random.default_rng(cfg.seed)
    seq_len = model.cfg.seq_len

    for step in range(cfg.steps):
        x, y = sample_batch(rng, tokens, cfg.batch_size, seq_len)
        with Tape() as tape:
            ce, result = model.loss(x, y)
            lb = batch_balance_loss(result)
            objective = total_loss(ce, lb, cfg.beta)
            opt.zero_grad()
            tape.backward(objective)
        grad_norm = opt.clip_gradients()
        lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup_steps, cfg.lr_final_factor)
        opt.step(lr=lr)

        plans = result.plans
        metrics = StepMetrics(
            step=step,
            lce=ce.item(),
            lb=lb.item(),
            total=objective.item(),
            drop_rate=float(np.mean([p.token_drop_rate for p in plans])),
            pair_drop_rate=float(np.mean([p.pair_drop_rate for p in plans])),
            grad_norm=grad_norm,
            lr=lr,
            f=list(np.mean([s.f for s in result.load_stats], axis=0)),
        )
        state.history.append(metrics)
        if on_step is not None:
            on_step(metrics)
    return state


def evaluate_perplexity(model: LanguageModel, tokens: np.ndarray,
                        batch_size: int = 8) -> float:
    """exp(mean cross-entropy) over consecutive non-overlapping windows."""
    seq_len = model.cfg.seq_len
    n_windows = (len(tokens) - 1) // seq_len
    if n_windows < 1:
        raise ValueError("corpus shorter than one evaluation window")
    total_nll = 0.0
    total_positions = 0
    for start in range(0, n_windows, batch_size):
        batch = [
            (tokens[w * seq_len : w * seq_len + seq_len],
             tokens[w * seq_len + 1 : w * seq_len + 1 + seq_len])
            for w in range(start, min(start + batch_size, n_windows))
        ]
        x = np.stack([b[0] for b in batch])
        y = np.stack([b[1] for b in batch])
        ce, _ = model.loss(x, y)
        total_nll += ce.item() * x.size
        total_positions += x.size
    return float(np.exp(total_nll / total_positions))
