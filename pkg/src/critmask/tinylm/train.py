"""Toy-model training: weighted batches, Adam with warmup + cosine decay.

The optimizer follows the usual adaptive-moment recipe (step 1e-3, decay pair
0.9/0.999, epsilon 1e-8) with a 3% linear warmup and cosine decay to zero
over the configured step budget. Updates are in-place and bit-deterministic
given identical seeds and inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import DataError
from . import losses
from .model import ModelParams, _forward_batch, backward

OBJECTIVES = ("sft", "cft", "dft")


@dataclass(frozen=True)
class TrainBatch:
    """Padded batch: inputs, shifted gold targets, per-position weights."""

    token_ids: np.ndarray  # [B, L] int
    gold: np.ndarray  # [B, L] int
    weights: np.ndarray  # [B, L] float, zero at padding
    padding_mask: np.ndarray  # [B, L] bool, True at real positions

    def __post_init__(self) -> None:
        shapes = {a.shape for a in (self.token_ids, self.gold, self.weights, self.padding_mask)}
        if len(shapes) != 1 or self.token_ids.ndim != 2:
            raise DataError("TrainBatch arrays must share one 2D shape")
        if np.any(self.weights < 0):
            raise DataError("TrainBatch weights must be non-negative")
        if np.any(self.weights[~self.padding_mask] != 0):
            raise DataError("TrainBatch weights must be zero at padded positions")

    def validate_vocab(self, vocab_size: int) -> None:
        if self.gold[self.padding_mask].size and int(self.gold[self.padding_mask].max()) >= vocab_size:
            raise DataError("gold index exceeds vocab size")


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1000
    warmup_frac: float = 0.03


@dataclass
class AdamState:
    config: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, model: ModelParams, config: AdamConfig | None = None) -> "AdamState":
        config = config or AdamConfig()
        return cls(
            config=config,
            m={k: np.zeros_like(p) for k, p in model.params.items()},
            v={k: np.zeros_like(p) for k, p in model.params.items()},
        )


def lr_at(config: AdamConfig, step: int) -> float:
    """Learning rate for 0-based step index: linear warmup then cosine to zero."""
    total = max(1, config.total_steps)
    warmup = max(1, int(round(config.warmup_frac * total)))
    if step < warmup:
        return config.lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    progress = min(1.0, progress)
    return config.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def objective_loss_and_dlogits(
    logits: np.ndarray, batch: TrainBatch, objective: str
) -> tuple[float, np.ndarray]:
    if objective == "sft":
        return (
            losses.sft_loss(logits, batch.gold, batch.padding_mask),
            losses.sft_grad_wrt_logits(logits, batch.gold, batch.padding_mask),
        )
    if objective == "cft":
        return (
            losses.cft_loss(logits, batch.gold, batch.weights),
            losses.cft_grad_wrt_logits(logits, batch.gold, batch.weights),
        )
    if objective == "dft":
        return (
            losses.dft_loss(logits, batch.gold, batch.padding_mask),
            losses.dft_grad_wrt_logits(logits, batch.gold, batch.padding_mask),
        )
    raise DataError(f"unknown objective {objective!r}")


def objective_loss(logits: np.ndarray, batch: TrainBatch, objective: str) -> float:
    return objective_loss_and_dlogits(logits, batch, objective)[0]


def compute_grads(
    model: ModelParams, batch: TrainBatch, objective: str
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact parameter gradients for one batch."""
    batch.validate_vocab(model.cfg.vocab_size)
    logits, cache, _ = _forward_batch(model, batch.token_ids)
    loss, dlogits = objective_loss_and_dlogits(logits, batch, objective)
    return loss, backward(model, cache, dlogits)


def train_step(
    model: ModelParams, batch: TrainBatch, objective: str, state: AdamState
) -> float:
    """One in-place adaptive-moment update; returns the pre-update loss.

    Objective errors (e.g. an all-zero-weight cft batch) are raised before
    any parameter or optimizer state is touched.
    """
    if objective not in OBJECTIVES:
        raise DataError(f"unknown objective {objective!r}")
    if objective == "cft" and float(batch.weights.sum()) <= 0:
        raise DataError("cft_loss: total weight is zero")
    loss, grads = compute_grads(model, batch, objective)
    cfg = state.config
    lr = lr_at(cfg, state.step)
    state.step += 1
    t = state.step
    for name in sorted(model.params):
        g = grads[name]
        state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * (g * g)
        mhat = state.m[name] / (1 - cfg.beta1**t)
        vhat = state.v[name] / (1 - cfg.beta2**t)
        model.params[name] -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return loss


@dataclass(frozen=True)
class SequenceExample:
    """One training sequence: prompt ids, target ids, per-target weights."""

    prompt_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    target_weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.target_ids) != len(self.target_weights):
            raise DataError("target_ids and target_weights must have equal length")
        if len(self.target_ids) == 0:
            raise DataError("empty target sequence")
        if len(self.prompt_ids) == 0:
            raise DataError("empty prompt; the model needs at least one context token")


def build_batch(
    examples: list[SequenceExample], pad_id: int, eos_id: int | None, *, eos_weight: float = 1.0
) -> TrainBatch:
    """Pack sequences into one right-padded batch.

    The model input is prompt+target (+eos); position i predicts token i+1.
    Prompt positions carry zero weight; target positions carry their weights;
    the eos prediction (when eos_id is given) carries eos_weight.
    """
    rows = []
    for ex in examples:
        seq = list(ex.prompt_ids) + list(ex.target_ids)
        weights = [0.0] * (len(ex.prompt_ids) - 1) + list(ex.target_weights)
        if eos_id is not None:
            seq.append(eos_id)
            weights.append(eos_weight)
        rows.append((seq, weights))
    maxlen = max(len(seq) for seq, _ in rows)
    nb = len(rows)
    token_ids = np.full((nb, maxlen - 1), pad_id, dtype=np.int64)
    gold = np.full((nb, maxlen - 1), pad_id, dtype=np.int64)
    weights = np.zeros((nb, maxlen - 1))
    mask = np.zeros((nb, maxlen - 1), dtype=bool)
    for r, (seq, w) in enumerate(rows):
        n = len(seq) - 1
        token_ids[r, :n] = seq[:-1]
        gold[r, :n] = seq[1:]
        weights[r, :n] = w
        mask[r, :n] = True
    return TrainBatch(token_ids=token_ids, gold=gold, weights=weights, padding_mask=mask)


def train(
    model: ModelParams,
    examples: list[SequenceExample],
    objective: str,
    *,
    steps: int,
    batch_size: int,
    pad_id: int,
    eos_id: int | None,
    seed: int = 0,
    adam: AdamConfig | None = None,
    eos_weight: float = 1.0,
) -> list[float]:
    """Seeded minibatch training loop; returns the per-step loss curve."""
    if not examples:
        raise DataError("no training examples")
    adam = adam or AdamConfig(total_steps=steps)
    state = AdamState.init(model, adam)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    cursor = 0
    curve: list[float] = []
    for _ in range(steps):
        picked: list[SequenceExample] = []
        while len(picked) < min(batch_size, len(examples)):
            if cursor >= len(order):
                order = rng.permutation(len(examples))
                cursor = 0
            picked.append(examples[order[cursor]])
            cursor += 1
        batch = build_batch(picked, pad_id=pad_id, eos_id=eos_id, eos_weight=eos_weight)
        if objective == "cft" and float(batch.weights.sum()) <= 0:
            continue  # a batch of all-zero masks carries no signal
        curve.append(train_step(model, batch, objective, state))
    return curve
