"""Finite-difference verification of analytic parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DataError
from .losses import per_token_ce
from .model import ModelParams, forward
from .train import TrainBatch, compute_grads, objective_loss

FD_STEP = 1e-4
FULL_CHECK_LIMIT = 20_000
SUBSAMPLE_MIN = 500


def _fd_loss_fn(model: ModelParams, batch: TrainBatch, objective: str):
    """Loss as a function of logits for finite differencing.

    For dft the probability weights are detached in the analytic gradient, so
    the comparison objective freezes them at their unperturbed values.
    """
    if objective != "dft":
        return lambda logits: objective_loss(logits, batch, objective)
    logits0 = forward(model, batch.token_ids)
    mask = batch.padding_mask
    frozen = np.exp(-per_token_ce(logits0, batch.gold)) * mask
    n = int(mask.sum())
    if n == 0:
        raise DataError("dft_loss: all positions are padded")
    return lambda logits: float(np.sum(per_token_ce(logits, batch.gold) * frozen) / n)


@dataclass(frozen=True)
class GradReport:
    max_relative_error: float
    worst_parameter_name: str
    num_checked: int

    def __post_init__(self) -> None:
        if self.max_relative_error < 0:
            raise DataError("max_relative_error must be >= 0")


def grad_check(
    model: ModelParams, batch: TrainBatch, objective: str, *, seed: int = 0
) -> GradReport:
    """Compare analytic gradients against central differences (step 1e-4).

    Every coordinate is perturbed when the model has at most 20k parameters;
    larger models get a seeded subsample of at least 500 coordinates. The
    error is computed per parameter tensor over the checked coordinates as
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) in the Euclidean
    norm, and the report carries the worst tensor.
    """
    loss0, grads = compute_grads(model, batch, objective)
    if not np.isfinite(loss0):
        raise DataError("non-finite loss")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DataError(f"non-finite gradient for parameter {name!r}")

    coords: list[tuple[str, tuple[int, ...]]] = []
    total = model.num_params()
    if total <= FULL_CHECK_LIMIT:
        for name in sorted(model.params):
            for flat in range(model.params[name].size):
                coords.append((name, np.unravel_index(flat, model.params[name].shape)))
    else:
        rng = np.random.default_rng(seed)
        names = sorted(model.params)
        sizes = np.array([model.params[n].size for n in names])
        bounds = np.cumsum(sizes)
        picks = rng.choice(total, size=max(SUBSAMPLE_MIN, 500), replace=False)
        for flat in sorted(picks.tolist()):
            pi = int(np.searchsorted(bounds, flat, side="right"))
            offset = flat - (0 if pi == 0 else int(bounds[pi - 1]))
            coords.append((names[pi], np.unravel_index(offset, model.params[names[pi]].shape)))

    loss_fn = _fd_loss_fn(model, batch, objective)
    per_tensor: dict[str, tuple[list[float], list[float]]] = {}
    for name, idx in coords:
        tensor = model.params[name]
        original = tensor[idx]
        tensor[idx] = original + FD_STEP
        loss_plus = loss_fn(forward(model, batch.token_ids))
        tensor[idx] = original - FD_STEP
        loss_minus = loss_fn(forward(model, batch.token_ids))
        tensor[idx] = original
        numeric = (loss_plus - loss_minus) / (2 * FD_STEP)
        analytic = float(grads[name][idx])
        a_list, n_list = per_tensor.setdefault(name, ([], []))
        a_list.append(analytic)
        n_list.append(numeric)

    worst = 0.0
    worst_name = ""
    for name, (a_list, n_list) in per_tensor.items():
        a = np.asarray(a_list)
        n = np.asarray(n_list)
        rel = float(
            np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        )
        if rel >= worst:
            worst, worst_name = rel, name
    return GradReport(max_relative_error=worst, worst_parameter_name=worst_name, num_checked=len(coords))
