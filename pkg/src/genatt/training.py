"""Joint objective, optimisation loop and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import generators as gen
from .data import SplitSet, TrainSequence, sample_negatives
from .evaluation import evaluate
from .model import GenAttModel
from .tensor import Adam, RngStream, Tensor, clamp, log, sigmoid

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "rec_loss", "gen_loss", "total_loss", "val_ndcg20", "seconds")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def bce_loss(pos_scores: Tensor, neg_scores: Tensor, valid_mask: np.ndarray) -> Tensor:
    """Binary cross-entropy averaged over every labelled term.

    Each valid position contributes one positive (label 1) and one negative
    (label 0) term, so the divisor is twice the number of valid positions.
    """
    valid_mask = np.asarray(valid_mask, dtype=bool)
    count = int(valid_mask.sum())
    if count == 0:
        raise TrainingError("no valid positions in batch")
    p_pos = clamp(sigmoid(pos_scores), 1e-7, 1.0 - 1e-7)
    p_neg = clamp(sigmoid(neg_scores), 1e-7, 1.0 - 1e-7)
    terms = log(p_pos) + log(1.0 - p_neg)
    w = Tensor(valid_mask.astype(pos_scores.dtype))
    return -(terms * w).sum() * (1.0 / (2 * count))


def kl_loss(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL to a standard normal, summed over the last axis, averaged over the rest."""
    per = (log_var + 1.0 - mu * mu - log_var.exp()).sum(axis=-1) * -0.5
    return per.mean()


def diffusion_loss(eps, eps_hat: Tensor) -> Tensor:
    diff = eps_hat - eps
    return (diff * diff).mean()


def total_loss(rec: Tensor, gen_loss: Tensor | float, gamma: float) -> Tensor:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return rec + gen_loss * gamma


# ---------------------------------------------------------------------------
# state and configuration


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    eval_seed: int = 0
    eval_samples: int = 1
    exclude_history: bool = True


@dataclass
class TrainState:
    rng: RngStream
    optimizer: Adam
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    patience_left: int = 20


@dataclass
class EpochStats:
    rec_loss: float
    gen_loss: float
    total_loss: float
    batches: int
    examples: int


def new_state(model: GenAttModel, tcfg: TrainConfig, seed: int | None = None) -> TrainState:
    seed = model.config.seed if seed is None else seed
    return TrainState(
        rng=RngStream(seed).fork(7),
        optimizer=Adam(model.params, lr=tcfg.lr),
        patience_left=tcfg.patience,
    )


def batch_losses(model: GenAttModel, batch: Sequence[TrainSequence], rng: RngStream) -> tuple[Tensor, Tensor | float]:
    """Training-mode (rec, gen) losses for one batch of sequences."""
    c = model.config
    items = np.stack([s.items for s in batch])
    targets = np.stack([s.targets for s in batch])
    negs = sample_negatives(targets, [s.history for s in batch], c.num_items, rng.fork(1))
    out = model.forward(items, rng.fork(2), training=True, score=False)
    table = model.params["item_table"]
    pos = (out.hidden * table[targets]).sum(axis=-1)
    neg = (out.hidden * table[negs]).sum(axis=-1)
    rec = bce_loss(pos, neg, targets > 0)
    if c.mode == "vae":
        latent = out.generated.aux["latent"]
        g = kl_loss(latent.mu, latent.log_var)
    elif c.mode == "diffusion":
        eps, eps_hat = gen.diffusion_noise_pair(out.encoded.S, model.schedule, model.params, rng.fork(3), c.L, c.H, c.d_t)
        g = diffusion_loss(eps, eps_hat)
    else:
        g = 0.0
    return rec, g


def train_epoch(model: GenAttModel, train: Sequence[TrainSequence], state: TrainState, tcfg: TrainConfig) -> EpochStats:
    """One shuffled pass with adaptive-moment updates; returns mean losses."""
    c = model.config
    order = state.rng.permutation(len(train))
    sums = np.zeros(3)
    batches = 0
    for bi, lo in enumerate(range(0, len(order), tcfg.batch_size)):
        batch = [train[i] for i in order[lo:lo + tcfg.batch_size]]
        step_rng = RngStream(int(state.rng.integers(0, 2**62)))
        rec, g = batch_losses(model, batch, step_rng)
        loss = total_loss(rec, g, c.gamma)
        rec_v = rec.item()
        gen_v = g.item() if isinstance(g, Tensor) else float(g)
        tot_v = loss.item()
        if not all(math.isfinite(v) for v in (rec_v, gen_v, tot_v)):
            raise TrainingError(f"non-finite loss at batch {bi}: rec={rec_v} gen={gen_v} total={tot_v}")
        state.optimizer.zero_grad()
        loss.backward()
        model.zero_pad_grad()
        state.optimizer.step()
        sums += (rec_v, gen_v, tot_v)
        batches += 1
    state.epoch += 1
    mean = sums / max(batches, 1)
    return EpochStats(*mean.tolist(), batches=batches, examples=len(train))


def snapshot(model: GenAttModel) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def restore(model: GenAttModel, snap: dict[str, np.ndarray]) -> None:
    for k, arr in snap.items():
        model.params[k].data = arr.copy()


@dataclass
class FitResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_metric: float
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def fit(
    model: GenAttModel,
    splits: SplitSet,
    tcfg: TrainConfig,
    validate: Callable[[GenAttModel], float] | None = None,
    log_path=None,
    on_improve: Callable[[GenAttModel, int], None] | None = None,
) -> FitResult:
    """Train until validation NDCG@20 stalls for ``patience`` epochs.

    ``validate`` overrides the default validation metric (used in tests).
    On return the model holds the best parameters seen.
    """
    if validate is None:
        def validate(m):
            return evaluate(m, splits.valid, users=splits.valid_users, exclude_history=tcfg.exclude_history,
                            seed=tcfg.eval_seed, samples=tcfg.eval_samples, cutoffs=(20,))["ndcg@20"]

    state = new_state(model, tcfg)
    result = FitResult(best_params=snapshot(model), best_epoch=0, best_metric=-math.inf)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        while state.epoch < tcfg.max_epochs:
            t0 = time.perf_counter()
            stats = train_epoch(model, splits.train, state, tcfg)
            metric = float(validate(model))
            seconds = time.perf_counter() - t0
            row = {
                "epoch": state.epoch,
                "rec_loss": stats.rec_loss,
                "gen_loss": stats.gen_loss,
                "total_loss": stats.total_loss,
                "val_ndcg20": metric,
                "seconds": seconds,
            }
            result.log.append(row)
            if writer is not None:
                writer.writerow([row["epoch"]] + [repr(row[k]) for k in LOG_FIELDS[1:5]] + [f"{seconds:.3f}"])
                fh.flush()
            logger.info("epoch %d rec=%.4f gen=%.4f val_ndcg20=%.4f (%.1fs)", state.epoch, stats.rec_loss, stats.gen_loss, metric, seconds)
            if metric > state.best_metric:
                state.best_metric = metric
                state.best_epoch = state.epoch
                state.patience_left = tcfg.patience
                result.best_params = snapshot(model)
                if on_improve is not None:
                    on_improve(model, state.epoch)
            else:
                state.patience_left -= 1
                if state.patience_left <= 0:
                    result.stopped_early = True
                    break
    finally:
        if fh is not None:
            fh.close()
    result.best_epoch = state.best_epoch
    result.best_metric = state.best_metric
    restore(model, result.best_params)
    return result
