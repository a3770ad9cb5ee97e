"""Per-epoch training-time measurements over sequence length and diffusion steps."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

from .data import InteractionLog, leave_one_out_split
from .model import GenAttModel, ModelConfig
from .training import TrainConfig, new_state, train_epoch

NS = (20, 30, 50, 100, 200)
TS = (10, 25, 50)

COMPLEXITY = {
    "deterministic": {"time": "O(n^2 d + n d^2)", "space": "O(|I| d + n d + 3 d^2)"},
    "vae": {"time": "O(n d + n^2)", "space": "O(|I| d + n d + n d_h)"},
    "diffusion": {"time": "O(T n^2)", "space": "O(|I| d + n^d + T d_h)"},
}


@dataclass
class BenchSettings:
    d: int = 16
    L: int = 1
    H: int = 1
    batch_size: int = 8  # small: the diffusion chain at n=T=200 keeps a large graph
    batches: int = 2  # batches timed per measurement
    repeats: int = 3
    seed: int = 0
    dtype: str = "float32"


def time_epoch(log: InteractionLog, mode: str, n: int, T: int, s: BenchSettings) -> dict:
    """Time ``s.batches`` training batches and scale to a full epoch.

    The fastest of ``s.repeats`` runs is kept.
    """
    split = leave_one_out_split(log, n)
    subset = split.train[: s.batch_size * s.batches]
    cfg = ModelConfig(num_items=log.num_items, d=s.d, n=n, L=s.L, H=s.H, T=T, mode=mode, seed=s.seed, dtype=s.dtype)
    tcfg = TrainConfig(batch_size=s.batch_size)
    best = math.inf
    for _ in range(s.repeats):
        model = GenAttModel(cfg)
        state = new_state(model, tcfg)
        t0 = time.perf_counter()
        train_epoch(model, subset, state, tcfg)
        best = min(best, time.perf_counter() - t0)
    timed = math.ceil(len(subset) / s.batch_size)
    full = math.ceil(len(split.train) / s.batch_size)
    per_batch = best / max(timed, 1)
    return {"mode": mode, "n": n, "T": T, "batches_timed": timed, "seconds_per_batch": per_batch, "epoch_seconds": per_batch * full}


def run_bench(log: InteractionLog, settings: BenchSettings, modes=("deterministic", "vae", "diffusion"), ns=NS, ts=TS, t_sweep_n: int = 50):
    """Return (grid rows, T-sweep rows, monotone flag)."""
    grid = [time_epoch(log, mode, n, n, settings) for mode in modes for n in ns]
    sweep = [time_epoch(log, "diffusion", t_sweep_n, T, settings) for T in ts]
    times = [r["epoch_seconds"] for r in sweep]
    monotone = all(a <= b for a, b in zip(times, times[1:]))
    return grid, sweep, monotone
