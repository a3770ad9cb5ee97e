"""Self-contained property suite behind ``genatt check``.

Each check builds its own small synthetic instance and returns
``(passed, detail)``. ``inject_fault`` corrupts the backward pass of the
model-level gradient checks so the harness can be seen to fail.
"""

from __future__ import annotations

import itertools
import math
import time
from typing import Callable

import numpy as np

from . import generators as gen
from . import tensor as tc
from .data import TrainSequence
from .encoder import embed_sequence, encode_sequence
from .metrics import category_coverage, category_vectors, intra_list_distance, mrr, ndcg_at, rank_all, recall_at
from .model import GenAttModel, ModelConfig
from .tensor import Adam, RngStream, Tensor, grad_check, no_grad
from .training import batch_losses, total_loss

GRAD_TOL_OP = 1e-6
GRAD_TOL_MODEL = 1e-3


def _faulty(x: Tensor) -> Tensor:
    """Identity forward, backward scaled by 1.5 (fault injection only)."""
    return tc._make(x.data.copy(), (x,), lambda g: x._accumulate(1.5 * g))


# ---------------------------------------------------------------------------
# gradient checks


def op_grad_errors(seed: int = 0) -> dict[str, float]:
    """Isolated central-difference checks for every differentiable op."""
    r = np.random.default_rng(seed)

    def p(*shape, positive=False):
        data = r.uniform(0.5, 2.0, shape) if positive else r.normal(size=shape)
        return Tensor(data, requires_grad=True)

    a, b = p(3, 4), p(4, 2)
    x, y = p(2, 3), p(2, 3)
    pos = p(2, 3, positive=True)
    w = Tensor(r.normal(size=(2, 3)))
    sq = p(2, 3, 3)
    mask = gen.causal_mask(3)
    gain, bias = p(3), p(3)
    cases: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {
        "matmul": (lambda: (tc.matmul(a, b) * Tensor(np.arange(6.0).reshape(3, 2))).sum(), [a, b]),
        "add": (lambda: ((x + y[0]) * w).sum(), [x, y]),
        "sub": (lambda: ((x - y) * w).sum(), [x, y]),
        "mul": (lambda: (x * y * w).sum(), [x, y]),
        "div": (lambda: (x / pos * w).sum(), [x, pos]),
        "exp": (lambda: (tc.exp(x) * w).sum(), [x]),
        "log": (lambda: (tc.log(pos) * w).sum(), [pos]),
        "sqrt": (lambda: (tc.sqrt(pos) * w).sum(), [pos]),
        "tanh": (lambda: (tc.tanh(x) * w).sum(), [x]),
        "sigmoid": (lambda: (tc.sigmoid(x) * w).sum(), [x]),
        "reshape": (lambda: (x.reshape(3, 2) * w.reshape(3, 2)).sum() * 2.0, [x]),
        "transpose": (lambda: (x.transpose() * w.transpose() * x.transpose()).sum(), [x]),
        "sum_mean": (lambda: (x.sum(axis=0) * x.mean(axis=0)).sum(), [x]),
        "getitem": (lambda: (x[:, 1:] * x[:, :2]).sum() + (x[np.array([0, 0, 1])] ** 2.0).sum(), [x]),
        "concat_stack": (lambda: (tc.concat([x, y], axis=0) ** 2.0).sum() + (tc.stack([x, y]) * 3.0).mean(), [x, y]),
        "softmax_rows": (lambda: (tc.softmax_rows(sq, mask) * Tensor(np.arange(9.0).reshape(3, 3))).sum(), [sq]),
        "layer_norm": (lambda: (tc.layer_norm(x, gain, bias) * w).sum(), [x, gain, bias]),
        "dropout": (lambda: (tc.dropout(x, 0.5, RngStream(3), True) * w).sum(), [x]),
        "where_expand": (lambda: (tc.where(w.data > 0, x, y) * tc.expand(y[0:1], (2, 3))).sum(), [x, y]),
    }
    out = {}
    for name, (f, params) in cases.items():
        out[name] = grad_check(f, params)
    return out


def toy_batch() -> list[TrainSequence]:
    return [
        TrainSequence(1, np.array([0, 1, 2, 3]), np.array([1, 2, 3, 4]), np.array([1, 2, 3, 4])),
        TrainSequence(2, np.array([0, 0, 5, 6]), np.array([0, 5, 6, 2]), np.array([2, 5, 6])),
    ]


def toy_config(mode: str, **kw) -> ModelConfig:
    base = dict(num_items=6, d=4, n=4, L=1, H=1, T=3, mode=mode, dropout=0.4, d_t=4, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def model_grad_error(mode: str, inject_fault: bool = False) -> float:
    """Full joint-loss grad check on the 2-user, n=4, d=4 toy."""
    model = GenAttModel(toy_config(mode))
    batch = toy_batch()

    def f():
        rec, g = batch_losses(model, batch, RngStream(11))
        loss = total_loss(rec, g, model.config.gamma)
        return _faulty(loss) if inject_fault else loss

    return grad_check(f, list(model.params.values()))


# ---------------------------------------------------------------------------
# diffusion algebra and generators


def diffusion_roundtrip_error(T: int = 50, seed: int = 0) -> float:
    sched = gen.build_schedule(T, 1e-4, 0.02)
    r = np.random.default_rng(seed)
    worst = 0.0
    for t in range(1, T + 1):
        A0 = r.normal(size=(2, 1, 2, 5, 5))
        eps = r.normal(size=A0.shape)
        back = gen.diffusion_reverse_step(gen.diffusion_forward(A0, t, eps, sched), eps, t, sched)
        worst = max(worst, float(np.max(np.abs(back - A0))))
    return worst


def _toy_cond(seed: int = 0, B: int = 3, d_h: int = 8) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=(B, d_h)))


def regenerations(generate: Callable[[int], gen.GenAttention], count: int = 100) -> np.ndarray:
    with no_grad():
        return np.stack([generate(k).normalized.data for k in range(count)])


def vae_regenerations(collapse: bool, count: int = 100, seed: int = 0) -> np.ndarray:
    n, L, H, d_h = 4, 1, 2, 8
    params = gen.init_vae_params(RngStream(seed), d_h, n, L, H)
    cond = _toy_cond(seed, d_h=d_h)
    return regenerations(lambda k: gen.vae_generate(cond, params, RngStream(1000 + k), collapse=collapse), count)


def diffusion_regenerations(frozen: bool, count: int = 100, seed: int = 0) -> np.ndarray:
    n, L, H, d_h, d_t = 4, 1, 2, 8, 4
    params = gen.init_diffusion_params(RngStream(seed), d_h, n, L, H, d_t, 16)
    sched = gen.build_schedule(n)
    cond = _toy_cond(seed, d_h=d_h)
    return regenerations(
        lambda k: gen.generate_attention_diffusion(cond, sched, params, RngStream(77 if frozen else 1000 + k), L, H, d_t),
        count,
    )


def bitwise_identical(samples: np.ndarray) -> bool:
    first = samples[0].tobytes()
    return all(s.tobytes() == first for s in samples[1:])


def max_entry_variance(samples: np.ndarray) -> float:
    return float(samples.var(axis=0).max())


# ---------------------------------------------------------------------------
# realizability of a fixed deterministic attention


def fit_deterministic_target(steps: int = 2000, seed: int = 0, lr: float = 1e-2, num_seqs: int = 8) -> tuple[float, int]:
    """Fit a collapsed VAE generator to dot-product attention logits.

    Toy sequences (n=4, d=4) are embedded and GRU-encoded with a fixed
    random model. The targets are dot-product logits from random query/key
    maps of the same embeddings. Encoder and decoder of the VAE generator
    (sigma pinned to zero) are trained to reproduce the targets from h_g.
    Returns (final MSE over causal entries, steps used).
    """
    n, d = 4, 4
    d_h = 2 * d
    rng = RngStream(seed)
    cfg = ModelConfig(num_items=10, d=d, n=n, L=1, H=1, mode="vae", seed=seed)
    base = GenAttModel(cfg)
    items = rng.integers(1, 11, (num_seqs, n))
    items[: num_seqs // 2, 0] = 0  # a few padded sequences
    with no_grad():
        M = embed_sequence(items, base.params)
        h_g = Tensor(encode_sequence(M, items > 0, base.params).h_g.data)
        Wq = Tensor(rng.normal((d, d)))
        Wk = Tensor(rng.normal((d, d)))
        target = gen.deterministic_attention(tc.matmul(M, Wq), tc.matmul(M, Wk), mask=True).logits.data
    allowed = np.broadcast_to(gen.causal_mask(n), target.shape)
    count = int(allowed.sum())
    params = {k: v for k, v in gen.init_vae_params(rng, d_h, n, 1, 1).items()}
    opt = Adam(params, lr=lr)
    mse = math.inf
    for step in range(1, steps + 1):
        opt.zero_grad()
        logits = gen.vae_generate(h_g, params, None, collapse=True).logits[:, 0, 0]
        diff = (logits - Tensor(target)) * Tensor(allowed.astype(float))
        loss = (diff * diff).sum() * (1.0 / count)
        mse = loss.item()
        if mse < 1e-4:
            return mse, step
        loss.backward()
        opt.step()
    return mse, steps


# ---------------------------------------------------------------------------
# metric oracle


def metric_oracle_mismatches() -> int:
    """Compare metrics against brute-force recomputation on all 6! rankings."""
    V = 6
    categories = {1: {0}, 2: {1}, 3: {0, 2}, 4: {3}, 5: {1, 3}, 6: set()}
    C = 4
    vectors = category_vectors(categories, V, C)
    bad = 0
    for perm in itertools.permutations(range(1, V + 1)):
        # scores that realise this exact ranking
        scores = np.zeros((1, V))
        for pos, item in enumerate(perm):
            scores[0, item - 1] = V - pos
        target = 3
        lst = rank_all(scores, targets=[target])[0]
        true_rank = perm.index(target) + 1
        if lst.target_rank != true_rank or list(lst.items) != list(perm):
            bad += 1
            continue
        for N in (1, 2, 3, 5, 6):
            top = perm[:N]
            if abs(ndcg_at(true_rank, N) - (1.0 / math.log2(true_rank + 1) if target in top else 0.0)) > 1e-15:
                bad += 1
            if recall_at(true_rank, N) != (1.0 if target in top else 0.0):
                bad += 1
            cov = len(set().union(*[categories[i] for i in top])) / C
            if category_coverage(lst.items, categories, C, N) != cov:
                bad += 1
            usable = [i for i in top if categories[i]]
            if len(usable) >= 2:
                dists = []
                for i, j in itertools.combinations(usable, 2):
                    ci, cj = categories[i], categories[j]
                    dists.append(1.0 - len(ci & cj) / math.sqrt(len(ci) * len(cj)))
                ref = sum(dists) / len(dists)
                if abs(intra_list_distance(lst.items, vectors, N) - ref) > 1e-12:
                    bad += 1
            elif not math.isnan(intra_list_distance(lst.items, vectors, N)):
                bad += 1
        if mrr(true_rank) != 1.0 / true_rank:
            bad += 1
    return bad


# ---------------------------------------------------------------------------
# causality


def causality_violations(mode: str, seed: int = 0, n: int = 6) -> int:
    """Count suffix perturbations that change earlier hidden states or scores."""
    cfg = ModelConfig(num_items=12, d=4, n=n, L=2, H=2, T=4, mode=mode, d_t=4, seed=seed)
    model = GenAttModel(cfg)
    r = np.random.default_rng(seed)
    base_items = r.integers(1, 13, (3, n))
    base_items[0, :2] = 0
    bad = 0
    with no_grad():
        ref = model.forward(base_items, RngStream(5), training=False)
        table = model.params["item_table"].data[1:]
        for i in range(n - 1):
            items = base_items.copy()
            items[:, i + 1:] = r.integers(1, 13, (3, n - i - 1))
            out = model.forward(items, RngStream(5), training=False)
            if out.hidden.data[:, : i + 1].tobytes() != ref.hidden.data[:, : i + 1].tobytes():
                bad += 1
            if (out.hidden.data[:, i] @ table.T).tobytes() != (ref.hidden.data[:, i] @ table.T).tobytes():
                bad += 1
    return bad


# ---------------------------------------------------------------------------
# registry


def _check_op_grads(fault):
    errs = op_grad_errors()
    worst = max(errs, key=errs.get)
    return errs[worst] < GRAD_TOL_OP, f"max rel err {errs[worst]:.2e} ({worst})"


def _model_grad(mode):
    def run(fault):
        err = model_grad_error(mode, inject_fault=fault)
        return err < GRAD_TOL_MODEL, f"max rel err {err:.2e}"

    return run


def _check_roundtrip(fault):
    err = diffusion_roundtrip_error()
    return err <= 1e-12, f"max abs err {err:.2e} over t=1..50"


def _check_softmax(fault):
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5, 5)) * 30)
    y = tc.softmax_rows(x, gen.causal_mask(5)).data
    ok = np.all(y[:, ~gen.causal_mask(5)] == 0.0) and np.allclose(y.sum(-1), 1.0, atol=1e-6) and np.all(y >= 0)
    return bool(ok), "masked entries zero, rows stochastic"


def _check_collapse_vae(fault):
    s = vae_regenerations(collapse=True)
    return bitwise_identical(s), "100 regenerations with sigma=0"


def _check_stochastic_vae(fault):
    v = max_entry_variance(vae_regenerations(collapse=False))
    return v > 0.0, f"max per-entry variance {v:.3e}"


def _check_collapse_diffusion(fault):
    return bitwise_identical(diffusion_regenerations(frozen=True)), "100 regenerations with a frozen seed"


def _check_stochastic_diffusion(fault):
    v = max_entry_variance(diffusion_regenerations(frozen=False))
    return v > 0.0, f"max per-entry variance {v:.3e}"


def _check_realizability(fault):
    mse, steps = fit_deterministic_target()
    return mse < 1e-3, f"logit MSE {mse:.2e} after {steps} steps"


def _check_metrics(fault):
    bad = metric_oracle_mismatches()
    spot = abs(ndcg_at(3, 5) - 0.5)
    return bad == 0 and spot <= 1e-12, f"{bad} mismatches over 720 rankings"


def _check_causality(fault):
    bad = {m: causality_violations(m) for m in ("deterministic", "vae", "diffusion")}
    return sum(bad.values()) == 0, ", ".join(f"{m}: {v}" for m, v in bad.items())


CHECKS: dict[str, Callable[[bool], tuple[bool, str]]] = {
    "op-grads": _check_op_grads,
    "model-grad-deterministic": _model_grad("deterministic"),
    "model-grad-vae": _model_grad("vae"),
    "model-grad-diffusion": _model_grad("diffusion"),
    "diffusion-roundtrip": _check_roundtrip,
    "softmax-mask": _check_softmax,
    "collapse-vae": _check_collapse_vae,
    "stochastic-vae": _check_stochastic_vae,
    "collapse-diffusion": _check_collapse_diffusion,
    "stochastic-diffusion": _check_stochastic_diffusion,
    "realizability": _check_realizability,
    "metric-oracle": _check_metrics,
    "causality": _check_causality,
}


def run_checks(only=None, inject_fault: bool = False) -> list[dict]:
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name](inject_fault)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append({"name": name, "passed": bool(ok), "detail": detail, "seconds": round(time.perf_counter() - t0, 3)})
    return results
