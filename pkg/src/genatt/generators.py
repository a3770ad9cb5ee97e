"""Attention-weight generators: dot-product baseline, VAE and diffusion.

Generated stacks have shape (B, L, H, n, n): batch, layer, head, query row,
key column. Raw logits are causally masked and row-normalised before use.

Both generators accept either one conditioning vector per sequence,
``(B, d_h)``, or one per query row, ``(B, n, d_h)``. In the per-row form,
row ``i`` of every generated matrix is produced from ``cond[:, i]`` alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .encoder import NumericError, uniform
from .tensor import (
    RngStream,
    Tensor,
    clamp,
    concat,
    exp,
    expand,
    matmul,
    no_grad,
    softmax_rows,
    tanh,
)


class ConfigError(ValueError):
    pass


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n); True where key column j <= query row i."""
    return np.tril(np.ones((n, n), dtype=bool))


@dataclass
class GenAttention:
    logits: Tensor
    normalized: Tensor
    aux: dict = field(default_factory=dict)


@dataclass
class LatentState:
    mu: Tensor
    log_var: Tensor
    z: Tensor
    h_s: Tensor
    eps: np.ndarray


def normalize(logits: Tensor) -> Tensor:
    return softmax_rows(logits, causal_mask(logits.shape[-1]))


# ---------------------------------------------------------------------------
# deterministic baseline


def deterministic_attention(Q: Tensor, K: Tensor, mask: np.ndarray | bool | None = None) -> GenAttention:
    """softmax(Q K^T / sqrt(d)) with an optional mask (``True`` = causal)."""
    d = Q.shape[-1]
    if d == 0:
        raise ConfigError("attention width d must be positive")
    if K.shape[-1] != d:
        raise ConfigError(f"query width {d} != key width {K.shape[-1]}")
    logits = matmul(Q, K.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    if mask is True:
        mask = causal_mask(logits.shape[-1])
    elif mask is False:
        mask = None
    return GenAttention(logits, softmax_rows(logits, mask))


# ---------------------------------------------------------------------------
# VAE generator


def init_vae_params(rng: RngStream, d_h: int, n: int, L: int, H: int, dtype=np.float64) -> dict[str, Tensor]:
    b = 1.0 / math.sqrt(d_h)
    return {
        "vae.enc.W1": uniform(rng, (d_h, d_h), b, dtype),
        "vae.enc.b1": Tensor(np.zeros(d_h, dtype), requires_grad=True),
        "vae.enc.W2": uniform(rng, (d_h, 2 * d_h), b, dtype),
        "vae.enc.b2": Tensor(np.zeros(2 * d_h, dtype), requires_grad=True),
        "vae.dec.Ws": uniform(rng, (d_h, d_h), b, dtype),
        "vae.dec.bs": Tensor(np.zeros(d_h, dtype), requires_grad=True),
        "vae.dec.Wh": uniform(rng, (d_h, L, H, n, n), b, dtype),
        "vae.dec.bh": Tensor(np.zeros((L, H, n, n), dtype), requires_grad=True),
    }


def vae_encode(h: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One tanh hidden layer to (mu, log_var); log_var clamped to [-10, 10]."""
    d_h = params["vae.enc.W1"].shape[0]
    hidden = tanh(matmul(h, params["vae.enc.W1"]) + params["vae.enc.b1"])
    out = matmul(hidden, params["vae.enc.W2"]) + params["vae.enc.b2"]
    mu = out[..., :d_h]
    log_var = clamp(out[..., d_h:], -10.0, 10.0)
    return mu, log_var


def reparameterize(mu: Tensor, log_var: Tensor, eps: np.ndarray) -> Tensor:
    """z = mu + exp(log_var / 2) * eps; eps is a constant."""
    if mu.shape != log_var.shape or mu.shape != np.shape(eps):
        raise ConfigError(f"shape mismatch: mu {mu.shape}, log_var {log_var.shape}, eps {np.shape(eps)}")
    return mu + exp(log_var * 0.5) * Tensor(np.asarray(eps, dtype=mu.dtype))


def vae_decode(z: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Shared tanh MLP then one affine map per (layer, head) to n x n logits.

    Returns ``(logits, h_s)``; logits are (B, L, H, n, n).
    """
    Wh = params["vae.dec.Wh"]
    d_h, L, H, n, _ = Wh.shape
    if z.shape[-1] != d_h:
        raise ConfigError(f"latent width {z.shape[-1]} != decoder width {d_h}")
    h_s = tanh(matmul(z, params["vae.dec.Ws"]) + params["vae.dec.bs"])
    B = z.shape[0]
    if z.ndim == 2:
        flat = matmul(h_s, Wh.reshape(d_h, L * H * n * n))
        logits = flat.reshape(B, L, H, n, n)
    elif z.ndim == 3:
        if z.shape[1] != n:
            raise ConfigError(f"per-row latent has {z.shape[1]} rows, decoder expects {n}")
        # row i only needs the slice of each head map that writes row i
        W_rows = Wh.transpose(3, 0, 1, 2, 4).reshape(n, d_h, L * H * n)
        rows = matmul(h_s.transpose(1, 0, 2), W_rows)  # (n, B, L*H*n)
        logits = rows.reshape(n, B, L, H, n).transpose(1, 2, 3, 0, 4)
    else:
        raise ConfigError(f"latent must be (B, d_h) or (B, n, d_h), got {z.shape}")
    return logits + params["vae.dec.bh"], h_s


def vae_generate(cond: Tensor, params: dict[str, Tensor], rng: RngStream | None, collapse: bool = False) -> GenAttention:
    """Encode, sample and decode. ``collapse`` forces sigma to zero."""
    mu, log_var = vae_encode(cond, params)
    if collapse or rng is None:
        eps = np.zeros(mu.shape, dtype=mu.dtype)
    else:
        eps = rng.normal(mu.shape, dtype=mu.dtype)
    z = mu if collapse else reparameterize(mu, log_var, eps)
    logits, h_s = vae_decode(z, params)
    latent = LatentState(mu=mu, log_var=log_var, z=z, h_s=h_s, eps=eps)
    return GenAttention(logits, normalize(logits), {"latent": latent})


# ---------------------------------------------------------------------------
# diffusion generator


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray

    def alpha_at(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"diffusion step {t.tolist()} outside [1, {self.T}]")
        return self.alpha[t - 1]


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return NoiseSchedule(T=T, beta=beta, alpha=1.0 - beta)


def _step_coef(values: np.ndarray, ndim: int, dtype) -> np.ndarray:
    values = np.asarray(values, dtype=dtype)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def diffusion_forward(A0, t, eps, sched: NoiseSchedule):
    """A_t = sqrt(alpha_t) A_0 + sqrt(1 - alpha_t) eps, per-step alpha.

    ``t`` is an int or one step per leading batch entry.
    """
    a = sched.alpha_at(t)
    ndim = np.ndim(A0.data if isinstance(A0, Tensor) else A0)
    dtype = A0.dtype
    return A0 * _step_coef(np.sqrt(a), ndim, dtype) + eps * _step_coef(np.sqrt(1.0 - a), ndim, dtype)


def diffusion_reverse_step(A_t, eps_hat, t, sched: NoiseSchedule):
    """A_{t-1} = (A_t - sqrt(1 - alpha_t) eps_hat) / sqrt(alpha_t)."""
    a = sched.alpha_at(t)
    ndim = np.ndim(A_t.data if isinstance(A_t, Tensor) else A_t)
    dtype = A_t.dtype
    return (A_t - eps_hat * _step_coef(np.sqrt(1.0 - a), ndim, dtype)) * _step_coef(1.0 / np.sqrt(a), ndim, dtype)


def diffusion_final(A_t, eps_hat, t, sched: NoiseSchedule):
    """Closing step: A_gen = A_t - eps_hat * sqrt(1 - alpha_t)."""
    a = sched.alpha_at(t)
    ndim = np.ndim(A_t.data if isinstance(A_t, Tensor) else A_t)
    return A_t - eps_hat * _step_coef(np.sqrt(1.0 - a), ndim, A_t.dtype)


def sinusoidal_embedding(positions, dim: int) -> np.ndarray:
    """(..., dim) sin/cos features of integer positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions[..., None] * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


def init_diffusion_params(
    rng: RngStream, d_h: int, n: int, L: int, H: int, d_t: int, hidden: int, dtype=np.float64
) -> dict[str, Tensor]:
    width = L * H * n
    fan_in = width + d_h + 2 * d_t
    return {
        "diff.W1": uniform(rng, (fan_in, hidden), 1.0 / math.sqrt(fan_in), dtype),
        "diff.b1": Tensor(np.zeros(hidden, dtype), requires_grad=True),
        "diff.W2": uniform(rng, (hidden, width), 1.0 / math.sqrt(hidden), dtype),
        "diff.b2": Tensor(np.zeros(width, dtype), requires_grad=True),
    }


def predict_noise(A_t: Tensor, cond: Tensor, t, params: dict[str, Tensor], d_t: int) -> Tensor:
    """Noise estimate for A_t given conditioning and step.

    Each query row of the stack, across all layers and heads, is flattened
    and concatenated with its conditioning vector, a step embedding and a
    row-index embedding, then passed through a two-layer tanh MLP.
    """
    if not isinstance(A_t, Tensor):
        A_t = Tensor(A_t)
    B, L, H, n, _ = A_t.shape
    width = L * H * n
    rows = A_t.transpose(0, 3, 1, 2, 4).reshape(B, n, width)
    if cond.ndim == 2:
        cond_rows = expand(cond.reshape(B, 1, cond.shape[-1]), (B, n, cond.shape[-1]))
    else:
        cond_rows = cond
    steps = np.broadcast_to(np.asarray(t), (B,))
    t_emb = np.broadcast_to(sinusoidal_embedding(steps, d_t)[:, None, :], (B, n, d_t))
    r_emb = np.broadcast_to(sinusoidal_embedding(np.arange(n), d_t)[None], (B, n, d_t))
    feats = concat([rows, cond_rows, Tensor(t_emb.astype(A_t.dtype)), Tensor(r_emb.astype(A_t.dtype))], axis=-1)
    hidden = tanh(matmul(feats, params["diff.W1"]) + params["diff.b1"])
    out = matmul(hidden, params["diff.W2"]) + params["diff.b2"]
    return out.reshape(B, n, L, H, n).transpose(0, 2, 3, 1, 4)


def generate_attention_diffusion(
    cond: Tensor,
    sched: NoiseSchedule,
    params: dict[str, Tensor],
    rng: RngStream,
    L: int,
    H: int,
    d_t: int,
    predictor: Callable | None = None,
) -> GenAttention:
    """Reverse diffusion from standard-normal logits down to A_gen.

    Steps T..2 use the per-step reverse update; step 1 uses the closing
    formula. ``predictor`` overrides ``predict_noise`` (tests use it).
    """
    B = cond.shape[0]
    n = params["diff.W2"].shape[1] // (L * H)
    predict = predictor or (lambda a, t: predict_noise(a, cond, t, params, d_t))
    A = Tensor(rng.normal((B, L, H, n, n), dtype=cond.dtype))
    A_T = A.data
    eps_hats = []
    for t in range(sched.T, 1, -1):
        eps_hat = predict(A, t)
        eps_hats.append(eps_hat)
        A = diffusion_reverse_step(A, eps_hat, t, sched)
        if not np.isfinite(A.data).all():
            raise NumericError(f"non-finite diffusion state at step {t}")
    eps_hat = predict(A, 1)
    eps_hats.append(eps_hat)
    A_gen = diffusion_final(A, eps_hat, 1, sched)
    if not np.isfinite(A_gen.data).all():
        raise NumericError("non-finite diffusion state at step 1")
    return GenAttention(A_gen, normalize(A_gen), {"eps_hat": eps_hats, "A_T": A_T})


def diffusion_noise_pair(
    cond: Tensor, sched: NoiseSchedule, params: dict[str, Tensor], rng: RngStream, L: int, H: int, d_t: int
) -> tuple[np.ndarray, Tensor]:
    """Corrupt a zero A_0 at one uniform step per sample; return (eps, eps_hat)."""
    B = cond.shape[0]
    n = params["diff.W2"].shape[1] // (L * H)
    t = rng.integers(1, sched.T + 1, (B,))
    eps = rng.normal((B, L, H, n, n), dtype=cond.dtype)
    A0 = np.zeros_like(eps)
    A_t = diffusion_forward(A0, t, eps, sched)
    return eps, predict_noise(Tensor(A_t), cond, t, params, d_t)


# ---------------------------------------------------------------------------
# collapse / stochasticity


def collapse_check(generator: Callable[[Tensor], GenAttention], h_g: Tensor) -> bool:
    """True iff two generations give bitwise-identical normalised attention."""
    with no_grad():
        a = generator(h_g).normalized.data
        b = generator(h_g).normalized.data
    return a.shape == b.shape and a.tobytes() == b.tobytes()
