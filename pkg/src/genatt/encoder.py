"""Item/position embedding and the gated recurrent sequence encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import RngStream, Tensor, matmul, sigmoid, stack, tanh, where


class NumericError(FloatingPointError):
    pass


@dataclass
class EncodedSequence:
    M: Tensor  # (B, n, d) embedded inputs
    S: Tensor  # (B, n, d_h) per-step states
    h_g: Tensor  # (B, d_h) state at the final position


def uniform(rng: RngStream, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(shape, -bound, bound).astype(dtype), requires_grad=True)


def init_embedding_params(rng: RngStream, num_items: int, n: int, d: int, dtype=np.float64) -> dict[str, Tensor]:
    item = rng.normal((num_items + 1, d)) * (1.0 / np.sqrt(d))
    item[0] = 0.0
    pos = rng.normal((n, d)) * (1.0 / np.sqrt(d))
    return {
        "item_table": Tensor(item.astype(dtype), requires_grad=True),
        "pos_table": Tensor(pos.astype(dtype), requires_grad=True),
    }


def init_encoder_params(rng: RngStream, d: int, d_h: int, dtype=np.float64) -> dict[str, Tensor]:
    bound = 1.0 / np.sqrt(d_h)
    return {
        "gru.W": uniform(rng, (d, 3 * d_h), bound, dtype),
        "gru.U_zr": uniform(rng, (d_h, 2 * d_h), bound, dtype),
        "gru.U_c": uniform(rng, (d_h, d_h), bound, dtype),
        "gru.b": uniform(rng, (3 * d_h,), bound, dtype),
    }


def embed_sequence(items: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """M[b, i] = item_table[items[b, i]] + pos_table[i]."""
    items = np.asarray(items)
    table = params["item_table"]
    pos = params["pos_table"]
    if items.min(initial=0) < 0 or items.max(initial=0) >= table.shape[0]:
        raise IndexError(f"item id outside [0, {table.shape[0] - 1}]")
    if items.shape[-1] != pos.shape[0]:
        raise IndexError(f"sequence length {items.shape[-1]} != positional table length {pos.shape[0]}")
    return table[items] + pos


def encode_sequence(M: Tensor, mask: np.ndarray, params: dict[str, Tensor]) -> EncodedSequence:
    """Single-layer GRU, left to right; padded steps copy the previous state."""
    B, n, _ = M.shape
    d_h = params["gru.U_c"].shape[0]
    mask = np.asarray(mask, dtype=bool)
    x_proj = matmul(M, params["gru.W"]) + params["gru.b"]
    U_zr, U_c = params["gru.U_zr"], params["gru.U_c"]
    h = Tensor(np.zeros((B, d_h), dtype=M.dtype))
    states = []
    for t in range(n):
        xp = x_proj[:, t]
        hzr = matmul(h, U_zr)
        z = sigmoid(xp[:, :d_h] + hzr[:, :d_h])
        r = sigmoid(xp[:, d_h:2 * d_h] + hzr[:, d_h:])
        c = tanh(xp[:, 2 * d_h:] + matmul(r * h, U_c))
        h_new = h + z * (c - h)
        if not np.isfinite(h_new.data).all():
            raise NumericError(f"non-finite encoder state at position {t}")
        h = where(mask[:, t:t + 1], h_new, h)
        states.append(h)
    return EncodedSequence(M=M, S=stack(states, axis=1), h_g=h)
