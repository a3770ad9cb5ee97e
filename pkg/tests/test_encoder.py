import numpy as np
import pytest

from genatt.encoder import embed_sequence, encode_sequence, init_embedding_params, init_encoder_params
from genatt.tensor import RngStream, Tensor, grad_check


def _tables(num_items=7, n=5, d=3, seed=0):
    return init_embedding_params(RngStream(seed), num_items, n, d)


def test_all_pad_is_positional():
    p = _tables()
    M = embed_sequence(np.zeros((2, 5), dtype=int), p)
    np.testing.assert_array_equal(M.data[0], p["pos_table"].data)


def test_single_item_last_position():
    p = _tables()
    items = np.array([[0, 0, 0, 0, 4]])
    M = embed_sequence(items, p)
    np.testing.assert_array_equal(M.data[0, 4], p["item_table"].data[4] + p["pos_table"].data[4])


def test_embed_matches_loop_oracle():
    p = _tables(seed=3)
    items = np.random.default_rng(1).integers(0, 8, (4, 5))
    M = embed_sequence(items, p).data
    for b in range(4):
        for i in range(5):
            np.testing.assert_array_equal(M[b, i], p["item_table"].data[items[b, i]] + p["pos_table"].data[i])


def test_embed_id_out_of_range():
    with pytest.raises(IndexError):
        embed_sequence(np.array([[0, 0, 0, 0, 8]]), _tables())


def test_zero_weights_zero_states():
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in init_encoder_params(RngStream(0), 3, 6).items()}
    enc = encode_sequence(Tensor(np.zeros((2, 4, 3))), np.ones((2, 4), bool), p)
    assert not enc.S.data.any() and not enc.h_g.data.any()


def test_shapes():
    p = init_encoder_params(RngStream(0), 3, 6)
    enc = encode_sequence(Tensor(np.random.default_rng(0).normal(size=(2, 4, 3))), np.ones((2, 4), bool), p)
    assert enc.S.shape == (2, 4, 6) and enc.h_g.shape == (2, 6)
    np.testing.assert_array_equal(enc.h_g.data, enc.S.data[:, -1])


def _gru_oracle(M, mask, p):
    W, U_zr, U_c, b = (p[k].data for k in ("gru.W", "gru.U_zr", "gru.U_c", "gru.b"))
    d_h = U_c.shape[0]
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    out = np.zeros(M.shape[:2] + (d_h,))
    for bi in range(M.shape[0]):
        h = np.zeros(d_h)
        for t in range(M.shape[1]):
            x = M[bi, t] @ W + b
            z = sig(x[:d_h] + h @ U_zr[:, :d_h])
            r = sig(x[d_h:2 * d_h] + h @ U_zr[:, d_h:])
            c = np.tanh(x[2 * d_h:] + (r * h) @ U_c)
            if mask[bi, t]:
                h = (1 - z) * h + z * c
            out[bi, t] = h
    return out


def test_gru_matches_loop_oracle_and_copies_pads():
    p = init_encoder_params(RngStream(2), 3, 5)
    M = np.random.default_rng(2).normal(size=(2, 6, 3))
    mask = np.array([[0, 0, 1, 1, 1, 1], [0, 1, 1, 0, 1, 1]], bool)
    S = encode_sequence(Tensor(M), mask, p).S.data
    np.testing.assert_allclose(S, _gru_oracle(M, mask, p), atol=1e-12)
    assert not S[0, :2].any()
    np.testing.assert_array_equal(S[1, 3], S[1, 2])


def test_encoder_grad_check():
    p = init_encoder_params(RngStream(4), 3, 4)
    M = Tensor(np.random.default_rng(4).normal(size=(2, 3, 3)), requires_grad=True)
    mask = np.array([[0, 1, 1], [1, 1, 1]], bool)
    w = np.random.default_rng(5).normal(size=(2, 3, 4))
    f = lambda: (encode_sequence(M, mask, p).S * w).sum()  # noqa: E731
    assert grad_check(f, [M] + list(p.values())) < 1e-6
