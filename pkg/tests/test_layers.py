import numpy as np
import pytest

from hmn import autodiff as ad
from hmn.autodiff import Parameter, Tensor, grad_check
from hmn.layers import (
    AdditiveAttention, BiLSTM, ConfigurationError, FeedForward, LayerNorm, Linear, LSTMCell,
    MultiHeadAttention, TransformerDecoder, TransformerEncoder, additive_attention, bilstm_encode,
    fully_connected, lstm_step, transformer_decode, transformer_encode,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def weighted(out: Tensor, rng) -> Tensor:
    """A generic scalar read-out so every output entry matters."""
    return ad.tsum(out * rng.normal(size=out.shape))


# -- fully connected --------------------------------------------------------

def test_fc_identity_and_bias(rng):
    fc = Linear(3, 3, rng)
    fc.W.data[...] = np.eye(3)
    fc.b.data[...] = 0.0
    x = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(fully_connected(Tensor(x), fc).data, x)
    fc.b.data[...] = [1.0, 2.0, 3.0]
    np.testing.assert_array_equal(fully_connected(Tensor(np.zeros((2, 3))), fc).data, [[1, 2, 3]] * 2)


def test_fc_gradient(rng):
    fc = Linear(3, 4, rng)
    x = Parameter(rng.normal(size=(2, 3)))
    w = rng.normal(size=(2, 4))
    assert grad_check(lambda: ad.tsum(fc(x) * w), [x, *fc.parameters()]) < 1e-6


def test_fc_without_bias(rng):
    fc = Linear(3, 2, rng, bias=False)
    assert [n for n, _ in fc.named_parameters()] == ["W"]
    np.testing.assert_array_equal(fc(Tensor(np.zeros((1, 3)))).data, np.zeros((1, 2)))


def test_fc_width_mismatch(rng):
    with pytest.raises(ValueError, match="trailing width"):
        Linear(3, 2, rng)(Tensor(np.zeros((1, 4))))


# -- additive attention ----------------------------------------------------------

def test_additive_attention_single_key(rng):
    att = AdditiveAttention(4, 3, 5, rng)
    values = rng.normal(size=(1, 6))
    weights, summary = additive_attention(rng.normal(size=4), rng.normal(size=(1, 3)), values, att)
    assert weights.data.tolist() == [1.0]
    np.testing.assert_array_equal(summary.data, values[0])


def test_additive_attention_zero_w_is_uniform(rng):
    att = AdditiveAttention(4, 3, 5, rng)
    att.w.data[...] = 0.0
    weights, _ = additive_attention(rng.normal(size=4), rng.normal(size=(7, 3)), rng.normal(size=(7, 2)), att)
    np.testing.assert_allclose(weights.data, np.full(7, 1 / 7), atol=1e-15)


def test_additive_attention_direct_formula(rng):
    att = AdditiveAttention(4, 3, 5, rng)
    q, K, V = rng.normal(size=4), rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    weights, summary = additive_attention(q, K, V, att)
    logits = np.array([att.w.data[:, 0] @ np.tanh(q @ att.W.data + k @ att.U.data + att.b.data) for k in K])
    alpha = np.exp(logits - logits.max())
    alpha /= alpha.sum()
    np.testing.assert_allclose(weights.data, alpha, atol=1e-12)
    np.testing.assert_allclose(summary.data, sum(a * v for a, v in zip(alpha, V)), atol=1e-12)


def test_additive_attention_gradient(rng):
    att = AdditiveAttention(3, 4, 5, rng)
    q = Parameter(rng.normal(size=(2, 3, 3)))
    k = Parameter(rng.normal(size=(2, 4, 4)))
    w = rng.normal(size=(2, 3, 4))
    assert grad_check(lambda: ad.tsum(att(q, k)[1] * w), [q, k, *att.parameters()]) < 1e-5


def test_additive_attention_empty_keys(rng):
    att = AdditiveAttention(3, 4, 5, rng)
    with pytest.raises(ad.EmptyInputError):
        att(Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros((1, 0, 4))))


# -- LSTM ---------------------------------------------------------------------------

def test_lstm_zero_fixed_point(rng):
    cell = LSTMCell(3, 4, rng)
    for p in (cell.W_x, cell.W_h):
        p.data[...] = 0.0
    cell.b.data[...] = 0.0
    cell.b.data[4:8] = 1.0  # forget bias
    h, c = lstm_step(np.zeros(3), (np.zeros(4), np.zeros(4)), cell)
    np.testing.assert_array_equal(h.data, np.zeros(4))
    np.testing.assert_array_equal(c.data, np.zeros(4))


def test_lstm_forget_bias_is_one(rng):
    cell = LSTMCell(3, 4, rng)
    np.testing.assert_array_equal(cell.b.data[4:8], np.ones(4))


def test_lstm_scalar_oracle(rng):
    cell = LSTMCell(1, 1, rng)
    x, h0, c0 = 0.7, -0.3, 0.4
    h, c = lstm_step(np.array([x]), (np.array([h0]), np.array([c0])), cell)
    z = x * cell.W_x.data[0] + h0 * cell.W_h.data[0] + cell.b.data
    i, f, g, o = sigmoid(z[0]), sigmoid(z[1]), np.tanh(z[2]), sigmoid(z[3])
    c_ref = f * c0 + i * g
    assert abs(c.item() - c_ref) < 1e-12
    assert abs(h.item() - o * np.tanh(c_ref)) < 1e-12


def test_lstm_three_step_gradient(rng):
    cell = LSTMCell(3, 4, rng)
    xs = Parameter(rng.normal(size=(3, 2, 3)))

    def loss():
        state = cell.zero_state(2)
        for t in range(3):
            state = cell(xs[t], state)
        return weighted(state[0], np.random.default_rng(5))

    assert grad_check(loss, [xs, *cell.parameters()]) < 1e-5


def test_lstm_state_width_checked(rng):
    cell = LSTMCell(3, 4, rng)
    with pytest.raises(ValueError):
        cell(Tensor(np.zeros((1, 3))), (Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 5)))))


# -- BiLSTM ---------------------------------------------------------------------------

def test_bilstm_length_one(rng):
    bi = BiLSTM(3, 8, rng)
    x = rng.normal(size=(1, 3))
    out = bilstm_encode(x, bi).data
    zero = (np.zeros(4), np.zeros(4))
    np.testing.assert_allclose(out[0, :4], lstm_step(x[0], zero, bi.forward_cell)[0].data, atol=1e-15)
    np.testing.assert_allclose(out[0, 4:], lstm_step(x[0], zero, bi.backward_cell)[0].data, atol=1e-15)


def test_bilstm_time_reversal(rng):
    bi = BiLSTM(3, 8, rng)
    X = rng.normal(size=(6, 3))
    out = bilstm_encode(X, bi).data
    swapped = BiLSTM(3, 8, rng)
    swapped.forward_cell, swapped.backward_cell = bi.backward_cell, bi.forward_cell
    rev = bilstm_encode(X[::-1].copy(), swapped).data
    # reversed in time, and each half now comes from the other direction
    expected = np.concatenate([out[::-1, 4:], out[::-1, :4]], axis=1)
    np.testing.assert_allclose(rev, expected, atol=1e-12)


def test_bilstm_gradient(rng):
    bi = BiLSTM(3, 4, rng)
    X = Parameter(rng.normal(size=(2, 4, 3)))
    assert grad_check(lambda: weighted(bi(X), np.random.default_rng(3)), [X, *bi.parameters()]) < 1e-5


def test_bilstm_odd_width(rng):
    with pytest.raises(ConfigurationError):
        BiLSTM(3, 5, rng)


def test_bilstm_empty_sequence(rng):
    with pytest.raises(ad.EmptyInputError):
        BiLSTM(3, 4, rng)(Tensor(np.zeros((1, 0, 3))))


# -- layer norm, attention blocks ----------------------------------------------------

def test_layer_norm_statistics(rng):
    ln = LayerNorm(6)
    y = ln(Tensor(rng.normal(3.0, 2.0, size=(4, 6)))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_gradient(rng):
    ln = LayerNorm(5)
    ln.gamma.data[...] = rng.normal(size=5)
    x = Parameter(rng.normal(size=(3, 5)))
    assert grad_check(lambda: weighted(ln(x), np.random.default_rng(2)), [x, *ln.parameters()]) < 1e-5


def test_multi_head_attention_gradient(rng):
    mha = MultiHeadAttention(4, 2, rng)
    x = Parameter(rng.normal(size=(2, 3, 4)))
    mem = Parameter(rng.normal(size=(2, 5, 4)))
    assert grad_check(lambda: weighted(mha(x, mem), np.random.default_rng(4)), [x, mem, *mha.parameters()]) < 1e-5


def test_feed_forward_gradient(rng):
    ffn = FeedForward(4, 16, rng)
    x = Parameter(rng.normal(size=(3, 4)))
    assert grad_check(lambda: weighted(ffn(x), np.random.default_rng(6)), [x, *ffn.parameters()]) < 1e-5


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4, rng)


# -- transformer encoder / decoder ---------------------------------------------------

def test_encoder_permutation_equivariance(rng):
    enc = TransformerEncoder(8, 2, 2, rng)
    O = rng.normal(size=(7, 8))
    perm = rng.permutation(7)
    a = transformer_encode(O, enc).data
    b = transformer_encode(O[perm], enc).data
    np.testing.assert_allclose(b, a[perm], atol=1e-10)


def test_encoder_single_row_attends_to_itself(rng):
    enc = TransformerEncoder(8, 2, 1, rng)
    transformer_encode(rng.normal(size=(1, 8)), enc)
    np.testing.assert_array_equal(enc.layers[0].attn.last_weights, np.ones((1, 2, 1, 1)))


@pytest.mark.parametrize("L", range(1, 13))
def test_encoder_shape(rng, L):
    enc = TransformerEncoder(8, 2, 2, rng)
    assert transformer_encode(rng.normal(size=(L, 8)), enc).shape == (L, 8)


def test_encoder_gradient(rng):
    enc = TransformerEncoder(4, 2, 1, rng)
    O = Parameter(rng.normal(size=(1, 3, 4)))
    assert grad_check(lambda: weighted(enc(O), np.random.default_rng(8)), [O, *enc.parameters()]) < 1e-5


def test_decoder_memory_permutation_invariance(rng):
    dec = TransformerDecoder(8, 2, 2, rng)
    mem, queries, content = rng.normal(size=(6, 8)), rng.normal(size=(3, 8)), rng.normal(size=8)
    a = transformer_decode(mem, queries, content, dec).data
    b = transformer_decode(mem[rng.permutation(6)], queries, content, dec).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_decoder_identical_queries_identical_rows(rng):
    dec = TransformerDecoder(8, 2, 2, rng)
    q = rng.normal(size=(1, 8))
    out = transformer_decode(rng.normal(size=(5, 8)), np.vstack([q, q, rng.normal(size=(1, 8))]),
                             rng.normal(size=8), dec).data
    np.testing.assert_array_equal(out[0], out[1])


def test_decoder_gradient(rng):
    dec = TransformerDecoder(4, 2, 1, rng)
    mem = Parameter(rng.normal(size=(2, 3, 4)))
    queries = Parameter(rng.normal(size=(2, 4)))
    content = Parameter(rng.normal(size=(2, 4)))
    params = [mem, queries, content, *dec.parameters()]
    assert grad_check(lambda: weighted(dec(mem, queries, content), np.random.default_rng(9)), params) < 1e-5


def test_decoder_needs_queries(rng):
    dec = TransformerDecoder(4, 2, 1, rng)
    with pytest.raises(ad.EmptyInputError):
        dec(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((0, 4))))
