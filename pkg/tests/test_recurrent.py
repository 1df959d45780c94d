import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcqa import tensor as tc
from mcqa.recurrent import (BiLstmParams, LstmParams, bind_bilstm, encode_bidirectional, init_bilstm,
                            lstm_step, mask_aware_encode, run_lstm)
from mcqa.tensor import ParameterStore, Tape, Tensor


def lstm_params(rng, d_in, hid, scale=0.5):
    return LstmParams(Tensor(rng.uniform(-scale, scale, size=(4 * hid, d_in))),
                      Tensor(rng.uniform(-scale, scale, size=(4 * hid, hid))),
                      Tensor(rng.uniform(-scale, scale, size=4 * hid)))


def bilstm(rng, d_in, hid):
    return BiLstmParams(lstm_params(rng, d_in, hid), lstm_params(rng, d_in, hid))


def zeros_lstm(d_in, hid):
    return LstmParams(Tensor(np.zeros((4 * hid, d_in))), Tensor(np.zeros((4 * hid, hid))), Tensor(np.zeros(4 * hid)))


def straight_line_step(x, h, c, p: LstmParams):
    """The four gate equations written out with separate per-gate matrices."""
    hid = p.hidden
    W, U, b = p.W.data, p.U.data, p.b.data
    Wi, Wf, Wg, Wo = (W[k * hid:(k + 1) * hid] for k in range(4))
    Ui, Uf, Ug, Uo = (U[k * hid:(k + 1) * hid] for k in range(4))
    bi, bf, bg, bo = (b[k * hid:(k + 1) * hid] for k in range(4))

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    i = sig(Wi @ x + Ui @ h + bi)
    f = sig(Wf @ x + Uf @ h + bf)
    g = np.tanh(Wg @ x + Ug @ h + bg)
    o = sig(Wo @ x + Uo @ h + bo)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def straight_line_scan(seq, p, reverse=False):
    hid = p.hidden
    h, c = np.zeros(hid), np.zeros(hid)
    out = np.zeros((len(seq), hid))
    order = range(len(seq) - 1, -1, -1) if reverse else range(len(seq))
    for t in order:
        h, c = straight_line_step(seq[t], h, c, p)
        out[t] = h
    return out


def test_zero_params_step():
    p = zeros_lstm(3, 2)
    h, c = lstm_step(Tensor(np.ones(3)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), p)
    assert h.data.tolist() == [0.0, 0.0] and c.data.tolist() == [0.0, 0.0]


def test_saturated_forget_gate_carries_cell():
    p = zeros_lstm(2, 3)
    p.b.data[3:6] = 20.0
    v = np.array([0.7, -1.3, 2.0])
    _, c = lstm_step(Tensor(np.array([0.4, -0.2])), Tensor(np.zeros(3)), Tensor(v), p)
    np.testing.assert_allclose(c.data, v / (1.0 + np.exp(-20.0)), rtol=0, atol=1e-15)


def test_step_matches_straight_line_oracle(rng):
    p = lstm_params(rng, 4, 3)
    x, h, c = rng.normal(size=4), rng.normal(size=3), rng.normal(size=3)
    h1, c1 = lstm_step(Tensor(x), Tensor(h), Tensor(c), p)
    h2, c2 = straight_line_step(x, h, c, p)
    np.testing.assert_allclose(h1.data, h2, atol=1e-12)
    np.testing.assert_allclose(c1.data, c2, atol=1e-12)


def test_step_shape_mismatch(rng):
    p = lstm_params(rng, 4, 3)
    with pytest.raises(tc.ShapeError):
        lstm_step(Tensor(np.ones(5)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), p)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_scan_matches_oracle_and_composed_cell(rng, reverse):
    p = lstm_params(rng, 3, 4)
    seq = rng.normal(size=(6, 3))
    fused = run_lstm(Tensor(seq), p, reverse=reverse).data
    np.testing.assert_allclose(fused, straight_line_scan(seq, p, reverse), atol=1e-12)
    h, c = Tensor(np.zeros(4)), Tensor(np.zeros(4))
    order = range(5, -1, -1) if reverse else range(6)
    for t in order:
        h, c = lstm_step(Tensor(seq[t]), h, c, p)
        np.testing.assert_allclose(fused[t], h.data, atol=1e-12)


def test_fused_scan_gradients_match_composed_cell(rng):
    store = ParameterStore()
    init_bilstm(store, "e", 3, 2, rng)
    seq = rng.normal(size=(4, 3))
    weights = rng.normal(size=(4, 2))

    def composed(tape):
        p = bind_bilstm(store, "e", tape).fwd
        h, c = Tensor(np.zeros(2)), Tensor(np.zeros(2))
        total = None
        for t in range(4):
            h, c = lstm_step(Tensor(seq[t]), h, c, p)
            term = tc.dot(h, Tensor(weights[t]))
            total = term if total is None else tc.add(total, term)
        return total

    store.zero_grad()
    tc.backward(composed(Tape()), store)
    ref = {n: store.grad(n).copy() for n in store.names()}
    store.zero_grad()
    tape = Tape()
    out = run_lstm(Tensor(seq), bind_bilstm(store, "e", tape).fwd)
    tc.backward(tc.sum_all(tc.mul(out, Tensor(weights))), store)
    for n in ("e.fwd.W", "e.fwd.U", "e.fwd.b"):
        np.testing.assert_allclose(store.grad(n), ref[n], atol=1e-13)


def test_bidirectional_single_step_halves_equal(rng):
    p = lstm_params(rng, 3, 2)
    out = encode_bidirectional(Tensor(rng.normal(size=(1, 3))), BiLstmParams(p, p)).data
    np.testing.assert_array_equal(out[0, :2], out[0, 2:])


@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.integers(1, 5))
@settings(max_examples=25, deadline=None, derandomize=True)
def test_zero_params_encode_to_zero(seed, steps, d_in):
    rng = np.random.default_rng(seed)
    out = encode_bidirectional(Tensor(rng.normal(size=(steps, d_in)) * 10), BiLstmParams(zeros_lstm(d_in, 3),
                                                                                         zeros_lstm(d_in, 3)))
    assert out.shape == (steps, 6)
    assert not np.any(out.data)


def test_reversal_swaps_and_reverses_halves(rng):
    p = bilstm(rng, 2, 3)
    seq = rng.normal(size=(3, 2))
    a = encode_bidirectional(Tensor(seq), p).data
    b = encode_bidirectional(Tensor(seq[::-1].copy()), BiLstmParams(p.bwd, p.fwd)).data
    for t in range(3):
        np.testing.assert_allclose(b[t], np.concatenate([a[2 - t, 3:], a[2 - t, :3]]), atol=1e-15)


def test_empty_sequence_rejected(rng):
    with pytest.raises(ValueError):
        encode_bidirectional(Tensor(np.zeros((0, 2))), bilstm(rng, 2, 3))


def test_mask_aware_full_length_is_plain_encoding(rng):
    p = bilstm(rng, 3, 2)
    seq = Tensor(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(mask_aware_encode(seq, 5, p).data, encode_bidirectional(seq, p).data)


def test_mask_aware_padding_rows_zero_and_prefix_matches_truncation(rng):
    p = bilstm(rng, 3, 2)
    seq = rng.normal(size=(6, 3))
    out = mask_aware_encode(Tensor(seq), 4, p).data
    assert not np.any(out[4:])
    np.testing.assert_allclose(out[:4], encode_bidirectional(Tensor(seq[:4]), p).data, atol=1e-15)


def test_mask_aware_rejects_zero_length(rng):
    with pytest.raises(ValueError):
        mask_aware_encode(Tensor(np.zeros((3, 2))), 0, bilstm(rng, 2, 2))
    with pytest.raises(ValueError):
        mask_aware_encode(Tensor(np.zeros((3, 2))), 4, bilstm(rng, 2, 2))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 5))
@settings(max_examples=50, deadline=None, derandomize=True)
def test_padding_invariance(seed, steps, pad):
    rng = np.random.default_rng(seed)
    p = bilstm(rng, 3, 2)
    seq = rng.normal(size=(steps, 3))
    padded = np.vstack([seq, rng.normal(size=(pad, 3))])  # padding content must not matter
    a = mask_aware_encode(Tensor(padded), steps, p).data
    b = encode_bidirectional(Tensor(seq), p).data
    np.testing.assert_allclose(a[:steps], b, atol=1e-12)
    assert not np.any(a[steps:])


def test_batched_masked_encoding_matches_per_row(rng):
    p = bilstm(rng, 3, 2)
    seqs = rng.normal(size=(4, 5, 3))
    lens = np.array([5, 1, 3, 4])
    batched = mask_aware_encode(Tensor(seqs), lens, p).data
    for k in range(4):
        np.testing.assert_allclose(batched[k], mask_aware_encode(Tensor(seqs[k]), int(lens[k]), p).data,
                                   atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 4), st.integers(1, 3), st.booleans())
@settings(max_examples=30, deadline=None, derandomize=True)
def test_encoder_gradients_match_finite_differences(seed, steps, d_in, hid, ragged):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    init_bilstm(store, "e", d_in, hid, rng)
    seq = rng.uniform(-2, 2, size=(steps, d_in))
    weights = rng.uniform(0.5, 1.5, size=(steps, 2 * hid))
    valid = int(rng.integers(1, steps + 1)) if ragged else steps

    def f(s):
        out = mask_aware_encode(Tensor(seq), valid, bind_bilstm(s, "e", Tape()))
        return tc.sum_all(tc.mul(out, Tensor(weights)))

    grads = tc.finite_difference_gradients(f, store, eps=1e-5)
    for name, (a, n) in grads.items():
        assert tc.relative_errors(a, n).max() <= 1e-4, name


def test_init_forget_bias_is_one(rng):
    store = ParameterStore()
    init_bilstm(store, "e", 3, 2, rng)
    assert store.value("e.fwd.b").tolist() == [0, 0, 1, 1, 0, 0, 0, 0]
    assert np.all(np.abs(store.value("e.bwd.W")) <= 1 / np.sqrt(2))
