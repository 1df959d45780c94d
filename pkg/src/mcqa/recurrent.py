"""LSTM cell and bidirectional sequence encoders that keep every timestep's output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ParameterStore, Tape, Tensor


@dataclass
class LstmParams:
    """Gate weights stacked in blocks of ``h`` rows: input, forget, candidate, output."""

    W: Tensor  # (4h, d_in)
    U: Tensor  # (4h, h)
    b: Tensor  # (4h,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]


@dataclass
class BiLstmParams:
    fwd: LstmParams
    bwd: LstmParams

    @property
    def hidden(self) -> int:
        return self.fwd.hidden


def init_lstm(store: ParameterStore, prefix: str, d_in: int, hidden: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(hidden)
    store.add(f"{prefix}.W", rng.uniform(-bound, bound, size=(4 * hidden, d_in)))
    store.add(f"{prefix}.U", rng.uniform(-bound, bound, size=(4 * hidden, hidden)))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    store.add(f"{prefix}.b", b)


def init_bilstm(store: ParameterStore, prefix: str, d_in: int, hidden: int, rng: np.random.Generator) -> None:
    init_lstm(store, f"{prefix}.fwd", d_in, hidden, rng)
    init_lstm(store, f"{prefix}.bwd", d_in, hidden, rng)


def _get(store, tape, name):
    return tape.watch(store, name) if tape is not None else Tensor(store.value(name))


def bind_lstm(store: ParameterStore, prefix: str, tape: Tape | None = None) -> LstmParams:
    return LstmParams(*(_get(store, tape, f"{prefix}.{k}") for k in ("W", "U", "b")))


def bind_bilstm(store: ParameterStore, prefix: str, tape: Tape | None = None) -> BiLstmParams:
    return BiLstmParams(bind_lstm(store, f"{prefix}.fwd", tape), bind_lstm(store, f"{prefix}.bwd", tape))


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step for a single example, composed from elementary tensor operations."""
    hid = params.hidden
    if x_t.shape != (params.d_in,) or h_prev.shape != (hid,) or c_prev.shape != (hid,):
        raise tc.ShapeError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"do not fit d_in={params.d_in}, h={hid}")
    pre = tc.add(tc.add(tc.matmul(params.W, x_t), tc.matmul(params.U, h_prev)), params.b)
    stacked = tc.transpose(tc.reshape(pre, (4, hid)))
    # gate k is column k of the (h, 4) view, picked with a one-hot selector
    gates = [tc.matmul(stacked, Tensor(np.eye(4)[k])) for k in range(4)]
    i = tc.sigmoid(gates[0])
    f = tc.sigmoid(gates[1])
    g = tc.tanh(gates[2])
    o = tc.sigmoid(gates[3])
    c_t = tc.add(tc.mul(f, c_prev), tc.mul(i, g))
    h_t = tc.mul(o, tc.tanh(c_t))
    return h_t, c_t


def run_lstm(seq: Tensor, params: LstmParams, mask=None, reverse: bool = False) -> Tensor:
    return tc.lstm_scan(seq, params.W, params.U, params.b, mask=mask, reverse=reverse)


def encode_bidirectional(seq: Tensor, params: BiLstmParams) -> Tensor:
    """All T outputs, row t = [forward h_t ; backward h_t], both scans from zero state."""
    if seq.shape[-2] < 1:
        raise ValueError("encode_bidirectional: empty sequence")
    return tc.concat_features([run_lstm(seq, params.fwd), run_lstm(seq, params.bwd, reverse=True)])


def valid_mask(valid_len, steps: int) -> np.ndarray:
    """Boolean mask with the first ``valid_len`` positions set (per batch row if an array)."""
    lens = np.asarray(valid_len)
    if np.any(lens < 1):
        raise ValueError("valid length must be at least 1")
    if np.any(lens > steps):
        raise ValueError(f"valid length exceeds sequence length {steps}")
    return np.arange(steps) < lens[..., None]


def mask_aware_encode(seq: Tensor, valid_len, params: BiLstmParams) -> Tensor:
    """Bidirectional encoding of a zero-padded sequence; padded rows come out exactly zero.

    ``valid_len`` is an int, or one int per batch row for a batched ``seq``.
    """
    steps = seq.shape[-2]
    mask = valid_mask(valid_len, steps)
    return encode_masked(seq, mask, params)


def encode_masked(seq: Tensor, mask: np.ndarray, params: BiLstmParams) -> Tensor:
    if not np.all(mask.any(axis=-1)):
        raise ValueError("mask_aware_encode: a sequence has no valid positions")
    return tc.concat_features([
        run_lstm(seq, params.fwd, mask=mask),
        run_lstm(seq, params.bwd, mask=mask, reverse=True),
    ])
