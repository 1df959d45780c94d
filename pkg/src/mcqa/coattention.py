"""Co-attention between two sequences through a rectified soft-alignment matrix.

Given ``u_p`` (T_p×d_p) and ``u_q`` (T_q×d_q), the alignment score of steps i and j
is ``relu(w_p u_p^i) . relu(w_q u_q^j)``.  Row-softmax of the scores lets each
``u_p`` step attend over ``u_q``; column-softmax does the reverse.  All functions
accept a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ParameterStore, Tape, Tensor


@dataclass
class CoAttentionParams:
    w_p: Tensor  # (d_att, d_p)
    w_q: Tensor  # (d_att, d_q)

    @property
    def d_att(self) -> int:
        return self.w_p.shape[0]


def init_coattention(store: ParameterStore, prefix: str, d_p: int, d_q: int, d_att: int,
                     rng: np.random.Generator) -> None:
    store.add(f"{prefix}.w_p", rng.uniform(-1, 1, size=(d_att, d_p)) / np.sqrt(d_p))
    store.add(f"{prefix}.w_q", rng.uniform(-1, 1, size=(d_att, d_q)) / np.sqrt(d_q))


def bind_coattention(store: ParameterStore, prefix: str, tape: Tape | None = None) -> CoAttentionParams:
    get = (lambda n: tape.watch(store, n)) if tape is not None else (lambda n: Tensor(store.value(n)))
    return CoAttentionParams(get(f"{prefix}.w_p"), get(f"{prefix}.w_q"))


def alignment_matrix(u_p: Tensor, u_q: Tensor, params: CoAttentionParams) -> Tensor:
    """Nonnegative T_p×T_q similarity scores."""
    if u_p.shape[-1] != params.w_p.shape[1] or u_q.shape[-1] != params.w_q.shape[1]:
        raise tc.ShapeError(
            f"alignment_matrix: inputs {u_p.shape}, {u_q.shape} do not fit "
            f"w_p {params.w_p.shape}, w_q {params.w_q.shape}")
    if params.w_p.shape[0] != params.w_q.shape[0]:
        raise tc.ShapeError("alignment_matrix: w_p and w_q disagree on the attention width")
    proj_p = tc.relu(tc.matmul(u_p, tc.transpose(params.w_p)))
    proj_q = tc.relu(tc.matmul(u_q, tc.transpose(params.w_q)))
    return tc.matmul(proj_p, tc.transpose(proj_q))


def _full_mask(t: Tensor) -> np.ndarray:
    return np.ones(t.shape[:-1], dtype=bool)


def attend(S: Tensor, u_p: Tensor, u_q: Tensor, mask_p: np.ndarray | None = None,
           mask_q: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Attended sequences ``(û_p, û_q)`` of shapes T_p×d_q and T_q×d_p.

    Masked key positions get zero weight; rows of û_p (û_q) at masked positions of
    u_p (u_q) are zero.
    """
    mask_p = _full_mask(u_p) if mask_p is None else np.asarray(mask_p, dtype=bool)
    mask_q = _full_mask(u_q) if mask_q is None else np.asarray(mask_q, dtype=bool)
    if S.shape[-2:] != (u_p.shape[-2], u_q.shape[-2]):
        raise tc.ShapeError(f"attend: S {S.shape} vs u_p {u_p.shape}, u_q {u_q.shape}")
    if not (np.all(mask_p.any(axis=-1)) and np.all(mask_q.any(axis=-1))):
        raise ValueError("attend: a sequence has no valid positions (degenerate sample)")
    row_w = tc.softmax_axis(S, "rows", mask_q[..., None, :])
    col_w = tc.softmax_axis(S, "cols", mask_p[..., :, None])
    u_p_hat = tc.mask_rows(tc.matmul(row_w, u_q), mask_p)
    u_q_hat = tc.mask_rows(tc.matmul(tc.transpose(col_w), u_p), mask_q)
    return u_p_hat, u_q_hat


def attention_weights(S: Tensor, mask_p=None, mask_q=None) -> tuple[np.ndarray, np.ndarray]:
    """Row- and column-normalised weights as plain arrays (for inspection)."""
    shape = S.shape
    mask_p = np.ones(shape[:-1], bool) if mask_p is None else np.asarray(mask_p, bool)
    mask_q = np.ones(shape[:-2] + shape[-1:], bool) if mask_q is None else np.asarray(mask_q, bool)
    rows = tc.softmax_axis(Tensor(S.data), "rows", mask_q[..., None, :]).data
    cols = tc.softmax_axis(Tensor(S.data), "cols", mask_p[..., :, None]).data
    return rows, cols


def coattend(u_p: Tensor, u_q: Tensor, params: CoAttentionParams, mask_p: np.ndarray | None = None,
             mask_q: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """``[û_p ; û_q]`` row by row, plus the combined mask (valid in both inputs)."""
    if u_p.shape[-2] != u_q.shape[-2]:
        raise tc.ShapeError(f"coattend: sequence lengths differ, {u_p.shape} vs {u_q.shape}")
    mask_p = _full_mask(u_p) if mask_p is None else np.asarray(mask_p, dtype=bool)
    mask_q = _full_mask(u_q) if mask_q is None else np.asarray(mask_q, dtype=bool)
    S = alignment_matrix(u_p, u_q, params)
    u_p_hat, u_q_hat = attend(S, u_p, u_q, mask_p, mask_q)
    return tc.concat_features([u_p_hat, u_q_hat]), mask_p & mask_q
