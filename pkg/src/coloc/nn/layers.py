"""LSTM cell and graph-attention layer, batched over graph nodes.

All activations take and return (M, F) tensors whose rows are nodes
(or batch rows). A "vector" is a single-row matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import ParamSet, uniform_init
from .tensor import ShapeError, Tensor


@dataclass
class LstmParams:
    """One-layer LSTM cell. Gate order along columns: input, forget, cell, output."""

    wx: Tensor  # (input_dim, 4*hidden)
    wh: Tensor  # (hidden, 4*hidden)
    b: Tensor  # (1, 4*hidden)
    input_dim: int
    hidden_dim: int


def init_lstm(params: ParamSet, prefix: str, input_dim: int, hidden_dim: int,
              rng: np.random.Generator) -> LstmParams:
    wx = params.add(f"{prefix}.wx", uniform_init(rng, (input_dim, 4 * hidden_dim), input_dim))
    wh = params.add(f"{prefix}.wh", uniform_init(rng, (hidden_dim, 4 * hidden_dim), hidden_dim))
    b = params.add(f"{prefix}.b", np.zeros((1, 4 * hidden_dim)))
    return LstmParams(wx, wh, b, input_dim, hidden_dim)


def lstm_step(params: LstmParams, cell, hidden, inp):
    """One LSTM step. cell/hidden: (M, H); inp: (M, input_dim). Returns (cell, hidden)."""
    cell, hidden, inp = T.as_tensor(cell), T.as_tensor(hidden), T.as_tensor(inp)
    h = params.hidden_dim
    if inp.shape[1] != params.input_dim:
        raise ShapeError(f"lstm input width {inp.shape[1]}, expected {params.input_dim}")
    if cell.shape[1] != h or hidden.shape[1] != h:
        raise ShapeError(f"lstm state width {cell.shape[1]}/{hidden.shape[1]}, expected {h}")
    if not (cell.shape[0] == hidden.shape[0] == inp.shape[0]):
        raise ShapeError("lstm row counts differ between state and input")

    gates = inp @ params.wx + hidden @ params.wh + params.b
    i = T.sigmoid(T.cols(gates, 0, h))
    f = T.sigmoid(T.cols(gates, h, 2 * h))
    g = T.tanh(T.cols(gates, 2 * h, 3 * h))
    o = T.sigmoid(T.cols(gates, 3 * h, 4 * h))
    new_cell = f * cell + i * g
    new_hidden = o * T.tanh(new_cell)
    return new_cell, new_hidden


def lstm_zero_state(params: LstmParams, n_rows: int):
    z = np.zeros((n_rows, params.hidden_dim))
    return Tensor(z), Tensor(z.copy())


@dataclass
class GatParams:
    """One graph-attention layer: shared linear map plus a learned scoring vector."""

    w: Tensor  # (in_dim, out_dim)
    a: Tensor  # (1, 2*out_dim), split into source / destination halves
    in_dim: int
    out_dim: int
    dropout_p: float = 0.1
    leaky_slope: float = field(default=0.2, repr=False)


def init_gat(params: ParamSet, prefix: str, in_dim: int, out_dim: int,
             rng: np.random.Generator, dropout_p: float = 0.1) -> GatParams:
    w = params.add(f"{prefix}.w", uniform_init(rng, (in_dim, out_dim), in_dim))
    a = params.add(f"{prefix}.a", uniform_init(rng, (1, 2 * out_dim), 2 * out_dim))
    return GatParams(w, a, in_dim, out_dim, dropout_p)


def gat_forward(params: GatParams, node_features, adjacency, train_mode=False, rng=None):
    """One attention layer over an adjacency mask.

    node_features: (M, in_dim) tensor; adjacency: (M, M) boolean, self-loops
    included. Returns ((M, out_dim) tensor, (M, M) attention ndarray) where
    each attention row is a probability distribution over the node's
    neighborhood.
    """
    feats = T.as_tensor(node_features)
    m = feats.shape[0]
    adjacency = np.asarray(adjacency, dtype=bool)
    if m == 0:
        return Tensor(np.zeros((0, params.out_dim))), np.zeros((0, 0))
    if adjacency.shape != (m, m):
        raise ShapeError(f"adjacency {adjacency.shape} does not match {m} nodes")
    if feats.shape[1] != params.in_dim:
        raise ShapeError(f"gat input width {feats.shape[1]}, expected {params.in_dim}")
    isolated = ~adjacency.any(axis=1)
    if isolated.any():
        raise ValueError(f"isolated nodes (no neighbors, no self-loop): {np.flatnonzero(isolated).tolist()}")

    h = feats @ params.w  # (M, out)
    a_src = T.transpose(T.cols(params.a, 0, params.out_dim))  # (out, 1)
    a_dst = T.transpose(T.cols(params.a, params.out_dim, 2 * params.out_dim))
    src = h @ a_src  # (M, 1) score contribution of the receiving node
    dst = h @ a_dst  # (M, 1) contribution of each neighbor
    scores = T.leaky_relu(src + T.transpose(dst), params.leaky_slope)  # (M, M)

    # Masked softmax per row; the shift is a constant so gradients are exact.
    mask = adjacency.astype(float)
    shift = T.constant((scores.data * mask).max(axis=1, keepdims=True))
    e = T.exp(scores - shift) * T.constant(mask)
    denom = T.tsum(e, axis=1, keepdims=True)
    att = e / denom

    out = T.relu(att @ h)
    if train_mode and params.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train_mode dropout requires an rng")
        out = T.dropout(out, params.dropout_p, rng, train=True)
    return out, att.data.copy()
