"""Neural building blocks: embedding, LSTM cell, BLSTM encoder, location-aware attention.

Batched code works on [B, d] matrices with batch items as rows; encoder
outputs use a (b, t)-flattened [B*T', d_h] layout so attention runs as a
handful of matrix ops per decoding step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import DataError, DimensionError, VocabularyError
from .rng import Rng
from .tensor import Tensor

INIT_RANGE = 0.1


def _uniform_param(rng: Rng, shape, dtype) -> Tensor:
    data = rng.uniform(-INIT_RANGE, INIT_RANGE, shape).astype(dtype)
    return Tensor(data, requires_grad=True)


@dataclass
class LstmCellParams:
    """Gate order is (input, forget, cell, output) along the 4u axis."""

    w_x: Tensor  # [4u, input_size]
    w_h: Tensor  # [4u, u]
    b: Tensor    # [4u]

    @property
    def units(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def init(cls, rng: Rng, units: int, input_size: int, dtype=np.float32) -> "LstmCellParams":
        w_x = _uniform_param(rng, (4 * units, input_size), dtype)
        w_h = _uniform_param(rng, (4 * units, units), dtype)
        b = _uniform_param(rng, (4 * units,), dtype)
        b.data[units:2 * units] = 1.0  # forget-gate bias
        return cls(w_x, w_h, b)


def _lstm_gates_step(h, c, gx, w_hT, units):
    """One recurrence step from precomputed input gates gx = x@w_x.T + b."""
    gates = tz.add(gx, tz.matmul(h, w_hT))
    gate_if = tz.sigmoid(tz.slice_cols(gates, 0, 2 * units))
    gate_i = tz.slice_cols(gate_if, 0, units)
    gate_f = tz.slice_cols(gate_if, units, 2 * units)
    cand = tz.tanh(tz.slice_cols(gates, 2 * units, 3 * units))
    gate_o = tz.sigmoid(tz.slice_cols(gates, 3 * units, 4 * units))
    c_new = tz.add(tz.mul(gate_f, c), tz.mul(gate_i, cand))
    h_new = tz.mul(gate_o, tz.tanh(c_new))
    return h_new, c_new


class LstmRunner:
    """Caches the transposed weights of one cell for repeated stepping."""

    def __init__(self, params: LstmCellParams):
        self.params = params
        self.w_xT = tz.transpose(params.w_x)
        self.w_hT = tz.transpose(params.w_h)
        self.units = params.units

    def input_gates(self, x: Tensor) -> Tensor:
        return tz.add_rowvec(tz.matmul(x, self.w_xT), self.params.b)

    def step(self, h: Tensor, c: Tensor, x: Tensor):
        return _lstm_gates_step(h, c, self.input_gates(x), self.w_hT, self.units)

    def step_pre(self, h: Tensor, c: Tensor, gx: Tensor):
        return _lstm_gates_step(h, c, gx, self.w_hT, self.units)


def lstm_step(state, x: Tensor, params: LstmCellParams):
    """Single LSTM step; state and input may be vectors or row batches."""
    h, c = state
    if x.data.ndim == 1:
        if x.shape[0] != params.input_size:
            raise DimensionError(
                f"lstm_step: input size {x.shape[0]} != declared {params.input_size}")
        h2 = tz.reshape(h, (1, params.units))
        c2 = tz.reshape(c, (1, params.units))
        x2 = tz.reshape(x, (1, x.shape[0]))
        h_new, c_new = LstmRunner(params).step(h2, c2, x2)
        return tz.reshape(h_new, (params.units,)), tz.reshape(c_new, (params.units,))
    if x.shape[1] != params.input_size:
        raise DimensionError(
            f"lstm_step: input size {x.shape[1]} != declared {params.input_size}")
    return LstmRunner(params).step(h, c, x)


def embed(table: Tensor, token_id: int) -> Tensor:
    """Row lookup for a single token; gradient reaches only that row."""
    if not 0 <= token_id < table.shape[0]:
        raise VocabularyError(f"token id {token_id} outside vocabulary of {table.shape[0]}")
    return tz.reshape(tz.gather_rows(table, [token_id]), (table.shape[1],))


def embed_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(
            f"token id {int(ids.max())} outside vocabulary of {table.shape[0]}")
    return tz.gather_rows(table, ids)


@dataclass
class EncoderParams:
    """Stack of bidirectional LSTM layers; 2x frame decimation after each
    of the first two layers shortens T to ceil(T/4) under the default depth."""

    layers: list  # [(forward LstmCellParams, backward LstmCellParams), ...]

    @property
    def output_size(self) -> int:
        return 2 * self.layers[0][0].units

    @classmethod
    def init(cls, rng: Rng, num_layers: int, units: int, input_size: int,
             dtype=np.float32) -> "EncoderParams":
        layers = []
        in_size = input_size
        for _ in range(num_layers):
            fwd = LstmCellParams.init(rng, units, in_size, dtype)
            bwd = LstmCellParams.init(rng, units, in_size, dtype)
            layers.append((fwd, bwd))
            in_size = 2 * units
        return cls(layers)


@dataclass
class EncoderOutput:
    h: Tensor              # [B*T'_max, d_h], (b, t)-flattened
    lengths: np.ndarray    # true T' per batch item
    t_max: int
    batch: int

    @property
    def d_h(self) -> int:
        return self.h.shape[1]


def _run_direction(runner: LstmRunner, gx_all: Tensor, t_max: int, batch: int,
                   lengths: np.ndarray, reverse: bool, dtype):
    """Unroll one direction over a (t, b)-flattened gate sequence.

    In reverse, state is zeroed through trailing padding so each item
    starts its backward pass at its own final frame.
    """
    units = runner.units
    zero = Tensor(np.zeros((batch, units), dtype=dtype))
    h, c = zero, zero
    min_len = int(lengths.min())
    steps = range(t_max - 1, -1, -1) if reverse else range(t_max)
    outs: list = [None] * t_max
    for t in steps:
        gx = tz.slice_rows(gx_all, t * batch, (t + 1) * batch)
        h, c = runner.step_pre(h, c, gx)
        if reverse and t >= min_len:
            keep = Tensor(np.repeat((t < lengths)[:, None], units,
                                    axis=1).astype(dtype))
            h = tz.mul(h, keep)
            c = tz.mul(c, keep)
        outs[t] = h
    return outs


def encode_batch(feats: list[np.ndarray], params: EncoderParams,
                 dtype=np.float32) -> EncoderOutput:
    """Encode padded feature batches into the flattened h layout."""
    batch = len(feats)
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    if int(lengths.min()) < 4:
        raise DataError(f"input too short: {int(lengths.min())} frames, need >= 4")
    t_max = int(lengths.max())
    d_in = feats[0].shape[1]
    stacked = np.zeros((t_max * batch, d_in), dtype=dtype)
    for b, f in enumerate(feats):
        if f.shape[1] != d_in:
            raise DimensionError(f"feature dim {f.shape[1]} != {d_in} in one batch")
        stacked[np.arange(f.shape[0]) * batch + b] = f
    seq = Tensor(stacked)

    for layer_idx, (fwd, bwd) in enumerate(params.layers):
        run_f, run_b = LstmRunner(fwd), LstmRunner(bwd)
        gx_f = run_f.input_gates(seq)
        gx_b = run_b.input_gates(seq)
        outs_f = _run_direction(run_f, gx_f, t_max, batch, lengths, False, dtype)
        outs_b = _run_direction(run_b, gx_b, t_max, batch, lengths, True, dtype)
        seq = tz.concat_rows([tz.concat_cols([outs_f[t], outs_b[t]])
                              for t in range(t_max)])
        if layer_idx < 2:
            keep_t = np.arange(0, t_max, 2)
            row_idx = (keep_t[:, None] * batch + np.arange(batch)[None, :]).ravel()
            seq = tz.gather_rows(seq, row_idx)
            t_max = len(keep_t)
            lengths = (lengths + 1) // 2

    # reorder from (t, b) to (b, t) rows
    perm = (np.arange(batch)[:, None] + np.arange(t_max)[None, :] * batch).ravel()
    h = tz.gather_rows(seq, perm)
    return EncoderOutput(h=h, lengths=lengths, t_max=t_max, batch=batch)


def encode(features, params: EncoderParams, dtype=np.float32) -> EncoderOutput:
    """Single-utterance encode; h is [T', d_h]."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=dtype)
    return encode_batch([data], params, dtype)


@dataclass
class AttentionParams:
    w_q: Tensor      # [d_a, u]
    w_k: Tensor      # [d_a, d_h]
    w_f: Tensor      # [d_a, K]
    filters: Tensor  # [K, w], w odd
    v: Tensor        # [d_a]
    b: Tensor        # [d_a]

    @classmethod
    def init(cls, rng: Rng, att_dim: int, query_size: int, key_size: int,
             num_filters: int, kernel: int, dtype=np.float32) -> "AttentionParams":
        return cls(
            w_q=_uniform_param(rng, (att_dim, query_size), dtype),
            w_k=_uniform_param(rng, (att_dim, key_size), dtype),
            w_f=_uniform_param(rng, (att_dim, num_filters), dtype),
            filters=_uniform_param(rng, (num_filters, kernel), dtype),
            v=_uniform_param(rng, (att_dim,), dtype),
            b=_uniform_param(rng, (att_dim,), dtype),
        )


class AttentionCache:
    """Per-batch precomputations shared by every decoding step."""

    def __init__(self, enc: EncoderOutput, params: AttentionParams):
        self.params = params
        self.w_qT = tz.transpose(params.w_q)
        self.w_fT = tz.transpose(params.w_f)
        self.v_col = tz.reshape(params.v, (params.v.shape[0], 1))
        self.keys = tz.matmul(enc.h, tz.transpose(params.w_k))
        self.tile_idx = np.repeat(np.arange(enc.batch), enc.t_max)
        self.mask = (np.arange(enc.t_max)[None, :] < enc.lengths[:, None])

    def initial_weights(self, enc: EncoderOutput, dtype=np.float32) -> Tensor:
        """Uniform distribution over each item's true source length."""
        w = self.mask.astype(dtype) / enc.lengths[:, None].astype(dtype)
        return Tensor(w)


def attend_batch(enc: EncoderOutput, query: Tensor, prev_weights: Tensor,
                 cache: AttentionCache):
    """Location-aware attention over the encoded batch.

    Energies are v . tanh(Wq q + Wk h_t + Wf f_t + b) with f the
    convolution of the previous step's alignment; padding is masked out
    of the softmax.
    """
    if prev_weights.shape != (enc.batch, enc.t_max):
        raise DimensionError(
            f"attention weights {prev_weights.shape} do not match source "
            f"({enc.batch}, {enc.t_max})")
    p = cache.params
    q_rows = tz.gather_rows(tz.matmul(query, cache.w_qT), cache.tile_idx)
    loc = tz.conv1d_same(prev_weights, p.filters)
    loc_rows = tz.reshape(loc, (enc.batch * enc.t_max, p.filters.shape[0]))
    pre = tz.add(tz.add(q_rows, cache.keys), tz.matmul(loc_rows, cache.w_fT))
    energies = tz.matmul(tz.tanh(tz.add_rowvec(pre, p.b)), cache.v_col)
    scores = tz.reshape(energies, (enc.batch, enc.t_max))
    weights = tz.softmax(scores, mask=cache.mask)
    context = tz.weighted_sum_rows(weights, enc.h)
    return context, weights


def attend(enc: EncoderOutput, query: Tensor, prev_weights: Tensor,
           params: AttentionParams):
    """Single-utterance attention: query [u], prev_weights [T'] -> ([d_h], [T'])."""
    if enc.batch != 1:
        raise DimensionError("attend expects a single-utterance EncoderOutput")
    if prev_weights.shape != (enc.t_max,):
        raise DimensionError(
            f"prev_weights length {prev_weights.shape} != source length {enc.t_max}")
    cache = AttentionCache(enc, params)
    ctx, w = attend_batch(enc, tz.reshape(query, (1, query.shape[0])),
                          tz.reshape(prev_weights, (1, enc.t_max)), cache)
    return tz.reshape(ctx, (enc.d_h,)), tz.reshape(w, (enc.t_max,))
