"""A1/A2 sequence-to-sequence models: forwards, parameter partition, checkpoints.

A1 couples the decoder LSTM to the attention context (context is an
extra LSTM input, queried with the previous hidden state). A2 runs the
LSTM on tokens alone, attends with the fresh hidden state, and merges
the context additively at the logits, so the token path is a standalone
language model. The LM checkpoint kind ("LM") is that standalone subnet.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tz
from .errors import (CheckpointMagicError, CheckpointShapeError,
                     CheckpointTruncatedError, CheckpointVersionError,
                     ContractError, VocabularyError)
from .layers import (AttentionCache, AttentionParams, EncoderParams,
                     LstmCellParams, LstmRunner, attend_batch, embed_rows,
                     encode_batch)
from .rng import Rng
from .tensor import Tensor

ARCH_A1 = "A1"
ARCH_A2 = "A2"
ARCH_LM = "LM"

SOS_ID = 0
EOS_ID = 1

CHECKPOINT_MAGIC = b"DLM1"
CHECKPOINT_VERSION = 1
_ARCH_TAGS = {ARCH_A1: 1, ARCH_A2: 2, ARCH_LM: 3}
_TAG_ARCHS = {v: k for k, v in _ARCH_TAGS.items()}


@dataclass
class ModelConfig:
    arch: str
    vocab_size: int
    input_dim: int = 0
    enc_units: int = 0
    enc_layers: int = 0
    emb_dim: int = 16
    dec_units: int = 48
    att_dim: int = 24
    att_filters: int = 4
    att_kernel: int = 5
    dtype: object = np.float32

    @property
    def d_h(self) -> int:
        return 2 * self.enc_units


@dataclass
class DecoderState:
    """Per-step decoder state for incremental decoding (plain arrays)."""

    hidden: np.ndarray        # [n, u]
    cell: np.ndarray          # [n, u]
    weights: np.ndarray | None  # [n, T'] previous attention weights
    prev_token: np.ndarray    # [n] int


@dataclass
class ForwardResult:
    log_probs: np.ndarray  # [L, V] for single-utterance calls
    loss: Tensor
    trace: dict | None = None


class Seq2SeqModel:
    """Named-parameter model; names prefixed "decoder." form the LM subnet."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._bind_views()

    def _bind_views(self):
        p = self.params
        c = self.config
        if c.arch != ARCH_LM:
            layers = []
            for i in range(c.enc_layers):
                layers.append(tuple(
                    LstmCellParams(p[f"encoder.l{i}.{d}.w_x"],
                                   p[f"encoder.l{i}.{d}.w_h"],
                                   p[f"encoder.l{i}.{d}.b"])
                    for d in ("fwd", "bwd")))
            self.encoder = EncoderParams(layers)
            self.attention = AttentionParams(
                p["attention.w_q"], p["attention.w_k"], p["attention.w_f"],
                p["attention.filters"], p["attention.v"], p["attention.b"])
        else:
            self.encoder = None
            self.attention = None
        self.embedding = p["decoder.embedding"]
        self.dec_lstm = LstmCellParams(p["decoder.lstm.w_x"],
                                       p["decoder.lstm.w_h"],
                                       p["decoder.lstm.b"])
        self.proj_s_w = p["decoder.proj_s.w"]
        self.proj_s_b = p["decoder.proj_s.b"]
        self.proj_c_w = p.get("proj_c.w")

    @classmethod
    def build(cls, config: ModelConfig, rng: Rng) -> "Seq2SeqModel":
        c = config
        dt = c.dtype
        if c.arch not in (ARCH_A1, ARCH_A2, ARCH_LM):
            raise ContractError(f"unknown architecture {c.arch!r}")
        params: dict[str, Tensor] = {}

        def uni(shape):
            return Tensor(rng.uniform(-0.1, 0.1, shape).astype(dt), requires_grad=True)

        if c.arch != ARCH_LM:
            enc = EncoderParams.init(rng, c.enc_layers, c.enc_units, c.input_dim, dt)
            for i, (fwd, bwd) in enumerate(enc.layers):
                for d, cell in (("fwd", fwd), ("bwd", bwd)):
                    params[f"encoder.l{i}.{d}.w_x"] = cell.w_x
                    params[f"encoder.l{i}.{d}.w_h"] = cell.w_h
                    params[f"encoder.l{i}.{d}.b"] = cell.b
            att = AttentionParams.init(rng, c.att_dim, c.dec_units, c.d_h,
                                       c.att_filters, c.att_kernel, dt)
            params["attention.w_q"] = att.w_q
            params["attention.w_k"] = att.w_k
            params["attention.w_f"] = att.w_f
            params["attention.filters"] = att.filters
            params["attention.v"] = att.v
            params["attention.b"] = att.b
        params["decoder.embedding"] = uni((c.vocab_size, c.emb_dim))
        aux = c.d_h if c.arch == ARCH_A1 else 0
        dec = LstmCellParams.init(rng, c.dec_units, c.emb_dim + aux, dt)
        params["decoder.lstm.w_x"] = dec.w_x
        params["decoder.lstm.w_h"] = dec.w_h
        params["decoder.lstm.b"] = dec.b
        params["decoder.proj_s.w"] = uni((c.vocab_size, c.dec_units))
        params["decoder.proj_s.b"] = uni((c.vocab_size,))
        if c.arch == ARCH_A2:
            params["proj_c.w"] = uni((c.vocab_size, c.d_h))
        return cls(config, params)

    # ---------------------------------------------------------------- helpers

    def _check_targets(self, targets_batch: list[list[int]]) -> None:
        v = self.config.vocab_size
        for toks in targets_batch:
            if len(toks) == 0:
                raise ContractError("empty target sequence")
            if any(t < 0 or t >= v for t in toks):
                bad = next(t for t in toks if t < 0 or t >= v)
                raise VocabularyError(f"token id {bad} outside vocabulary of {v}")
            if toks[-1] != EOS_ID:
                raise ContractError("target sequence must end with <eos>")

    def _teacher_inputs(self, targets_batch: list[list[int]], dtype):
        """Previous-token ids, gold ids, and loss masks per step."""
        batch = len(targets_batch)
        l_max = max(len(t) for t in targets_batch)
        prev = np.full((l_max, batch), EOS_ID, dtype=np.intp)
        gold = np.zeros((l_max, batch), dtype=np.intp)
        mask = np.zeros((l_max, batch), dtype=dtype)
        for b, toks in enumerate(targets_batch):
            prev[0, b] = SOS_ID
            prev[1:len(toks), b] = toks[:-1]
            gold[:len(toks), b] = toks
            mask[:len(toks), b] = 1.0
        return prev, gold, mask, l_max

    def _zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = Tensor(np.zeros((batch, self.config.dec_units), dtype=self.config.dtype))
        return z, z

    # ---------------------------------------------------------------- forwards

    def forward_asr_batch(self, feats: list[np.ndarray],
                          targets_batch: list[list[int]],
                          return_trace: bool = False) -> ForwardResult:
        """Teacher-forced forward; loss is the batch mean of per-utterance
        summed token negative log-probabilities."""
        if self.config.arch == ARCH_LM:
            raise ContractError("an LM-only model has no acoustic forward")
        if len(feats) != len(targets_batch) or not feats:
            raise ContractError("features and targets must pair up non-empty")
        self._check_targets(targets_batch)
        c = self.config
        batch = len(feats)
        prev, gold, mask, l_max = self._teacher_inputs(targets_batch, c.dtype)

        enc = encode_batch(feats, self.encoder, c.dtype)
        att_cache = AttentionCache(enc, self.attention)
        dec_run = LstmRunner(self.dec_lstm)
        proj_sT = tz.transpose(self.proj_s_w)
        proj_cT = tz.transpose(self.proj_c_w) if self.proj_c_w is not None else None

        s, cell = self._zero_state(batch)
        w_prev = att_cache.initial_weights(enc, c.dtype)
        total = None
        steps = []
        trace = {"s": [], "weights": [], "logits_s": [], "log_probs": []} if return_trace else None
        for i in range(l_max):
            emb = embed_rows(self.embedding, prev[i])
            if c.arch == ARCH_A1:
                ctx, w_prev = attend_batch(enc, s, w_prev, att_cache)
                s, cell = dec_run.step(s, cell, tz.concat_cols([emb, ctx]))
                logits_s = tz.add_rowvec(tz.matmul(s, proj_sT), self.proj_s_b)
                logits = logits_s
            else:
                s, cell = dec_run.step(s, cell, emb)
                ctx, w_prev = attend_batch(enc, s, w_prev, att_cache)
                logits_s = tz.add_rowvec(tz.matmul(s, proj_sT), self.proj_s_b)
                logits = tz.add(logits_s, tz.matmul(ctx, proj_cT))
            lp = tz.log_softmax(logits)
            picked = tz.mul(tz.take_per_row(lp, gold[i]), Tensor(mask[i]))
            term = tz.sum_all(picked)
            total = term if total is None else tz.add(total, term)
            steps.append(lp)
            if trace is not None:
                trace["s"].append(s.data.copy())
                trace["weights"].append(w_prev.data.copy())
                trace["logits_s"].append(logits_s.data.copy())
                trace["log_probs"].append(lp.data.copy())
        loss = tz.scale(total, -1.0 / batch)
        log_probs = np.stack([lp.data[0] for lp in steps]) if batch == 1 else None
        return ForwardResult(log_probs=log_probs, loss=loss, trace=trace)

    def forward_asr(self, features: np.ndarray, targets: list[int],
                    return_trace: bool = False) -> ForwardResult:
        return self.forward_asr_batch([features], [targets], return_trace)

    def forward_lm_batch(self, targets_batch: list[list[int]],
                         return_trace: bool = False) -> ForwardResult:
        """Token-only forward through the LM subnet; A1 fixes the context
        input to the zero vector, so no acoustic parameter is touched."""
        if not targets_batch:
            raise ContractError("empty batch")
        self._check_targets(targets_batch)
        c = self.config
        batch = len(targets_batch)
        prev, gold, mask, l_max = self._teacher_inputs(targets_batch, c.dtype)

        dec_run = LstmRunner(self.dec_lstm)
        proj_sT = tz.transpose(self.proj_s_w)
        zero_ctx = (Tensor(np.zeros((batch, c.d_h), dtype=c.dtype))
                    if c.arch == ARCH_A1 else None)

        s, cell = self._zero_state(batch)
        total = None
        steps = []
        trace = {"s": [], "logits_s": [], "log_probs": []} if return_trace else None
        for i in range(l_max):
            emb = embed_rows(self.embedding, prev[i])
            x = tz.concat_cols([emb, zero_ctx]) if zero_ctx is not None else emb
            s, cell = dec_run.step(s, cell, x)
            logits = tz.add_rowvec(tz.matmul(s, proj_sT), self.proj_s_b)
            lp = tz.log_softmax(logits)
            picked = tz.mul(tz.take_per_row(lp, gold[i]), Tensor(mask[i]))
            term = tz.sum_all(picked)
            total = term if total is None else tz.add(total, term)
            steps.append(lp)
            if trace is not None:
                trace["s"].append(s.data.copy())
                trace["logits_s"].append(logits.data.copy())
                trace["log_probs"].append(lp.data.copy())
        loss = tz.scale(total, -1.0 / batch)
        log_probs = np.stack([lp.data[0] for lp in steps]) if batch == 1 else None
        return ForwardResult(log_probs=log_probs, loss=loss, trace=trace)

    def forward_lm(self, targets: list[int], return_trace: bool = False) -> ForwardResult:
        return self.forward_lm_batch([targets], return_trace)

    # ---------------------------------------------------------------- decoding

    def decode_init(self, features: np.ndarray):
        """Encode once for incremental decoding (run outside any tape)."""
        if tz.active_tape() is not None:
            raise ContractError("decode_init must run outside a tape")
        enc = encode_batch([features], self.encoder, self.config.dtype)
        return enc

    def initial_state(self, enc, n: int = 1) -> DecoderState:
        c = self.config
        w = None
        if enc is not None:
            w = np.full((n, enc.t_max), 1.0 / enc.t_max, dtype=c.dtype)
        return DecoderState(
            hidden=np.zeros((n, c.dec_units), dtype=c.dtype),
            cell=np.zeros((n, c.dec_units), dtype=c.dtype),
            weights=w,
            prev_token=np.full(n, SOS_ID, dtype=np.intp),
        )

    def decode_step(self, enc, state: DecoderState) -> tuple[np.ndarray, DecoderState]:
        """Advance all rows of `state` one step; returns log-probs [n, V].

        The encoder output is for one utterance; its rows are tiled across
        the n live rows of the state.
        """
        c = self.config
        n = state.hidden.shape[0]
        tiled = EncoderOutputTile(enc, n)
        cache = AttentionCache(tiled, self.attention)
        dec_run = LstmRunner(self.dec_lstm)
        proj_sT = tz.transpose(self.proj_s_w)

        s = Tensor(state.hidden)
        cell = Tensor(state.cell)
        w_prev = Tensor(state.weights)
        emb = embed_rows(self.embedding, state.prev_token)
        if c.arch == ARCH_A1:
            ctx, w = attend_batch(tiled, s, w_prev, cache)
            s, cell = dec_run.step(s, cell, tz.concat_cols([emb, ctx]))
            logits = tz.add_rowvec(tz.matmul(s, proj_sT), self.proj_s_b)
        else:
            s, cell = dec_run.step(s, cell, emb)
            ctx, w = attend_batch(tiled, s, w_prev, cache)
            logits = tz.add(tz.add_rowvec(tz.matmul(s, proj_sT), self.proj_s_b),
                            tz.matmul(ctx, tz.transpose(self.proj_c_w)))
        lp = tz.log_softmax(logits)
        new_state = DecoderState(hidden=s.data, cell=cell.data, weights=w.data,
                                 prev_token=state.prev_token)
        return lp.data, new_state

    def lm_init(self, n: int = 1) -> DecoderState:
        return self.initial_state(None, n)

    def lm_step(self, state: DecoderState) -> tuple[np.ndarray, DecoderState]:
        """One token-only step (fusion LM scoring and LM decoding)."""
        c = self.config
        dec_run = LstmRunner(self.dec_lstm)
        emb = embed_rows(self.embedding, state.prev_token)
        x = (tz.concat_cols([emb, Tensor(np.zeros((emb.shape[0], c.d_h), dtype=c.dtype))])
             if c.arch == ARCH_A1 else emb)
        s, cell = dec_run.step(Tensor(state.hidden), Tensor(state.cell), x)
        logits = tz.add_rowvec(tz.matmul(s, tz.transpose(self.proj_s_w)), self.proj_s_b)
        lp = tz.log_softmax(logits)
        return lp.data, DecoderState(hidden=s.data, cell=cell.data, weights=None,
                                     prev_token=state.prev_token)


class EncoderOutputTile:
    """View of a single-utterance EncoderOutput replicated over n rows."""

    def __init__(self, enc, n: int):
        if enc.batch != 1:
            raise ContractError("tiling expects a single-utterance encoder output")
        self.t_max = enc.t_max
        self.batch = n
        self.lengths = np.repeat(enc.lengths, n)
        data = np.ascontiguousarray(
            np.broadcast_to(enc.h.data, (n,) + enc.h.data.shape)
            .reshape(n * enc.t_max, enc.h.shape[1]))
        self.h = Tensor(data)

    @property
    def d_h(self) -> int:
        return self.h.shape[1]


def partition_params(model: Seq2SeqModel) -> tuple[set[str], set[str]]:
    """LM-subnet names (embedding, decoder LSTM, output projection) vs. the rest."""
    lm = {name for name in model.params if name.startswith("decoder.")}
    rest = set(model.params) - lm
    return lm, rest


# -------------------------------------------------------------------- storage

def save_checkpoint(model: Seq2SeqModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<B", _ARCH_TAGS[model.config.arch]))
        fh.write(struct.pack("<I", model.config.vocab_size))
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"checkpoint ends inside {what}")
    return buf


def load_checkpoint(path) -> Seq2SeqModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        tag = struct.unpack("<B", _read_exact(fh, 1, "architecture tag"))[0]
        if tag not in _TAG_ARCHS:
            raise CheckpointVersionError(f"unknown architecture tag {tag}")
        arch = _TAG_ARCHS[tag]
        vocab_size = struct.unpack("<I", _read_exact(fh, 4, "vocab size"))[0]
        count = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))[0]
        params: dict[str, Tensor] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, "name length"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank = struct.unpack("<B", _read_exact(fh, 1, "rank"))[0]
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dims"))[0]
                          for _ in range(rank))
            n_items = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * n_items, f"data of {name}")
            data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
            params[name] = Tensor(data, requires_grad=True)
        if fh.read(1):
            raise CheckpointTruncatedError("trailing bytes after declared parameters")
    config = _config_from_params(arch, vocab_size, params)
    return Seq2SeqModel(config, params)


def _require(params: dict, name: str) -> Tensor:
    if name not in params:
        raise CheckpointShapeError(f"missing parameter {name}")
    return params[name]


def _config_from_params(arch: str, vocab_size: int, params: dict) -> ModelConfig:
    emb = _require(params, "decoder.embedding")
    if emb.data.ndim != 2 or emb.shape[0] != vocab_size:
        raise CheckpointShapeError(
            f"embedding shape {emb.shape} inconsistent with vocab {vocab_size}")
    emb_dim = emb.shape[1]
    w_h = _require(params, "decoder.lstm.w_h")
    dec_units = w_h.shape[1]
    w_x = _require(params, "decoder.lstm.w_x")
    if w_x.shape[0] != 4 * dec_units or w_h.shape[0] != 4 * dec_units:
        raise CheckpointShapeError("decoder LSTM gate dimension mismatch")
    aux = w_x.shape[1] - emb_dim
    proj_s = _require(params, "decoder.proj_s.w")
    if proj_s.shape != (vocab_size, dec_units):
        raise CheckpointShapeError(
            f"output projection shape {proj_s.shape} != ({vocab_size}, {dec_units})")

    if arch == ARCH_LM:
        if aux != 0:
            raise CheckpointShapeError("LM checkpoint has a context input")
        return ModelConfig(arch=arch, vocab_size=vocab_size, emb_dim=emb_dim,
                           dec_units=dec_units)

    w_k = _require(params, "attention.w_k")
    att_dim, d_h = w_k.shape
    if d_h % 2:
        raise CheckpointShapeError(f"encoder output size {d_h} is odd")
    filters = _require(params, "attention.filters")
    enc_layers = 0
    while f"encoder.l{enc_layers}.fwd.w_x" in params:
        enc_layers += 1
    if enc_layers == 0:
        raise CheckpointShapeError("no encoder layers stored")
    input_dim = params["encoder.l0.fwd.w_x"].shape[1]
    expected_aux = d_h if arch == ARCH_A1 else 0
    if aux != expected_aux:
        raise CheckpointShapeError(
            f"decoder context input {aux} != {expected_aux} for {arch}")
    if arch == ARCH_A2 and _require(params, "proj_c.w").shape != (vocab_size, d_h):
        raise CheckpointShapeError("context projection shape mismatch")
    return ModelConfig(arch=arch, vocab_size=vocab_size, input_dim=input_dim,
                       enc_units=d_h // 2, enc_layers=enc_layers, emb_dim=emb_dim,
                       dec_units=dec_units, att_dim=att_dim,
                       att_filters=filters.shape[0], att_kernel=filters.shape[1])
