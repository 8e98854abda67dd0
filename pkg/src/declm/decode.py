"""Beam-search decoding, shallow fusion with an external LM, CER/WER scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import make_batches
from .errors import CompatibilityError, ConfigError, ContractError
from .model import (ARCH_LM, EOS_ID, ModelConfig, Seq2SeqModel)
from .rng import Rng
from .training import (AdaDelta, AdaDeltaConfig, evaluate_lm, run_epoch_lm)

# ----------------------------------------------------------------- beam search


@dataclass
class FusionConfig:
    """Shallow-fusion settings; beta = 0 reduces scoring to the model alone."""

    lm_model: Seq2SeqModel | None = None
    beta: float = 0.3
    max_len_ratio: float = 2.0
    length_norm: bool = False
    coverage_penalty: float = 0.0

    def validate(self, model: Seq2SeqModel) -> None:
        if self.beta < 0.0:
            raise ConfigError(f"fusion weight must be >= 0, got {self.beta}")
        if self.lm_model is not None:
            if self.lm_model.config.vocab_size != model.config.vocab_size:
                raise CompatibilityError(
                    f"fusion LM vocabulary {self.lm_model.config.vocab_size} != "
                    f"model vocabulary {model.config.vocab_size}")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    model_score: float
    lm_score: float

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS_ID

    def total(self, beta: float) -> float:
        return self.model_score + beta * self.lm_score


@dataclass
class DecodeResult:
    best: tuple[int, ...]          # best token sequence, <eos> stripped
    nbest: list[Hypothesis] = field(default_factory=list)
    beta: float = 0.0

    def ranked(self) -> list[tuple[tuple[int, ...], float, float, float]]:
        return [(h.tokens, h.total(self.beta), h.model_score, h.lm_score)
                for h in self.nbest]


def _strip_eos(tokens: tuple[int, ...]) -> tuple[int, ...]:
    return tokens[:-1] if tokens and tokens[-1] == EOS_ID else tokens


def beam_search(model: Seq2SeqModel, features: np.ndarray, beam_width: int,
                fusion: FusionConfig | None = None) -> DecodeResult:
    """Width-limited best-first search over output sequences.

    Per step every live hypothesis expands over the whole vocabulary with
    score = model log-prob + beta * fusion-LM log-prob; the top `beam_width`
    candidates survive. Emitting <eos> finishes a hypothesis; reaching the
    maximum length (max_len_ratio * T') terminates it as-is. The search
    stops once no live hypothesis can beat the best terminated one (token
    scores are never positive, so prefix scores only decrease).
    """
    if beam_width < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam_width}")
    fusion = fusion or FusionConfig(lm_model=None, beta=0.0)
    fusion.validate(model)
    lm = fusion.lm_model
    beta = fusion.beta
    vocab = model.config.vocab_size

    enc = model.decode_init(features)
    max_len = max(1, int(fusion.max_len_ratio * enc.t_max))

    live = [Hypothesis(tokens=(), model_score=0.0, lm_score=0.0)]
    state = model.initial_state(enc, 1)
    lm_state = lm.lm_init(1) if lm is not None else None
    terminated: list[Hypothesis] = []

    def final_key(h: Hypothesis) -> float:
        score = h.total(beta)
        if fusion.length_norm and h.tokens:
            score /= len(h.tokens)
        return score

    while live:
        logp, new_state = model.decode_step(enc, state)
        if lm is not None:
            lm_logp, new_lm_state = lm.lm_step(lm_state)
        else:
            lm_logp, new_lm_state = None, None

        totals = np.array([h.total(beta) for h in live], dtype=np.float64)
        scores = totals[:, None] + logp.astype(np.float64)
        if lm is not None and beta != 0.0:
            scores = scores + beta * lm_logp.astype(np.float64)
        flat = scores.ravel()
        k = min(beam_width, flat.size)
        top = np.argsort(-flat, kind="stable")[:k]

        next_live: list[Hypothesis] = []
        parent_rows: list[int] = []
        next_tokens: list[int] = []
        for cand in top:
            parent, tok = divmod(int(cand), vocab)
            h = live[parent]
            hyp = Hypothesis(
                tokens=h.tokens + (tok,),
                model_score=h.model_score + float(logp[parent, tok]),
                lm_score=h.lm_score + (float(lm_logp[parent, tok])
                                       if lm is not None else 0.0),
            )
            if tok == EOS_ID or len(hyp.tokens) >= max_len:
                terminated.append(hyp)
            else:
                next_live.append(hyp)
                parent_rows.append(parent)
                next_tokens.append(tok)

        if not next_live:
            break
        best_terminated = max((h.total(beta) for h in terminated), default=-math.inf)
        keep = [i for i, h in enumerate(next_live) if h.total(beta) > best_terminated]
        if not keep:
            break
        live = [next_live[i] for i in keep]
        rows = np.array([parent_rows[i] for i in keep], dtype=np.intp)
        state = _select_rows(new_state, rows, np.array(
            [next_tokens[i] for i in keep], dtype=np.intp))
        if lm is not None:
            lm_state = _select_rows(new_lm_state, rows, np.array(
                [next_tokens[i] for i in keep], dtype=np.intp))

    terminated.sort(key=final_key, reverse=True)
    nbest = terminated[:beam_width]
    best = _strip_eos(nbest[0].tokens) if nbest else ()
    return DecodeResult(best=best, nbest=nbest, beta=beta)


def _select_rows(state, rows: np.ndarray, tokens: np.ndarray):
    from .model import DecoderState
    return DecoderState(
        hidden=state.hidden[rows],
        cell=state.cell[rows],
        weights=None if state.weights is None else state.weights[rows],
        prev_token=tokens,
    )


# --------------------------------------------------------- external LM training


@dataclass
class LmTrainConfig:
    emb_dim: int = 16
    units: int = 48
    epochs: int = 10
    batch_size: int = 96
    sort_window: int = 128
    patience: int = 3
    optimizer: AdaDeltaConfig = field(default_factory=AdaDeltaConfig)


def external_lm_train(text: list[list[int]], vocab_size: int,
                      cfg: LmTrainConfig, seed: int,
                      val_text: list[list[int]] | None = None
                      ) -> tuple[Seq2SeqModel, list[dict]]:
    """Train a standalone LM (embedding -> LSTM -> projection) on text."""
    if not text:
        raise ContractError("empty text corpus")
    rng = Rng(seed)
    model = Seq2SeqModel.build(
        ModelConfig(arch=ARCH_LM, vocab_size=vocab_size, emb_dim=cfg.emb_dim,
                    dec_units=cfg.units), rng.spawn(1))
    opt = AdaDelta(model.params, cfg.optimizer)
    holdout = val_text if val_text else text
    history: list[dict] = []
    best_val = evaluate_lm(model, holdout)
    best_snap = {k: p.data.copy() for k, p in model.params.items()}
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(text, cfg.batch_size, rng.spawn(epoch).next_u64(),
                               cfg.sort_window, len)
        stats = run_epoch_lm(model, batches, opt)
        val = evaluate_lm(model, holdout)
        history.append({"epoch": epoch, "loss": stats["loss"], "val": val})
        if val < best_val:
            best_val = val
            best_snap = {k: p.data.copy() for k, p in model.params.items()}
            bad = 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    for k, p in model.params.items():
        p.data = best_snap[k].copy()
    return model, history


def perplexity(model: Seq2SeqModel, seqs: list[list[int]],
               batch_size: int = 64) -> float:
    """exp of the mean per-token NLL over the corpus."""
    total_nll = 0.0
    total_tokens = 0
    for lo in range(0, len(seqs), batch_size):
        batch = seqs[lo:lo + batch_size]
        total_nll += model.forward_lm_batch(batch).loss.item() * len(batch)
        total_tokens += sum(len(s) for s in batch)
    return math.exp(total_nll / total_tokens)


# ---------------------------------------------------------------- error rates


@dataclass
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def levenshtein_counts(ref, hyp) -> EditCounts:
    """Uniform-cost edit distance with an S/I/D breakdown via backtrace."""
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i, j] = min(dist[i - 1, j - 1] + (0 if same else 1),
                             dist[i - 1, j] + 1,
                             dist[i, j - 1] + 1)
    i, j = n, m
    subs = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (
                0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(dist[n, m]), subs, ins, dels)


@dataclass
class EditReport:
    unit: str
    rate: float
    substitutions: int
    insertions: int
    deletions: int
    ref_units: int
    pairs: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _units(text: str, unit: str) -> list[str]:
    if unit == "char":
        return list(text)
    if unit == "word":
        return text.split()
    raise ConfigError(f"unknown error-rate unit {unit!r}")


def error_rate(hyps: list[str], refs: list[str], unit: str = "char") -> EditReport:
    """Total edit distance over total reference length, S/I/D counted uniformly."""
    if not refs:
        raise ContractError("empty reference list")
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    subs = ins = dels = ref_units = 0
    for hyp, ref in zip(hyps, refs):
        counts = levenshtein_counts(_units(ref, unit), _units(hyp, unit))
        subs += counts.substitutions
        ins += counts.insertions
        dels += counts.deletions
        ref_units += len(_units(ref, unit))
    edits = subs + ins + dels
    if ref_units == 0:
        rate = 0.0 if edits == 0 else math.inf
    else:
        rate = edits / ref_units
    return EditReport(unit=unit, rate=rate, substitutions=subs, insertions=ins,
                      deletions=dels, ref_units=ref_units, pairs=len(refs))


def format_report(report: EditReport) -> str:
    return (f"unit={report.unit} pairs={report.pairs}\n"
            f"substitutions={report.substitutions} "
            f"insertions={report.insertions} "
            f"deletions={report.deletions}\n"
            f"reference_units={report.ref_units}\n"
            f"error_rate={report.rate:.4f}\n")
