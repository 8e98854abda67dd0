"""Losses, AdaDelta with gradient clipping, mixed batching, update strategies.

The combined objective is (1 - alpha) * asr_loss + alpha * lm_loss; at
the boundaries it degenerates bitwise to the pure losses. Strategy "1"
trains on labelled data, then mixes in external text, then fine-tunes on
labelled data again; strategy "2" pre-trains the LM subnet on text and
then mixes. Each phase early-stops on validation loss and carries its
best-validation parameters forward.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .data import CyclingBatches, Utterance, make_batches
from .errors import ConfigError, ContractError, TrainingDivergedError
from .model import Seq2SeqModel, partition_params
from .rng import Rng
from .tensor import Tape, Tensor

log = logging.getLogger("declm")


# ---------------------------------------------------------------------- losses

def loss_asr(model: Seq2SeqModel, batch: list[Utterance]) -> Tensor:
    """Mean over the batch of per-utterance summed token NLL."""
    if not batch:
        raise ContractError("empty batch")
    feats = [u.features for u in batch]
    targets = [u.tokens for u in batch]
    return model.forward_asr_batch(feats, targets).loss


def loss_lm(model: Seq2SeqModel, batch: list[list[int]]) -> Tensor:
    if not batch:
        raise ContractError("empty batch")
    return model.forward_lm_batch(batch).loss


def loss_total(model: Seq2SeqModel, p_batch: list[Utterance],
               t_batch: list[list[int]], alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return tz.add(tz.scale(loss_asr(model, p_batch), 1.0 - alpha),
                  tz.scale(loss_lm(model, t_batch), alpha))


# ------------------------------------------------------------------- optimizer

@dataclass
class AdaDeltaConfig:
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 5.0


class AdaDelta:
    """Zeiler's update with global-norm gradient clipping applied first.

    Accumulators are kept in float64 so repeated tiny updates stay exact;
    the parameter write-back is cast to the parameter dtype.
    """

    def __init__(self, params: dict[str, Tensor], config: AdaDeltaConfig):
        self.params = dict(params)
        self.config = config
        self.sq_grad = {k: np.zeros(p.shape, dtype=np.float64)
                        for k, p in self.params.items()}
        self.sq_delta = {k: np.zeros(p.shape, dtype=np.float64)
                         for k, p in self.params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        cfg = self.config
        norm = self.grad_norm()
        factor = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
        for name, p in self.params.items():
            g = (np.zeros(p.shape, dtype=np.float64) if p.grad is None
                 else p.grad.astype(np.float64) * factor)
            if p.grad is not None and p.shape != p.grad.shape:
                raise ContractError(f"gradient shape mismatch for {name}")
            eg = self.sq_grad[name]
            edx = self.sq_delta[name]
            eg *= cfg.rho
            eg += (1.0 - cfg.rho) * g * g
            delta = -np.sqrt(edx + cfg.eps) / np.sqrt(eg + cfg.eps) * g
            edx *= cfg.rho
            edx += (1.0 - cfg.rho) * delta * delta
            p.data += delta.astype(p.data.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adadelta_step(opt: AdaDelta) -> float:
    return opt.step()


# ---------------------------------------------------------------- epoch runners

def _finite_or_raise(value: float) -> float:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"loss became non-finite ({value})")
    return value


def run_epoch_asr(model, batches, opt: AdaDelta) -> dict:
    losses = []
    for batch in batches:
        with Tape():
            loss = loss_asr(model, batch)
            _finite_or_raise(loss.item())
            tz.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return {"steps": len(losses), "loss": float(np.mean(losses))}


def run_epoch_lm(model, batches, opt: AdaDelta) -> dict:
    losses = []
    for batch in batches:
        with Tape():
            loss = loss_lm(model, batch)
            _finite_or_raise(loss.item())
            tz.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return {"steps": len(losses), "loss": float(np.mean(losses))}


def mixed_epoch(model, p_batches, t_stream: CyclingBatches, alpha: float,
                opt: AdaDelta) -> dict:
    """One epoch over the labelled batches with a cycling text stream;
    one combined update per step."""
    if not p_batches:
        raise ConfigError("empty labelled loader")
    losses = []
    for p_batch in p_batches:
        t_batch = t_stream.next()
        with Tape():
            loss = loss_total(model, p_batch, t_batch, alpha)
            _finite_or_raise(loss.item())
            tz.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return {"steps": len(losses), "loss": float(np.mean(losses))}


# ------------------------------------------------------------------ evaluation

def _sequential_batches(items, batch_size):
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def evaluate_asr(model, utts: list[Utterance], batch_size: int = 32) -> float:
    """Mean per-utterance summed NLL over a fixed evaluation set."""
    total = 0.0
    for batch in _sequential_batches(utts, batch_size):
        total += loss_asr(model, batch).item() * len(batch)
    return total / len(utts)


def evaluate_lm(model, seqs: list[list[int]], batch_size: int = 64) -> float:
    total = 0.0
    for batch in _sequential_batches(seqs, batch_size):
        total += loss_lm(model, batch).item() * len(batch)
    return total / len(seqs)


# ------------------------------------------------------------------- strategies

@dataclass
class StrategyPlan:
    strategy: str = "none"     # "none" | "1" | "2"
    alpha: float = 0.0
    epochs: int = 15           # per phase
    patience: int = 3

    def phases(self) -> list[str]:
        if self.strategy == "none":
            return ["asr"]
        if self.strategy == "1":
            return ["asr", "mixed", "asr"]
        if self.strategy == "2":
            return ["lm", "mixed"]
        raise ConfigError(f"unknown strategy {self.strategy!r}")


@dataclass
class TrainData:
    train: list[Utterance]
    val: list[Utterance]
    text: list[list[int]]
    val_text: list[list[int]] = field(default_factory=list)


@dataclass
class TrainSettings:
    batch_size: int = 16
    text_batch_size: int = 96
    sort_window: int = 128
    optimizer: AdaDeltaConfig = field(default_factory=AdaDeltaConfig)


class MetricLog:
    """Append-only text log, one line per epoch."""

    def __init__(self, path=None):
        self.path = path
        self.lines: list[str] = []
        if path is not None:
            open(path, "w").close()

    def line(self, phase: int, epoch: int, step: int, loss: float, val: float) -> None:
        text = f"phase={phase} epoch={epoch} step={step} loss={loss!r} val={val!r}"
        self.lines.append(text)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(text + "\n")


def _snapshot(model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def _restore(model, snap: dict[str, np.ndarray]) -> None:
    for k, p in model.params.items():
        p.data = snap[k].copy()


def run_strategy(model: Seq2SeqModel, plan: StrategyPlan, data: TrainData,
                 settings: TrainSettings, seed: int,
                 metric_log: MetricLog | None = None) -> list[dict]:
    """Run the plan's phases; the model ends at the best-validation
    parameters of the final phase. Returns the per-epoch history."""
    if metric_log is None:
        metric_log = MetricLog()
    if plan.strategy != "none" and not data.text:
        raise ConfigError("strategy with external text requires a text corpus")
    lm_names, _ = partition_params(model)
    history: list[dict] = []
    global_step = 0
    base_rng = Rng(seed)

    for phase_idx, kind in enumerate(plan.phases(), start=1):
        if plan.epochs <= 0:
            log.warning("phase %d (%s) skipped: zero epochs", phase_idx, kind)
            continue
        phase_rng = base_rng.spawn(phase_idx)
        if kind == "lm":
            subset = {k: model.params[k] for k in sorted(lm_names)}
        else:
            subset = model.params
        opt = AdaDelta(subset, settings.optimizer)
        t_stream = None
        if kind in ("mixed", "lm"):
            t_stream = CyclingBatches(data.text, settings.text_batch_size,
                                      phase_rng.spawn(0).next_u64(),
                                      settings.sort_window, len)

        def validate() -> float:
            if kind == "lm":
                if data.val_text:
                    return evaluate_lm(model, data.val_text)
                return evaluate_lm(model, data.text[:200])
            return evaluate_asr(model, data.val)

        best_val = validate()
        best_snap = _snapshot(model)
        bad = 0
        for epoch in range(1, plan.epochs + 1):
            epoch_seed = phase_rng.spawn(epoch).next_u64()
            if kind == "lm":
                batches = [t_stream.next() for _ in range(t_stream.batches_per_pass)]
                stats = run_epoch_lm(model, batches, opt)
            else:
                p_batches = make_batches(data.train, settings.batch_size,
                                         epoch_seed, settings.sort_window,
                                         lambda u: u.features.shape[0])
                if kind == "mixed":
                    stats = mixed_epoch(model, p_batches, t_stream, plan.alpha, opt)
                else:
                    stats = run_epoch_asr(model, p_batches, opt)
            global_step += stats["steps"]
            val = validate()
            metric_log.line(phase_idx, epoch, global_step, stats["loss"], val)
            history.append({"phase": phase_idx, "kind": kind, "epoch": epoch,
                            "loss": stats["loss"], "val": val})
            if val < best_val:
                best_val = val
                best_snap = _snapshot(model)
                bad = 0
            else:
                bad += 1
                if bad > plan.patience:
                    break
        _restore(model, best_snap)
    return history


def finetune_text_only(model: Seq2SeqModel, text: list[list[int]], epochs: int,
                       settings: TrainSettings, seed: int) -> list[float]:
    """Fine-tune the LM subnet on text alone (the forgetting scenario);
    returns the per-epoch training losses."""
    lm_names, _ = partition_params(model)
    opt = AdaDelta({k: model.params[k] for k in sorted(lm_names)},
                   settings.optimizer)
    stream = CyclingBatches(text, settings.text_batch_size, seed,
                            settings.sort_window, len)
    losses = []
    for _ in range(epochs):
        batches = [stream.next() for _ in range(stream.batches_per_pass)]
        losses.append(run_epoch_lm(model, batches, opt)["loss"])
    return losses


def finetune_mixed(model: Seq2SeqModel, data: TrainData, alpha: float,
                   epochs: int, settings: TrainSettings, seed: int) -> list[float]:
    """Continue training with the combined objective for a fixed number of
    epochs (no early stopping, no best-checkpoint restore)."""
    opt = AdaDelta(model.params, settings.optimizer)
    rng = Rng(seed)
    stream = CyclingBatches(data.text, settings.text_batch_size,
                            rng.spawn(0).next_u64(), settings.sort_window, len)
    losses = []
    for epoch in range(1, epochs + 1):
        p_batches = make_batches(data.train, settings.batch_size,
                                 rng.spawn(epoch).next_u64(),
                                 settings.sort_window,
                                 lambda u: u.features.shape[0])
        losses.append(mixed_epoch(model, p_batches, stream, alpha, opt)["loss"])
    return losses
