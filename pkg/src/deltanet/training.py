"""Epoch loop with validation BLEU-4 early stopping, and corpus evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Vocabulary
from .dataset import Example, iterate_batches, make_batch
from .metrics import EvaluationReport, bleu, evaluate_corpus
from .model import DeltaNetModel, train_step
from .numerics import NonFiniteError
from .optim import Adam

__all__ = ["TrainConfig", "TrainResult", "TrainingDiverged", "fit", "predict", "evaluate_model"]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, op: str):
        super().__init__(f"non-finite value in {op} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.op = epoch, step, op


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    eval_batch_size: int = 64


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_bleu4: float = float("-inf")
    steps: int = 0
    stopped_early: bool = False


def predict(model: DeltaNetModel, examples: Sequence[Example], vocab: Vocabulary,
            batch_size: int = 64) -> list:
    """Greedy reports (surface tokens) for every example, in order."""
    cfg = model.config
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        batch = make_batch(chunk, vocab, cfg.n_conditions, cfg.cond_len)
        for ids in model.greedy_batch(batch):
            out.append(vocab.decode(ids))
    return out


def evaluate_model(model: DeltaNetModel, examples: Sequence[Example], vocab: Vocabulary,
                   batch_size: int = 64, label_fn: Callable | None = None) -> EvaluationReport:
    cands = predict(model, examples, vocab, batch_size)
    refs = [list(e.target.report) for e in examples]
    pred_labels = ref_labels = None
    if label_fn is not None:
        pred_labels = [label_fn(c) for c in cands]
        ref_labels = [e.target.labels or () for e in examples]
    return evaluate_corpus(cands, refs, pred_labels, ref_labels)


def fit(model: DeltaNetModel, train: Sequence[Example], val: Sequence[Example], vocab: Vocabulary,
        config: TrainConfig, on_epoch: Callable | None = None,
        optimizer: Adam | None = None) -> TrainResult:
    """Train with Adam; keep the parameters with the best validation BLEU-4."""
    opt = optimizer or Adam(model.params(), lr=config.lr)
    cfg = model.config
    result = TrainResult()
    best_state = None
    since_best = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for chunk in iterate_batches(train, config.batch_size, rng):
            batch = make_batch(chunk, vocab, cfg.n_conditions, cfg.cond_len)
            try:
                losses.append(train_step(model, opt, batch))
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, result.steps, exc.op) from exc
            result.steps += 1
        if val:
            cands = predict(model, val, vocab, config.eval_batch_size)
            val_bleu = bleu(cands, [list(e.target.report) for e in val], 4)
        else:
            val_bleu = float("nan")
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "val_bleu4": float(val_bleu),
                 "seconds": round(time.perf_counter() - t0, 3)}
        result.history.append(entry)
        log.info("epoch %d loss %.4f val BLEU-4 %.4f", epoch, entry["loss"], val_bleu)
        if on_epoch is not None:
            on_epoch(entry)
        if not val or val_bleu > result.best_bleu4:
            result.best_bleu4 = val_bleu
            result.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped_early = True
                break
    if best_state is not None:
        model.load_state(best_state)
    return result
