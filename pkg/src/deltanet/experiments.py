"""Comparison presets run on the synthetic corpus.

Three presets ship:

``modes``
    basic vs single-condition vs multi-condition models on every exam. The
    conditions are the patient's most recent prior visits; a patient with no
    prior visit is conditioned on the most similar training exams of other
    patients. A multi-condition target with one or two prior visits leaves the
    remaining slots empty.
``self_vs_others``
    multi-visit patients only, latest visit as the test target. ``self``
    conditions on the previous visit; ``others`` conditions on the most
    similar training exam of a different patient and additionally trains on
    the prior exams that ``self`` uses as conditions.
``ablation``
    single-condition model on exams that have a prior visit, comparing the
    conditional image alone, the conditional report alone, both without
    subtraction, and the full feature-difference model.

Every arm of a preset shares one corpus, split, vocabulary and index; seeds
vary the parameter initialisation and batch order.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .corpus import (SyntheticConfig, Vocabulary, build_vocabulary, generate_synthetic,
                     labels_from_report, split_patients)
from .dataset import build_examples, max_report_length, select_targets
from .metrics import EvaluationReport
from .model import DeltaNetModel, ModelConfig
from .retrieval import FeatureIndex, build_index, extract_features
from .training import TrainConfig, evaluate_model, fit

__all__ = ["Arm", "Preset", "PRESETS", "PreparedCorpus", "ArmResult", "ExperimentResult",
           "prepare_corpus", "arm_examples", "run_arm", "run_experiment"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    mode: str
    variant: str = "full"
    source: str = "mixed"  # condition source handed to build_examples
    top_up: bool = False  # fill short histories with retrieved exams instead of masking


@dataclass
class Preset:
    name: str
    arms: tuple
    targets: str  # "all" | "latest_multi" | "with_history"
    corpus: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2)
    split_seed: int = 0

    def arm(self, name: str) -> Arm:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(f"preset {self.name} has no arm {name!r}; arms: {[a.name for a in self.arms]}")


# Each patient carries a baseline under every finding region as large as two
# severity steps, so the current image alone is an unreliable read of severity
# while a same-patient difference is not.
EXPERIMENT_CORPUS = SyntheticConfig(n_patients=300, change_prob=0.3, region_baseline=2.0, seed=0)
EXPERIMENT_MODEL = dict(dim=32, heads=4, positions=16, conv_channels=(8, 16, 16))
EXPERIMENT_TRAIN = TrainConfig(lr=2e-3, batch_size=8, epochs=50, patience=10)

PRESETS = {
    "modes": Preset(
        "modes",
        (Arm("basic", "basic"), Arm("delta1", "delta1"), Arm("deltaL", "deltaL")),
        targets="all", corpus=EXPERIMENT_CORPUS, model=EXPERIMENT_MODEL, train=EXPERIMENT_TRAIN),
    "self_vs_others": Preset(
        "self_vs_others",
        (Arm("self", "delta1", source="self"), Arm("others", "delta1", source="others")),
        targets="latest_multi", corpus=EXPERIMENT_CORPUS, model=EXPERIMENT_MODEL,
        train=EXPERIMENT_TRAIN),
    "ablation": Preset(
        "ablation",
        (Arm("image", "delta1", "image", "self"), Arm("report", "delta1", "report", "self"),
         Arm("image_report", "delta1", "image_report", "self"),
         Arm("full", "delta1", "full", "self")),
        targets="with_history", corpus=EXPERIMENT_CORPUS, model=EXPERIMENT_MODEL,
        train=EXPERIMENT_TRAIN),
}


@dataclass
class PreparedCorpus:
    records: list
    train_patients: set
    val_patients: set
    test_patients: set
    vocab: Vocabulary
    index: FeatureIndex
    query_cache: dict
    report_len: int

    def split(self, which: str) -> list:
        pats = {"train": self.train_patients, "val": self.val_patients,
                "test": self.test_patients}[which]
        return [r for r in self.records if r.patient_id in pats]


def prepare_corpus(corpus: SyntheticConfig, split_seed: int = 0) -> PreparedCorpus:
    records = generate_synthetic(corpus)
    tr, va, te = split_patients(records, seed=split_seed)
    train = [r for r in records if r.patient_id in tr]
    vocab = build_vocabulary([r.report for r in train])
    index = build_index(train, tr)
    cache = {r.exam_id: extract_features(r.image, index.provider)[0] for r in records}
    return PreparedCorpus(records, tr, va, te, vocab, index, cache, max_report_length(records))


def arm_examples(prep: PreparedCorpus, preset: Preset, arm: Arm, n_conditions: int):
    """``(train, val, test)`` examples for one arm."""
    out = []
    for which in ("train", "val", "test"):
        pool = prep.split(which)
        # the other-patient arm also trains on the priors the self arm conditions on
        targets = select_targets(pool, preset.targets, which == "train",
                                 include_priors=arm.source == "others")
        out.append(build_examples(targets, prep.records, n_conditions, arm.source, prep.index,
                                  require_full_history=arm.source == "self",
                                  query_cache=prep.query_cache, top_up=arm.top_up))
    return tuple(out)


@dataclass
class ArmResult:
    arm: str
    seed: int
    test: EvaluationReport
    best_epoch: int
    epochs_run: int
    n_train: int
    n_test: int
    seconds: float

    @property
    def bleu4(self) -> float:
        return self.test.bleu4


@dataclass
class ExperimentResult:
    preset: str
    runs: list

    def scores(self, arm: str) -> list:
        return [r.bleu4 for r in self.runs if r.arm == arm]

    def mean_bleu4(self, arm: str) -> float:
        s = self.scores(arm)
        if not s:
            raise KeyError(f"no runs recorded for arm {arm!r}")
        return float(np.mean(s))

    def summary(self) -> dict:
        arms = list(dict.fromkeys(r.arm for r in self.runs))
        return {a: {"mean_bleu4": round(self.mean_bleu4(a), 4),
                    "bleu4": [round(x, 4) for x in self.scores(a)]} for a in arms}


def run_arm(preset: Preset, arm: Arm | str, seed: int, prep: PreparedCorpus | None = None,
            on_epoch: Callable | None = None) -> ArmResult:
    if isinstance(arm, str):
        arm = preset.arm(arm)
    prep = prep or prepare_corpus(preset.corpus, preset.split_seed)
    t0 = time.perf_counter()
    cfg = ModelConfig(vocab_size=len(prep.vocab), mode=arm.mode, variant=arm.variant, seed=seed,
                      cond_len=prep.report_len, max_decode_len=prep.report_len,
                      image_size=preset.corpus.image_size, **preset.model)
    train, val, test = arm_examples(prep, preset, arm, cfg.n_conditions)
    model = DeltaNetModel(cfg)
    res = fit(model, train, val, prep.vocab, replace(preset.train, seed=seed), on_epoch=on_epoch)
    findings = preset.corpus.findings
    report = evaluate_model(model, test, prep.vocab, preset.train.eval_batch_size,
                            label_fn=lambda toks: labels_from_report(toks, findings))
    out = ArmResult(arm.name, seed, report, res.best_epoch, len(res.history), len(train), len(test),
                    round(time.perf_counter() - t0, 2))
    log.info("%s/%s seed %d: test BLEU-4 %.4f (best epoch %d, %.1fs)", preset.name, arm.name, seed,
             out.bleu4, out.best_epoch, out.seconds)
    return out


def run_experiment(preset: Preset | str, seeds: Sequence[int] | None = None,
                   arms: Sequence[str] | None = None) -> ExperimentResult:
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[preset]
    prep = prepare_corpus(preset.corpus, preset.split_seed)
    chosen = [preset.arm(a) for a in arms] if arms else list(preset.arms)
    runs = [run_arm(preset, a, s, prep) for s in (seeds or preset.seeds) for a in chosen]
    return ExperimentResult(preset.name, runs)
