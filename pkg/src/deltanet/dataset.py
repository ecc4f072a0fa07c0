"""Pairing target exams with conditional exams and packing them into batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import PAD, ExamRecord, Vocabulary, pad_report, records_by_patient
from .model import Batch
from .retrieval import (ConditionBundle, FeatureIndex, history_conditions,
                        retrieved_conditions)

__all__ = ["Example", "build_examples", "make_batch", "iterate_batches", "max_report_length",
           "select_targets", "pack_conditions", "SOURCES", "TARGET_SETS"]

SOURCES = ("self", "others", "mixed")
TARGET_SETS = ("all", "with_history", "latest_multi")


@dataclass
class Example:
    target: ExamRecord
    conditions: ConditionBundle

    @property
    def exam_id(self) -> str:
        return self.target.exam_id


def build_examples(targets: Sequence[ExamRecord], all_records: Sequence[ExamRecord],
                   n_conditions: int, source: str = "mixed", index: FeatureIndex | None = None,
                   exclude_same_patient: bool = True, require_full_history: bool = False,
                   query_cache: dict | None = None, encoder=None, top_up: bool = True) -> list:
    """Attach ``n_conditions`` conditional exams to every target.

    ``source`` selects patient history ("self"), cross-patient retrieval from
    the index ("others"), or history topped up by retrieval ("mixed"). With
    ``source="self"`` targets lacking enough history are dropped when
    ``require_full_history`` is set and topped up by retrieval otherwise.
    Retrieved exams always come from ``index``, which holds training exams only.

    With ``top_up=False`` a target that has some history keeps only its prior
    visits (the remaining slots stay empty and are masked inside the model);
    retrieval is then used only for targets with no history at all.
    """
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    if n_conditions == 0:
        return [Example(t, ConditionBundle([])) for t in targets]
    if source != "self" or not require_full_history:
        if index is None:
            raise ValueError("retrieval needs a feature index")
    lookup = {r.exam_id: r for r in all_records}
    by_patient = records_by_patient(all_records)
    examples = []
    for t in targets:
        entries = []
        if source in ("self", "mixed"):
            entries = history_conditions(by_patient.get(t.patient_id, []), t, n_conditions).entries
            if source == "self" and require_full_history and len(entries) < n_conditions:
                continue
        if len(entries) < n_conditions and (top_up or not entries):
            have = {e.record.exam_id for e in entries}
            vec = query_cache.get(t.exam_id) if query_cache is not None else None
            found = retrieved_conditions(index, lookup, t, n_conditions - len(entries), have,
                                         exclude_same_patient, vec, encoder)
            entries = entries + found.entries
        if len(entries) < n_conditions and (top_up or not entries):
            raise ValueError(f"could not find {n_conditions} conditions for exam {t.exam_id}")
        examples.append(Example(t, ConditionBundle(entries)))
    return examples


def select_targets(records: Sequence[ExamRecord], targets: str = "all", training: bool = False,
                   include_priors: bool = False) -> list:
    """Choose which exams of a split become generation targets.

    ``with_history`` keeps exams that have an earlier visit. ``latest_multi``
    keeps patients with at least two visits; for training every visit after
    the first is a target, for evaluation only the latest one.
    ``include_priors`` (training only) also adds the earlier visits of those
    patients, i.e. the exams a history-conditioned model would read as
    conditions.
    """
    if targets not in TARGET_SETS:
        raise ValueError(f"targets must be one of {TARGET_SETS}, got {targets!r}")
    if targets == "all":
        return list(records)
    if targets == "with_history":
        chosen = [r for r in records if r.visit > 0]
    else:
        chosen = []
        for visits in records_by_patient(records).values():
            if len(visits) >= 2:
                chosen.extend(visits[1:] if training else visits[-1:])
    if training and include_priors:
        keep = {r.exam_id for r in chosen}
        by_patient = records_by_patient(records)
        for r in list(chosen):
            keep.update(p.exam_id for p in by_patient[r.patient_id] if p.visit < r.visit)
        chosen = [r for r in records if r.exam_id in keep]
    return chosen


def max_report_length(records: Sequence[ExamRecord]) -> int:
    """Encoded length (with BOS and EOS) of the longest report."""
    return max(len(r.report) for r in records) + 2


def make_batch(examples: Sequence[Example], vocab: Vocabulary, n_conditions: int,
               cond_len: int) -> Batch:
    B = len(examples)
    images = np.stack([np.asarray(e.target.image) for e in examples])
    encoded = [vocab.encode(e.target.report) for e in examples]
    T = max(len(x) for x in encoded)
    targets = np.full((B, T), PAD, dtype=np.int64)
    tmask = np.zeros((B, T), dtype=np.int64)
    for b, ids in enumerate(encoded):
        targets[b, :len(ids)] = ids
        tmask[b, :len(ids)] = 1
    batch = Batch(images=images, targets=targets, target_mask=tmask)
    if n_conditions:
        packed = [pack_conditions(e.conditions, vocab, n_conditions, cond_len, images.shape[1:])
                  for e in examples]
        batch.cond_images = np.stack([p[0] for p in packed])
        batch.cond_reports = np.stack([p[1] for p in packed])
        batch.cond_mask = np.stack([p[2] for p in packed])
    return batch


def pack_conditions(bundle: ConditionBundle, vocab: Vocabulary, n_conditions: int, cond_len: int,
                    image_shape) -> tuple:
    """``(images (L, C, H, W), reports (L, N_c), mask (L, N_c))`` for one bundle.

    Bundles shorter than ``n_conditions`` leave trailing slots empty: zero
    image, all-PAD report and an all-zero mask.
    """
    entries = bundle.entries
    if not 1 <= len(entries) <= n_conditions:
        raise ValueError(f"bundle has {len(entries)} conditions, model expects 1..{n_conditions}")
    cimg = np.zeros((n_conditions,) + tuple(image_shape))
    crep = np.full((n_conditions, cond_len), PAD, dtype=np.int64)
    cmask = np.zeros((n_conditions, cond_len), dtype=np.int64)
    for i, entry in enumerate(entries):
        cimg[i] = entry.record.image
        crep[i], cmask[i] = pad_report(vocab.encode(entry.record.report), cond_len, entry.record.exam_id)
    return cimg, crep, cmask


def iterate_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for s in range(0, len(order), batch_size):
        yield [examples[i] for i in order[s:s + batch_size]]
