"""Corpus-level NLG metrics with MS-COCO caption-evaluation semantics.

Candidates and references are token lists (already tokenized, compared by
surface string). Each candidate has one reference here, but BLEU, ROUGE-L
and CIDEr-D also accept a list of references per candidate.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._kernels import lcs_length

__all__ = [
    "EvaluationReport",
    "bleu",
    "bleu_all",
    "rouge_l",
    "cider_d",
    "cider",
    "clinical_efficacy",
    "evaluate_corpus",
    "write_report",
]

_TINY = 1e-15
_SMALL = 1e-9


def _as_refs(references) -> list:
    out = []
    for ref in references:
        if ref and isinstance(ref[0], (list, tuple)):
            out.append([list(r) for r in ref])
        else:
            out.append([list(ref)])
    return out


def _check(candidates, references):
    if len(candidates) == 0:
        raise ValueError("cannot score an empty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_all(candidates, references, n: int = 4) -> list:
    """Corpus BLEU-1..n as computed by the COCO ``BleuScorer`` (closest ref length)."""
    _check(candidates, references)
    refs = _as_refs(references)
    correct = [0] * n
    guess = [0] * n
    testlen = reflen = 0
    for cand, rs in zip(candidates, refs):
        cand = list(cand)
        testlen += len(cand)
        # closest reference length, shorter wins ties
        reflen += min((abs(len(r) - len(cand)), len(r)) for r in rs)[1]
        for k in range(1, n + 1):
            max_ref = Counter()
            for r in rs:
                for g, c in _ngrams(r, k).items():
                    max_ref[g] = max(max_ref[g], c)
            cc = _ngrams(cand, k)
            guess[k - 1] += max(0, len(cand) - k + 1)
            correct[k - 1] += sum(min(c, max_ref[g]) for g, c in cc.items())
    scores = []
    prod = 1.0
    for k in range(n):
        prod *= (correct[k] + _TINY) / (guess[k] + _SMALL)
        scores.append(prod ** (1.0 / (k + 1)))
    ratio = (testlen + _TINY) / (reflen + _SMALL)
    if ratio < 1:
        bp = math.exp(1 - 1 / ratio)
        scores = [s * bp for s in scores]
    return scores


def bleu(candidates, references, n: int = 4) -> float:
    return bleu_all(candidates, references, n)[n - 1]


def _rouge_pair(cand, refs, beta: float) -> float:
    if not cand:
        return 0.0
    vocab: dict = {}
    c_ids = [vocab.setdefault(t, len(vocab)) for t in cand]
    precs, recs = [], []
    for r in refs:
        r_ids = [vocab.setdefault(t, len(vocab)) for t in r]
        lcs = lcs_length(c_ids, r_ids)
        precs.append(lcs / len(cand))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return ((1 + beta ** 2) * p * r) / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean per-pair LCS F-measure with recall weight ``beta``."""
    _check(candidates, references)
    refs = _as_refs(references)
    return float(np.mean([_rouge_pair(list(c), rs, beta) for c, rs in zip(candidates, refs)]))


def cider_d(candidates, references, n: int = 4, sigma: float = 6.0, return_all: bool = False):
    """CIDEr-D with document frequencies taken from the reference corpus."""
    _check(candidates, references)
    refs = _as_refs(references)
    if len(refs) < 2:
        raise ValueError("CIDEr-D needs at least two reference documents to define IDF")

    def cook(tokens):
        counts = Counter()
        for k in range(1, n + 1):
            counts.update(_ngrams(tokens, k))
        return counts

    crefs = [[cook(r) for r in rs] for rs in refs]
    ctest = [cook(list(c)) for c in candidates]
    df: Counter = Counter()
    for rs in crefs:
        for g in set(g for r in rs for g in r):
            df[g] += 1
    ref_len = math.log(float(len(crefs)))

    def vec(counts):
        v = [defaultdict(float) for _ in range(n)]
        norm = [0.0] * n
        length = 0
        for g, tf in counts.items():
            k = len(g) - 1
            w = float(tf) * (ref_len - math.log(max(1.0, df[g])))
            v[k][g] = w
            norm[k] += w * w
            # the reference tool measures length in bigrams; kept for parity
            if k == 1:
                length += tf
        return v, [math.sqrt(x) for x in norm], length

    def sim(vh, vr, nh, nr, lh, lr):
        delta = float(lh - lr)
        val = np.zeros(n)
        for k in range(n):
            for g in vh[k]:
                val[k] += min(vh[k][g], vr[k][g]) * vr[k][g]
            if nh[k] != 0 and nr[k] != 0:
                val[k] /= nh[k] * nr[k]
            val[k] *= math.e ** (-(delta ** 2) / (2 * sigma ** 2))
        return val

    scores = []
    for test, rs in zip(ctest, crefs):
        vh, nh, lh = vec(test)
        acc = np.zeros(n)
        for r in rs:
            vr, nr, lr = vec(r)
            acc += sim(vh, vr, nh, nr, lh, lr)
        scores.append(float(np.mean(acc)) / len(rs) * 10.0)
    score = float(np.mean(scores))
    return (score, scores) if return_all else score


cider = cider_d


def clinical_efficacy(predicted, reference):
    """Micro-averaged precision, recall and F1 over label instances.

    Undefined ratios (nothing predicted, nothing to recall) are reported as 0.
    """
    if len(predicted) != len(reference):
        raise ValueError(f"{len(predicted)} predicted label sets but {len(reference)} references")
    tp = n_pred = n_ref = 0
    for p, r in zip(predicted, reference):
        p, r = set(p), set(r)
        tp += len(p & r)
        n_pred += len(p)
        n_ref += len(r)
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_ref if n_ref else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


@dataclass
class EvaluationReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    corpus_size: int
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    fingerprint: str | None = None

    def as_dict(self, digits: int = 4) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = round(v, digits) if isinstance(v, float) else v
        return out


def evaluate_corpus(candidates, references, predicted_labels=None, reference_labels=None,
                    fingerprint: str | None = None) -> EvaluationReport:
    b = bleu_all(candidates, references, 4)
    rl = rouge_l(candidates, references)
    cd = cider_d(candidates, references) if len(references) >= 2 else 0.0
    rep = EvaluationReport(b[0], b[1], b[2], b[3], rl, cd, len(candidates), fingerprint=fingerprint)
    if predicted_labels is not None and reference_labels is not None:
        rep.precision, rep.recall, rep.f1 = clinical_efficacy(predicted_labels, reference_labels)
    return rep


def write_report(report: EvaluationReport, path, config: dict | None = None) -> Path:
    """Structured text: one ``name: value`` line per metric, 4 decimals."""
    path = Path(path)
    d = report.as_dict()
    if report.fingerprint is None and config is not None:
        d["fingerprint"] = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
    lines = []
    for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "precision", "recall", "f1"):
        if d.get(k) is not None:
            lines.append(f"{k}: {d[k]:.4f}")
    lines.append(f"corpus_size: {d['corpus_size']}")
    lines.append(f"fingerprint: {d.get('fingerprint') or 'none'}")
    path.write_text("\n".join(lines) + "\n")
    return path
