"""Conditional-exam selection: patient history and cross-patient cosine retrieval."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _io
from .corpus import ExamRecord

__all__ = [
    "FeatureIndex",
    "ConditionEntry",
    "ConditionBundle",
    "RetrievalResult",
    "extract_features",
    "cosine",
    "build_index",
    "retrieve_similar",
    "history_conditions",
    "split_fingerprint",
]

log = logging.getLogger(__name__)

INDEX_VERSION = 1
PIXEL_GRID = 16


def _normalize(v: np.ndarray):
    """Unit vector and a flag set when the input had no direction."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out, True
    return v / n, False


def _pixel_vector(image: np.ndarray, grid: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    C, H, W = img.shape
    if H % grid or W % grid:
        raise ValueError(f"image {H}x{W} cannot be block-averaged to {grid}x{grid}")
    small = img.reshape(C, grid, H // grid, grid, W // grid).mean(axis=(2, 4))
    flat = small.reshape(-1)
    sd = flat.std()
    return (flat - flat.mean()) / sd if sd > 0 else np.zeros_like(flat)


def extract_features(image, provider: str = "pixel", encoder=None, grid: int = PIXEL_GRID):
    """Unit-norm retrieval feature for one image.

    Returns ``(vector, degenerate)``; ``degenerate`` flags a blank image that
    fell back to the first basis direction.
    """
    if provider == "pixel":
        return _normalize(_pixel_vector(image, grid))
    if provider == "encoder":
        if encoder is None:
            raise ValueError("encoder provider requires a frozen ConvEncoder")
        from . import numerics as nx

        with nx.no_grad():
            feats = encoder(np.asarray(image, dtype=nx.get_default_dtype()))
            pooled = nx.mean_pool_rows(feats)
        return _normalize(pooled.data)
    raise ValueError(f"unknown feature provider {provider!r}")


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u / nu, v / nv), -1.0, 1.0))


def split_fingerprint(train_exam_ids: Iterable[str]) -> str:
    h = hashlib.sha256("\n".join(sorted(train_exam_ids)).encode())
    return h.hexdigest()[:16]


@dataclass
class FeatureIndex:
    exam_ids: list
    patient_ids: list
    embeddings: np.ndarray  # (n, dim), unit rows
    provider: str
    fingerprint: str
    degenerate: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self._row = {e: i for i, e in enumerate(self.exam_ids)}
        # ascending-id rank per row, used as the secondary sort key
        self._id_rank = np.argsort(np.argsort(np.array(self.exam_ids, dtype=object)))

    def __len__(self) -> int:
        return len(self.exam_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __contains__(self, exam_id: str) -> bool:
        return exam_id in self._row

    def vector(self, exam_id: str) -> np.ndarray:
        return self.embeddings[self._row[exam_id]]

    def save(self, path) -> Path:
        header = {"format": "deltanet-index", "version": INDEX_VERSION, "provider": self.provider,
                  "dim": self.dim, "fingerprint": self.fingerprint,
                  "exam_ids": list(self.exam_ids), "patient_ids": list(self.patient_ids),
                  "degenerate": list(self.degenerate)}
        return _io.write_container(path, b"DNIX", header, {"embeddings": self.embeddings})

    @classmethod
    def load(cls, path) -> "FeatureIndex":
        header, arrays = _io.read_container(path, b"DNIX")
        if header.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index version {header.get('version')}")
        emb = arrays["embeddings"]
        if emb.shape[1] != header["dim"]:
            raise ValueError("index header dimension does not match the stored embeddings")
        return cls(header["exam_ids"], header["patient_ids"], emb, header["provider"],
                   header["fingerprint"], header.get("degenerate", []))


def build_index(train_records: Sequence[ExamRecord], train_patients: set | None = None,
                provider: str = "pixel", encoder=None) -> FeatureIndex:
    """Index over training exams only; ``train_patients`` guards the split."""
    if not train_records:
        raise ValueError("cannot build an index from an empty training split")
    if train_patients is not None:
        leaked = [r.exam_id for r in train_records if r.patient_id not in train_patients]
        if leaked:
            raise ValueError(f"non-training exams offered to the index: {leaked[:5]}")
    vecs, degenerate = [], []
    for r in train_records:
        v, bad = extract_features(r.image, provider, encoder)
        vecs.append(v)
        if bad:
            degenerate.append(r.exam_id)
            log.warning("exam %s has a blank feature vector; using the first basis direction", r.exam_id)
    ids = [r.exam_id for r in train_records]
    fp = f"{provider}:{split_fingerprint(ids)}"
    return FeatureIndex(ids, [r.patient_id for r in train_records], np.stack(vecs), provider, fp,
                        degenerate)


@dataclass
class RetrievalResult:
    exam_ids: list
    similarities: list
    status: str = "ok"  # "ok" | "truncated"


def retrieve_similar(index: FeatureIndex, query_vector, k: int, query_exam_id: str | None = None,
                     query_patient_id: str | None = None,
                     exclude_same_patient: bool = True) -> RetrievalResult:
    """Top-``k`` indexed exams by cosine similarity.

    Ordering is by descending similarity, ties broken by ascending exam id.
    The query exam itself and, by default, every exam of the query's patient
    are never returned.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    q, _ = _normalize(query_vector)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dimension {q.shape[0]} != index dimension {index.dim}")
    # row-wise product and sum: identical rows always get bit-identical
    # similarities, which a BLAS matrix-vector product does not guarantee
    sims = (index.embeddings * q).sum(axis=1)
    allowed = np.ones(len(index), dtype=bool)
    if query_exam_id is not None and query_exam_id in index:
        allowed[index._row[query_exam_id]] = False
    if exclude_same_patient and query_patient_id is not None:
        allowed &= np.array([p != query_patient_id for p in index.patient_ids])
    cand = np.flatnonzero(allowed)
    order = cand[np.lexsort((index._id_rank[cand], -sims[cand]))]
    status = "ok"
    if k > order.size:
        status = "truncated"
        log.warning("requested k=%d but only %d candidates are available", k, order.size)
    top = order[:k]
    return RetrievalResult([index.exam_ids[i] for i in top],
                           [float(np.clip(sims[i], -1.0, 1.0)) for i in top], status)


@dataclass
class ConditionEntry:
    record: ExamRecord
    provenance: str  # "self" | "retrieved"
    similarity: float | None = None


@dataclass
class ConditionBundle:
    entries: list = field(default_factory=list)
    status: str = "ok"  # "ok" | "no_history"

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def exam_ids(self) -> list:
        return [e.record.exam_id for e in self.entries]


def history_conditions(patient_records: Sequence[ExamRecord], target: ExamRecord,
                       max_conditions: int) -> ConditionBundle:
    """Up to ``max_conditions`` visits preceding ``target``, most recent first."""
    prior = sorted((r for r in patient_records
                    if r.patient_id == target.patient_id and r.visit < target.visit),
                   key=lambda r: r.visit, reverse=True)
    if not prior:
        return ConditionBundle([], status="no_history")
    return ConditionBundle([ConditionEntry(r, "self") for r in prior[:max_conditions]])


def retrieved_conditions(index: FeatureIndex, lookup: dict, target: ExamRecord, k: int,
                         exclude: Iterable[str] = (), exclude_same_patient: bool = True,
                         query_vector=None, encoder=None) -> ConditionBundle:
    """Bundle of the ``k`` most similar training exams for ``target``."""
    if query_vector is None:
        query_vector = extract_features(target.image, index.provider, encoder)[0]
    exclude = set(exclude)
    res = retrieve_similar(index, query_vector, k + len(exclude), target.exam_id,
                           target.patient_id, exclude_same_patient)
    entries = [ConditionEntry(lookup[e], "retrieved", s)
               for e, s in zip(res.exam_ids, res.similarities) if e not in exclude][:k]
    return ConditionBundle(entries, "ok" if len(entries) == k else "truncated")


def dump_retrievals(index: FeatureIndex, queries: Sequence[ExamRecord], k: int,
                    exclude_same_patient: bool = True, encoder=None) -> dict:
    """Map each query exam id to its ranked ``[exam_id, similarity]`` pairs."""
    out = {}
    for r in queries:
        vec = extract_features(r.image, index.provider, encoder)[0]
        res = retrieve_similar(index, vec, k, r.exam_id, r.patient_id, exclude_same_patient)
        out[r.exam_id] = [[e, round(s, 12)] for e, s in zip(res.exam_ids, res.similarities)]
    return out
