"""Exam records, vocabulary, padding, patient-level splits and the synthetic corpus."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "UNK",
    "ExamRecord",
    "Vocabulary",
    "ReportTooLongError",
    "ManifestError",
    "Finding",
    "SyntheticConfig",
    "DEFAULT_FINDINGS",
    "build_vocabulary",
    "labels_from_report",
    "pad_report",
    "split_patients",
    "generate_synthetic",
    "patient_anatomy",
    "region_statistic",
    "save_manifest",
    "load_manifest",
    "records_by_patient",
    "report_statistics",
]

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class ExamRecord:
    exam_id: str
    patient_id: str
    visit: int
    image: np.ndarray
    report: list  # whitespace tokens
    labels: tuple | None = None

    def __eq__(self, other):
        if not isinstance(other, ExamRecord):
            return NotImplemented
        return (self.exam_id == other.exam_id and self.patient_id == other.patient_id
                and self.visit == other.visit and list(self.report) == list(other.report)
                and self.labels == other.labels and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))


class ReportTooLongError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class Vocabulary:
    """Token/id bijection with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list:
        return [BOS] + [self.stoi.get(t, UNK) for t in tokens] + [EOS]

    def decode(self, ids: Iterable[int]) -> list:
        out = []
        started = False
        for i in ids:
            i = int(i)
            if i == BOS and not started:
                started = True
                continue
            started = True
            if i == EOS:
                break
            if i == PAD or i == BOS:
                continue
            out.append(self.itos[i])
        return out

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def to_list(self) -> list:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:4]) != RESERVED:
            raise ValueError("serialized vocabulary does not start with the reserved tokens")
        return cls(itos[4:])


def build_vocabulary(reports: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    counts = Counter()
    n = 0
    for rep in reports:
        counts.update(rep)
        n += 1
    if n == 0:
        raise ValueError("build_vocabulary: empty training corpus")
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def pad_report(ids: Sequence[int], length: int, exam_id: str | None = None):
    """Right-pad with PAD to ``length``; returns ``(ids, mask)`` int arrays."""
    ids = list(ids)
    if len(ids) > length:
        who = f" for exam {exam_id}" if exam_id is not None else ""
        raise ReportTooLongError(f"report{who} has {len(ids)} tokens, limit is {length}")
    out = np.full(length, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(length, dtype=np.int64)
    mask[: len(ids)] = 1
    return out, mask


def split_patients(records_or_ids, ratios=(7, 1, 2), seed: int = 0):
    """Disjoint (train, val, test) patient-id sets at patient granularity."""
    ids = set()
    for r in records_or_ids:
        ids.add(r.patient_id if isinstance(r, ExamRecord) else r)
    if len(ids) < 10:
        raise ValueError(f"split_patients: need at least 10 patients, got {len(ids)}")
    order = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(order))
    shuffled = [order[i] for i in perm]
    total = float(sum(ratios))
    n = len(shuffled)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    return (set(shuffled[:n_train]), set(shuffled[n_train:n_train + n_val]),
            set(shuffled[n_train + n_val:]))


def records_by_patient(records: Iterable[ExamRecord]) -> dict:
    out: dict = {}
    for r in records:
        out.setdefault(r.patient_id, []).append(r)
    for visits in out.values():
        visits.sort(key=lambda r: r.visit)
    return out


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    name: str
    region: tuple  # (row, col, height, width) in pixels
    sentences: tuple  # one sentence per severity level, level 0 = absent


DEFAULT_FINDINGS = (
    Finding("cardiomegaly", (12, 11, 9, 10),
            ("heart size is normal .", "heart is mildly enlarged .", "heart is markedly enlarged .")),
    Finding("effusion", (24, 3, 6, 10),
            ("no pleural effusion .", "small left effusion .", "large left effusion .")),
    Finding("opacity", (3, 3, 8, 8),
            ("left lung is clear .", "patchy left opacity .", "dense left consolidation .")),
    Finding("consolidation", (3, 21, 8, 8),
            ("right lung is clear .", "patchy right opacity .", "dense right consolidation .")),
    Finding("pneumothorax", (24, 19, 6, 10),
            ("no pneumothorax .", "small right pneumothorax .", "large right pneumothorax .")),
)


@dataclass
class SyntheticConfig:
    n_patients: int = 300
    visit_probs: tuple = (0.4, 0.2, 0.2, 0.2)  # P(1 visit), P(2 visits), ...
    findings: tuple = DEFAULT_FINDINGS
    severity_probs: tuple = (0.5, 0.3, 0.2)
    change_prob: float = 0.3
    mutation: str = "switch"  # "switch": always a different level; "resample": fresh draw
    image_size: int = 32
    lesion_amplitude: float = 0.5
    anatomy_amplitude: float = 0.6
    anatomy_blobs: int = 6
    # patient-specific baseline under each finding region, drawn uniformly from
    # [0, region_baseline * lesion_amplitude]; 0 disables it
    region_baseline: float = 0.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.change_prob <= 1.0:
            raise ValueError("change_prob must lie in [0, 1]")
        if self.mutation not in ("switch", "resample"):
            raise ValueError("mutation must be 'switch' or 'resample'")
        if self.region_baseline < 0:
            raise ValueError("region_baseline must be non-negative")
        if abs(sum(self.visit_probs) - 1.0) > 1e-9 or abs(sum(self.severity_probs) - 1.0) > 1e-9:
            raise ValueError("probability tables must sum to 1")
        for f in self.findings:
            if len(f.sentences) != len(self.severity_probs):
                raise ValueError(f"finding {f.name} needs one sentence per severity level")


def _blob(size: int, r: float, c: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2.0 * sigma ** 2))


def patient_anatomy(config: SyntheticConfig, patient_index: int) -> np.ndarray:
    """Smooth patient-specific background shared by all of that patient's images."""
    rng = np.random.default_rng([config.seed, 1, patient_index])
    size = config.image_size
    img = np.zeros((size, size))
    for _ in range(config.anatomy_blobs):
        r, c = rng.uniform(0, size, size=2)
        sigma = rng.uniform(2.5, 5.0)
        img += rng.uniform(-1.0, 1.0) * _blob(size, r, c, sigma)
    img *= config.anatomy_amplitude
    if config.region_baseline > 0:
        # same shape as a lesion, so one image cannot tell baseline from severity
        top = config.region_baseline * config.lesion_amplitude
        for f in config.findings:
            img += rng.uniform(0.0, top) * _lesion_pattern(f, size)
    return img


def _lesion_pattern(finding: Finding, size: int) -> np.ndarray:
    r, c, h, w = finding.region
    pat = np.zeros((size, size))
    yy, xx = np.mgrid[0:h, 0:w]
    # finding-specific texture inside the rectangle: a soft dome
    dome = 1.0 - 0.5 * (((yy - (h - 1) / 2) / h) ** 2 + ((xx - (w - 1) / 2) / w) ** 2) * 4
    pat[r:r + h, c:c + w] = np.clip(dome, 0.25, 1.0)
    return pat


def render_image(config: SyntheticConfig, anatomy: np.ndarray, levels: Sequence[int],
                 rng: np.random.Generator | None) -> np.ndarray:
    size = config.image_size
    img = anatomy.copy()
    for f, lvl in zip(config.findings, levels):
        if lvl:
            img += config.lesion_amplitude * lvl * _lesion_pattern(f, size)
    if config.noise > 0 and rng is not None:
        img += config.noise * rng.standard_normal((size, size))
    return img[None, :, :]


def render_report(config: SyntheticConfig, levels: Sequence[int]) -> list:
    words = []
    for f, lvl in zip(config.findings, levels):
        words.extend(f.sentences[lvl].split())
    return words


def region_statistic(image: np.ndarray, anatomy: np.ndarray, finding: Finding) -> float:
    """Mean lesion intensity over the finding's region after removing the anatomy."""
    r, c, h, w = finding.region
    return float((image[0] - anatomy)[r:r + h, c:c + w].mean())


def _mutate(config: SyntheticConfig, level: int, rng: np.random.Generator) -> int:
    if rng.random() >= config.change_prob:
        return level
    n = len(config.severity_probs)
    if config.mutation == "resample":
        return int(rng.choice(n, p=config.severity_probs))
    others = [k for k in range(n) if k != level]
    return int(others[rng.integers(len(others))])


def generate_synthetic(config: SyntheticConfig) -> list:
    """Multi-visit patients whose findings drift between visits.

    Each finding has a severity level per visit. Level ``k > 0`` adds ``k``
    times a fixed localized pattern to the image and selects the level's
    template sentence; level 0 selects the "normal" sentence. Between
    consecutive visits each finding changes with probability
    ``change_prob``. Ground-truth labels are the names of findings with a
    nonzero level.
    """
    rng = np.random.default_rng(config.seed)
    n_sev = len(config.severity_probs)
    records = []
    width = max(4, len(str(config.n_patients)))
    for p in range(config.n_patients):
        pid = f"P{p:0{width}d}"
        anatomy = patient_anatomy(config, p)
        n_visits = int(rng.choice(len(config.visit_probs), p=config.visit_probs)) + 1
        levels = [int(rng.choice(n_sev, p=config.severity_probs)) for _ in config.findings]
        for v in range(n_visits):
            if v > 0:
                levels = [_mutate(config, lvl, rng) for lvl in levels]
            noise_rng = np.random.default_rng([config.seed, 2, p, v])
            image = render_image(config, anatomy, levels, noise_rng)
            labels = tuple(f.name for f, lvl in zip(config.findings, levels) if lvl > 0)
            records.append(ExamRecord(
                exam_id=f"{pid}V{v}", patient_id=pid, visit=v, image=image,
                report=render_report(config, levels), labels=labels))
    return records


def sentences(report: Sequence[str]) -> list:
    out, cur = [], []
    for tok in report:
        cur.append(tok)
        if tok == ".":
            out.append(" ".join(cur))
            cur = []
    if cur:
        out.append(" ".join(cur))
    return out


def labels_from_report(report: Sequence[str], findings: Sequence[Finding] = DEFAULT_FINDINGS) -> tuple:
    """Finding names whose abnormal-level sentence appears in ``report``.

    This is the synthetic stand-in for an external label extractor: it only
    recognizes the template sentences of ``findings``.
    """
    present = set(sentences(report))
    out = []
    for f in findings:
        if any(s in present for s in f.sentences[1:]):
            out.append(f.name)
    return tuple(out)


def report_statistics(records: Sequence[ExamRecord]) -> dict:
    lengths = np.array([len(r.report) for r in records])
    visits = Counter(len(v) for v in records_by_patient(records).values())
    return {
        "exams": len(records),
        "patients": len(records_by_patient(records)),
        "report_length_max": int(lengths.max()) if len(lengths) else 0,
        "report_length_median": float(np.median(lengths)) if len(lengths) else 0.0,
        "report_length_mean": float(lengths.mean()) if len(lengths) else 0.0,
        "visit_histogram": {str(k): visits[k] for k in sorted(visits)},
    }


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

MANIFEST_VERSION = 1


def save_manifest(records: Sequence[ExamRecord], path) -> Path:
    """Write a JSON-lines manifest plus one ``.npy`` image payload per exam."""
    path = Path(path)
    img_dir = path.parent / (path.stem + "_images")
    img_dir.mkdir(parents=True, exist_ok=True)
    seen = set()
    lines = [json.dumps({"format": "deltanet-manifest", "version": MANIFEST_VERSION})]
    for r in records:
        if r.exam_id in seen:
            raise ManifestError(f"duplicate exam id {r.exam_id}")
        seen.add(r.exam_id)
        rel = f"{img_dir.name}/{r.exam_id}.npy"
        np.save(path.parent / rel, np.asarray(r.image), allow_pickle=False)
        entry = {"exam_id": r.exam_id, "patient_id": r.patient_id, "visit": int(r.visit),
                 "image": rel, "report": " ".join(r.report)}
        if r.labels is not None:
            entry["labels"] = list(r.labels)
        lines.append(json.dumps(entry))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    seen = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed line ({exc.msg})") from None
            if not isinstance(entry, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            if "format" in entry:
                if entry.get("version") != MANIFEST_VERSION:
                    raise ManifestError(f"{path}:{lineno}: unsupported version {entry.get('version')}")
                continue
            missing = [k for k in ("exam_id", "patient_id", "visit", "image", "report") if k not in entry]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            eid = str(entry["exam_id"])
            if eid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate exam id {eid}")
            seen.add(eid)
            img_path = path.parent / entry["image"]
            if not img_path.exists():
                raise ManifestError(f"{path}:{lineno}: image payload for exam {eid} not found ({entry['image']})")
            image = np.load(img_path, allow_pickle=False)
            labels = entry.get("labels")
            records.append(ExamRecord(
                exam_id=eid, patient_id=str(entry["patient_id"]), visit=int(entry["visit"]),
                image=image, report=entry["report"].split(),
                labels=tuple(labels) if labels is not None else None))
    return records
