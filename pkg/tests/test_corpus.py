import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltanet.corpus import (BOS, EOS, PAD, UNK, DEFAULT_FINDINGS, ExamRecord, ManifestError,
                             ReportTooLongError, SyntheticConfig, Vocabulary, build_vocabulary,
                             generate_synthetic, labels_from_report, load_manifest, pad_report,
                             patient_anatomy, records_by_patient, region_statistic,
                             report_statistics, save_manifest, split_patients)
from deltanet.corpus import sentences as split_sentences

# ---------------------------------------------------------------- vocabulary

def test_vocabulary_of_two_identical_reports():
    rep = "heart size is normal .".split()
    v = build_vocabulary([rep, rep])
    assert len(v) == 5 + 4
    assert v.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]


def test_vocabulary_ordering_and_threshold():
    v = build_vocabulary([["b", "a", "c"], ["a", "b"], ["a"]], min_freq=2)
    assert v.itos[4:] == ["a", "b"]  # frequency desc, then lexicographic
    assert v.encode(["c"]) == [BOS, UNK, EOS]


def test_vocabulary_rebuild_is_identical():
    reps = [["x", "y", "z"], ["y", "z"], ["q"]]
    assert build_vocabulary(reps).itos == build_vocabulary(reps).itos


def test_vocabulary_empty_corpus_is_an_error():
    with pytest.raises(ValueError):
        build_vocabulary([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(list("abcdefgh")), min_size=1, max_size=8), min_size=1, max_size=6))
def test_encode_decode_round_trip(reports):
    v = build_vocabulary(reports)
    for r in reports:
        ids = v.encode(r)
        assert ids[0] == BOS and ids[-1] == EOS
        assert v.decode(ids) == r
    assert v.decode(v.encode([])) == []
    assert v.encode([]) == [BOS, EOS]


def test_ids_round_trip_through_tokens():
    v = build_vocabulary([["a", "b", "c"]])
    body = [4, 6, 5]
    assert v.encode(v.decode([BOS] + body + [EOS])) == [BOS] + body + [EOS]


def test_unknown_word_decodes_to_unk_marker():
    v = build_vocabulary([["a"]])
    assert v.decode(v.encode(["zzz"])) == ["<unk>"]


def test_vocabulary_serialisation():
    v = build_vocabulary([["a", "b"]])
    assert Vocabulary.from_list(v.to_list()).itos == v.itos
    with pytest.raises(ValueError):
        Vocabulary.from_list(["a", "b"])


# ---------------------------------------------------------------- padding

def test_pad_report_examples():
    ids, mask = pad_report([1, 7, 2], 5)
    assert ids.tolist() == [1, 7, 2, PAD, PAD]
    assert mask.tolist() == [1, 1, 1, 0, 0]
    ids, mask = pad_report([1, 7, 2], 3)
    assert mask.tolist() == [1, 1, 1]
    with pytest.raises(ReportTooLongError, match="E17"):
        pad_report([1, 7, 7, 2], 3, exam_id="E17")


# ---------------------------------------------------------------- splits

def test_split_100_patients_is_70_10_20():
    tr, va, te = split_patients([f"p{i}" for i in range(100)], seed=0)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    assert not (tr & va or tr & te or va & te)
    assert tr | va | te == {f"p{i}" for i in range(100)}


def test_split_keeps_patients_whole_and_is_seeded(small_corpus):
    a = split_patients(small_corpus, seed=4)
    assert a == split_patients(small_corpus, seed=4)
    where = {}
    for name, part in zip("tvs", a):
        for p in part:
            where[p] = name
    for pid, visits in records_by_patient(small_corpus).items():
        assert len({where[r.patient_id] for r in visits}) == 1


def test_split_needs_ten_patients():
    with pytest.raises(ValueError):
        split_patients([f"p{i}" for i in range(9)])


# ---------------------------------------------------------------- generator

def test_generator_is_deterministic():
    cfg = SyntheticConfig(n_patients=20, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a == b


def test_zero_change_probability_freezes_reports():
    recs = generate_synthetic(SyntheticConfig(n_patients=40, change_prob=0.0, seed=1))
    for visits in records_by_patient(recs).values():
        assert all(v.report == visits[0].report for v in visits)


def test_equal_findings_and_no_noise_give_identical_images():
    recs = generate_synthetic(SyntheticConfig(n_patients=40, change_prob=0.0, noise=0.0, seed=2))
    multi = [v for v in records_by_patient(recs).values() if len(v) > 1]
    assert multi
    for visits in multi:
        for v in visits[1:]:
            assert np.array_equal(v.image, visits[0].image)


def shared_sentence_fraction(config):
    """Mean fraction of template sentences shared by visits 0 and 1."""
    recs = generate_synthetic(config)
    fracs = []
    for visits in records_by_patient(recs).values():
        a, b = split_sentences(visits[0].report), split_sentences(visits[1].report)
        fracs.append(np.mean([x == y for x, y in zip(a, b)]))
    return float(np.mean(fracs))


@pytest.mark.parametrize("p", [0.1, 0.3, 0.6])
def test_consecutive_overlap_is_one_minus_change_probability(p):
    cfg = SyntheticConfig(n_patients=1000, visit_probs=(0.0, 1.0), change_prob=p, seed=11)
    assert shared_sentence_fraction(cfg) == pytest.approx(1 - p, abs=0.02)


def test_full_resampling_reaches_chance_overlap():
    sev = (0.5, 0.3, 0.2)
    chance = sum(q * q for q in sev)  # two independent draws agree
    cfg = SyntheticConfig(n_patients=1000, visit_probs=(0.0, 1.0), change_prob=1.0,
                          mutation="resample", severity_probs=sev, seed=12)
    assert shared_sentence_fraction(cfg) == pytest.approx(chance, abs=0.02)


def test_report_mentions_finding_iff_label_present(small_corpus):
    for r in small_corpus:
        assert labels_from_report(r.report) == r.labels


@pytest.mark.parametrize("baseline", [0.0, 2.0])
def test_region_statistic_separates_present_and_absent(baseline):
    cfg = SyntheticConfig(n_patients=80, region_baseline=baseline, seed=6)
    recs = generate_synthetic(cfg)
    floor = 4 * cfg.noise  # several noise standard deviations
    for r in recs:
        anatomy = patient_anatomy(cfg, int(r.patient_id[1:]))
        for f in DEFAULT_FINDINGS:
            stat = region_statistic(r.image, anatomy, f)
            assert (stat > floor) == (f.name in r.labels), (r.exam_id, f.name, stat)


def test_region_baseline_hides_severity_in_a_single_image():
    """With a patient baseline the raw region mean overlaps across severity levels."""
    cfg = SyntheticConfig(n_patients=300, region_baseline=2.0, seed=7)
    recs = generate_synthetic(cfg)
    f = DEFAULT_FINDINGS[0]
    r0, c0, h, w = f.region
    by_level = {0: [], 1: [], 2: []}
    for r in recs:
        lvl = 0 if f.name not in r.labels else (1 if "mildly" in " ".join(r.report) else 2)
        by_level[lvl].append(r.image[0, r0:r0 + h, c0:c0 + w].mean())
    assert max(by_level[0]) > min(by_level[1]) and max(by_level[1]) > min(by_level[2])


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(change_prob=1.5)
    with pytest.raises(ValueError):
        SyntheticConfig(mutation="swap")
    with pytest.raises(ValueError):
        SyntheticConfig(visit_probs=(0.5, 0.2))
    with pytest.raises(ValueError):
        SyntheticConfig(region_baseline=-1.0)


def test_default_corpus_is_multi_visit_heavy():
    recs = generate_synthetic(SyntheticConfig(n_patients=300, seed=0))
    stats = report_statistics(recs)
    multi = sum(v for k, v in stats["visit_histogram"].items() if int(k) >= 2)
    assert multi / stats["patients"] >= 0.4


# ---------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path, small_corpus):
    path = save_manifest(small_corpus, tmp_path / "m.jsonl")
    assert load_manifest(path) == small_corpus


def test_manifest_rejects_duplicate_exam(tmp_path, small_corpus):
    path = save_manifest(small_corpus[:3], tmp_path / "m.jsonl")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)
    with pytest.raises(ManifestError):
        save_manifest([small_corpus[0], small_corpus[0]], tmp_path / "n.jsonl")


def test_manifest_missing_payload_names_exam(tmp_path, small_corpus):
    path = save_manifest(small_corpus[:2], tmp_path / "m.jsonl")
    victim = small_corpus[1].exam_id
    (tmp_path / "m_images" / f"{victim}.npy").unlink()
    with pytest.raises(ManifestError, match=victim):
        load_manifest(path)


def test_manifest_malformed_line_reports_line_number(tmp_path, small_corpus):
    path = save_manifest(small_corpus[:2], tmp_path / "m.jsonl")
    with path.open("a") as fh:
        fh.write("{not json\n")
    with pytest.raises(ManifestError, match=":4:"):
        load_manifest(path)


def test_manifest_is_line_delimited_json(tmp_path, small_corpus):
    path = save_manifest(small_corpus[:2], tmp_path / "m.jsonl")
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    assert rows[1]["report"] == " ".join(small_corpus[0].report)
    assert rows[1]["labels"] == list(small_corpus[0].labels)


def test_exam_record_equality_covers_image():
    a = ExamRecord("e", "p", 0, np.zeros((1, 2, 2)), ["x"])
    b = ExamRecord("e", "p", 0, np.ones((1, 2, 2)), ["x"])
    assert a != b
