"""Pipeline contracts: label normalization, aggregation, dedup, splits,
tokenization, and the synthetic generator."""

import numpy as np
import pytest

from dplora import corpus as C
from dplora.errors import ContractError, DataError


def rec(pid="p1", rid="r1", findings="lungs are clear.", impression="normal.",
        labels=None):
    return C.ReportRecord(patient_id=pid, report_id=rid, findings=findings,
                          impression=impression,
                          raw_labels=labels if labels is not None else [0] * 14)


class TestNormalizeLabels:
    def test_paper_mapping(self):
        np.testing.assert_array_equal(C.normalize_labels([1, 0, -1, 2]), [1, 0, 0, 0])

    def test_all_present(self):
        np.testing.assert_array_equal(C.normalize_labels([1] * 5, ), [1] * 5)

    def test_exhaustive_single_slot(self):
        want = {1: 1, 0: 0, -1: 0, 2: 0}
        for code, bit in want.items():
            assert C.normalize_labels([code])[0] == bit

    def test_invalid_code_names_position(self):
        with pytest.raises(DataError, match="position 2"):
            C.normalize_labels([0, 1, 3, 0])

    def test_idempotent_on_output_range(self):
        out = C.normalize_labels([1, 0, -1, 2])
        np.testing.assert_array_equal(C.normalize_labels(out.tolist()), out)


class TestAggregate:
    def test_single_record_unchanged(self):
        r = rec(findings="f text.", impression="i text.")
        f, i = C.aggregate_patient_text([r])
        assert (f, i) == ("f text.", "i text.")

    def test_two_records_sorted_by_report_id(self):
        r2 = rec(rid="r2", findings="second f.", impression="second i.")
        r1 = rec(rid="r1", findings="first f.", impression="first i.")
        f, i = C.aggregate_patient_text([r2, r1])
        assert f == "first f. | second f."
        assert i == "first i. | second i."

    def test_idempotent_on_single_aggregate(self):
        r = rec(findings="only f.", impression="only i.")
        f1, i1 = C.aggregate_patient_text([r])
        again = rec(findings=f1, impression=i1)
        assert C.aggregate_patient_text([again]) == (f1, i1)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            C.aggregate_patient_text([])


class TestDedup:
    def test_identity_without_duplicates(self):
        rs = [rec(rid="r1"), rec(rid="r2", findings="other text.")]
        assert C.dedup(rs) == sorted(rs, key=lambda r: r.report_id)

    def test_exact_duplicates_collapse_to_earliest(self):
        a = rec(rid="r5")
        b = rec(rid="r2")
        out = C.dedup([a, b])
        assert [r.report_id for r in out] == ["r2"]

    def test_shuffle_invariant_survivors(self, rng):
        rs = [rec(rid=f"r{i}", findings=f"text {i % 3}.") for i in range(9)]
        base = {r.report_id for r in C.dedup(rs)}
        for _ in range(10):
            perm = [rs[i] for i in rng.permutation(len(rs))]
            assert {r.report_id for r in C.dedup(perm)} == base


class TestSplits:
    def _records(self, n_patients, rng):
        out = []
        for p in range(n_patients):
            for j in range(int(rng.integers(1, 4))):
                out.append(rec(pid=f"p{p}", rid=f"p{p}-r{j}"))
        return out

    def test_paper_ratios(self, rng):
        records = self._records(100, rng)
        m = C.split_by_patient(records, (0.8, 0.1, 0.1), seed=3)
        assert set(m.splits) == {"train", "val", "test"}
        counts = {s: sum(1 for v in m.patient_split.values() if v == s)
                  for s in m.splits}
        assert counts["train"] == 80 and counts["val"] == 10 and counts["test"] == 10

    def test_single_patient_train_only(self):
        m = C.split_by_patient([rec()], (1.0,), seed=0)
        assert m.splits == {"train": ["r1"]}

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ContractError):
            C.split_by_patient([rec()], (0.5, 0.4), seed=0)

    def test_fewer_patients_than_splits(self):
        with pytest.raises(DataError):
            C.split_by_patient([rec()], (0.5, 0.3, 0.2), seed=0)

    def test_disjointness_brute_force_1000(self, rng):
        for trial in range(1000):
            n = int(rng.integers(3, 30))
            records = self._records(n, rng)
            m = C.split_by_patient(records, (0.6, 0.2, 0.2), seed=trial)
            by_split = {}
            for pid, split in m.patient_split.items():
                by_split.setdefault(split, set()).add(pid)
            names = sorted(by_split)
            for i in range(len(names)):
                for j in range(i + 1, len(names)):
                    assert not (by_split[names[i]] & by_split[names[j]])
            # every report lives in its patient's split
            by_id = {r.report_id: r for r in records}
            for split, rids in m.splits.items():
                for rid in rids:
                    assert m.patient_split[by_id[rid].patient_id] == split

    def test_seed_determinism(self, rng):
        records = self._records(40, rng)
        a = C.split_by_patient(records, (0.8, 0.2), seed=9)
        b = C.split_by_patient(records, (0.8, 0.2), seed=9)
        assert a == b
        c = C.split_by_patient(records, (0.8, 0.2), seed=10)
        assert a != c

    def test_manifest_round_trip(self, tmp_path, rng):
        m = C.split_by_patient(self._records(20, rng), (0.7, 0.3), seed=1)
        m.save(tmp_path / "s.json")
        assert C.SplitManifest.load(tmp_path / "s.json") == m


class TestVocabAndTokenize:
    def test_tokenize_rule(self):
        assert C.tokenize("Mild cardiomegaly.") == ["mild", "cardiomegaly", "."]

    def test_encode_prepends_cls(self):
        v = C.build_vocab(["mild cardiomegaly."], max_vocab=10)
        ids = v.encode("Mild cardiomegaly.", max_seq_len=8)
        assert ids[0] == C.CLS_ID
        assert ids[1] == v.lookup["mild"]

    def test_oov_maps_to_unk(self):
        v = C.build_vocab(["alpha beta"], max_vocab=10)
        ids = v.encode("alpha gamma", max_seq_len=8)
        assert ids[2] == C.UNK_ID

    def test_truncation(self):
        v = C.build_vocab(["a b c d e f"], max_vocab=16)
        assert len(v.encode("a b c d e f", max_seq_len=4)) == 4

    def test_frequency_then_lexicographic(self):
        v = C.build_vocab(["b b a a c"], max_vocab=6)
        # a and b tie on frequency 2 -> lexicographic; c follows
        assert v.tokens[4:] == ["a", "b"]  # budget of 2 beyond reserved

    def test_double_encode_stable(self):
        v = C.build_vocab(["alpha beta gamma"], max_vocab=10)
        a = v.encode("alpha beta gamma", 16)
        assert a == v.encode("alpha beta gamma", 16)

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            C.build_vocab([], max_vocab=10)

    def test_max_vocab_floor(self):
        with pytest.raises(ContractError):
            C.build_vocab(["a"], max_vocab=4)

    def test_save_load_round_trip(self, tmp_path):
        v = C.build_vocab(["some findings text."], max_vocab=12)
        v.save(tmp_path / "v.txt")
        v2 = C.Vocabulary.load(tmp_path / "v.txt")
        assert v2.tokens == v.tokens and v2.content_hash() == v.content_hash()


class TestGenerator:
    def test_seed_determinism_bytes(self, tmp_path):
        a = C.generate_synthetic_corpus("mimic14", 20, seed=5)
        b = C.generate_synthetic_corpus("mimic14", 20, seed=5)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        C.write_records(pa, a)
        C.write_records(pb, b)
        assert pa.read_bytes() == pb.read_bytes()

    def test_schema_label_lengths(self):
        for schema, n in (("mimic14", 14), ("ct18", 18)):
            for r in C.generate_synthetic_corpus(schema, 12, seed=0):
                assert len(r.raw_labels) == n

    def test_ct18_codes_binary(self):
        for r in C.generate_synthetic_corpus("ct18", 15, seed=2):
            assert set(r.raw_labels) <= {0, 1}

    def test_mimic14_uses_uncertain_and_nodata(self):
        codes = set()
        for r in C.generate_synthetic_corpus("mimic14", 60, seed=3):
            codes.update(r.raw_labels)
        assert codes == {1, 0, -1, 2}

    def test_min_patients(self):
        with pytest.raises(ContractError):
            C.generate_synthetic_corpus("mimic14", 5, seed=0)

    def test_reports_per_patient_one_to_three(self):
        records = C.generate_synthetic_corpus("mimic14", 50, seed=1)
        per = {}
        for r in records:
            per[r.patient_id] = per.get(r.patient_id, 0) + 1
        assert set(per.values()) <= {1, 2, 3} and len(per) == 50

    def test_label_marginals_near_prevalence(self):
        records = C.generate_synthetic_corpus("mimic14", 2000, seed=11)
        y = np.stack([C.normalize_labels(r.raw_labels) for r in records])
        got = y.mean(axis=0)
        want = C.default_prevalences("mimic14")
        assert np.max(np.abs(got - want)) < 0.03

    def test_active_labels_inject_phrases(self):
        records = C.generate_synthetic_corpus("mimic14", 30, seed=4)
        labels = C.schema_labels("mimic14")
        for r in records[:50]:
            for li, code in enumerate(r.raw_labels):
                if code == 1 and labels[li] != "no_finding":
                    pool = C._PHRASES[labels[li]]
                    assert any(p in r.findings for p in pool)

    def test_unique_report_ids(self):
        records = C.generate_synthetic_corpus("mimic14", 40, seed=6)
        rids = [r.report_id for r in records]
        assert len(rids) == len(set(rids))

    def test_learnability_gate(self):
        records = C.generate_synthetic_corpus("mimic14", 300, seed=7)
        manifest = C.split_by_patient(records, (0.8, 0.1, 0.1), seed=1)
        f1 = C.learnability_check(records, manifest)
        assert f1 >= 0.95

    def test_record_json_round_trip(self):
        r = C.generate_synthetic_corpus("mimic14", 10, seed=0)[0]
        assert C.ReportRecord.from_json(r.to_json()) == r


class TestEncodeRecords:
    def test_matrix_shapes_and_padding(self):
        records = C.generate_synthetic_corpus("mimic14", 12, seed=0)
        v = C.build_vocab((r.text() for r in records), 2048)
        ids, targets = C.encode_records(v, records, max_seq_len=64)
        assert ids.shape == (len(records), 64)
        assert targets.shape == (len(records), 14)
        assert np.all(ids[:, 0] == C.CLS_ID)
        assert set(np.unique(targets)) <= {0.0, 1.0}
