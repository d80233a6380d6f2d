"""ICD parsing, label-space selection against a brute-force oracle, splits
and the synthetic generator."""

import numpy as np
import pytest

from poolbert import data
from poolbert.errors import DataError, ParameterError


def rec(visit_id, code, symptoms="s", anamnesis="a"):
    return data.VisitRecord(
        patient_id="p" + visit_id,
        visit_id=visit_id,
        date="2019-01-01",
        symptoms_text=symptoms,
        anamnesis_text=anamnesis,
        icd_code=code,
    )


class TestAssembleText:
    def test_both_fields(self):
        assert data.assemble_text(rec("v1", "J06", "fever", "smoker")) == \
            "fever smoker"

    def test_empty_symptoms_skipped(self):
        assert data.assemble_text(rec("v1", "J06", "", "smoker")) == "smoker"

    def test_both_empty(self):
        assert data.assemble_text(rec("v1", "J06", "", "")) == ""


class TestParseIcd:
    def test_dotted(self):
        assert data.parse_icd("D30.01") == ("D30", "01")

    def test_root_only(self):
        assert data.parse_icd("J06") == ("J06", None)

    @pytest.mark.parametrize("bad", ["30.1", "d30", "D3", "D300", "D30.",
                                     "D30.12345", ""])
    def test_malformed(self, bad):
        with pytest.raises(DataError):
            data.parse_icd(bad)

    def test_format_round_trip(self):
        for code in ("J06", "D30.01", "E11.9", "M42.1X"):
            assert data.format_icd(*data.parse_icd(code)) == code


def records_from_counts(counts):
    out = []
    i = 0
    for code, n in counts.items():
        for _ in range(n):
            out.append(rec(f"v{i}", code))
            i += 1
    return out


class TestBuildLabelSpace:
    def test_coverage_prefix(self):
        records = records_from_counts({"A01": 50, "B02": 30, "C03": 15, "D04": 5})
        space = data.build_label_space(records, coverage=0.95)
        assert space.codes == ["A01", "B02", "C03"]
        assert space.coverage == pytest.approx(0.95)

    def test_k_larger_than_distinct(self):
        records = records_from_counts({"A01": 3, "B02": 1})
        space = data.build_label_space(records, k=10)
        assert space.codes == ["A01", "B02"]
        assert space.coverage == 1.0

    def test_tie_break_lexicographic(self):
        records = records_from_counts({"Z99": 5, "A01": 5, "M10": 5})
        space = data.build_label_space(records, k=2)
        assert space.codes == ["A01", "M10"]

    def test_unreachable_coverage(self):
        records = records_from_counts({"A01": 1})
        with pytest.raises(DataError):
            data.build_label_space(records, coverage=1.1)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            n_codes = int(rng.integers(1, 40))
            counts = {}
            for j in range(n_codes):
                counts[f"{chr(65 + j % 26)}{j:02d}"[:3]] = int(rng.integers(1, 50))
            records = records_from_counts(counts)
            total = len(records)
            if rng.random() < 0.5:
                k = int(rng.integers(1, n_codes + 3))
                space = data.build_label_space(records, k=k)
                # oracle: full sort then prefix
                ranked = sorted(counts, key=lambda c: (-counts[c], c))
                assert space.codes == ranked[:k]
            else:
                target = float(rng.uniform(0.1, 1.0))
                space = data.build_label_space(records, coverage=target)
                ranked = sorted(counts, key=lambda c: (-counts[c], c))
                run, expect = 0, []
                for c in ranked:
                    expect.append(c)
                    run += counts[c]
                    if run / total >= target:
                        break
                assert space.codes == expect

    def test_extended_mode_expands_roots(self):
        counts = {
            "J06.9": 40, "J06.0": 25, "J06": 10, "I11.0": 20, "I11": 5,
            "R99": 1,
        }
        records = records_from_counts(counts)
        space = data.build_label_space(
            records, mode="extended", k=4, root_coverage=0.99
        )
        # roots J06 (75) and I11 (25) cover 99%; R99 never enters
        assert space.mode == "extended"
        assert space.codes == ["J06.9", "J06.0", "I11.0", "J06"]

    def test_excluded_records_are_outside(self):
        records = records_from_counts({"A01": 10, "B02": 2, "C03": 1})
        space = data.build_label_space(records, k=2)
        inside, excluded = data.partition_by_space(records, space)
        assert len(inside) == 12 and len(excluded) == 1
        for r in excluded:
            root, _ = data.parse_icd(r.icd_code)
            assert root not in space


class TestSplit:
    def test_sizes_disjoint_union(self):
        records = [rec(f"v{i}", "A01") for i in range(100)]
        train, val = data.split_train_val(records, 0.8, seed=42)
        assert len(train) == 80 and len(val) == 20
        ids = {r.visit_id for r in train} | {r.visit_id for r in val}
        assert len(ids) == 100

    def test_deterministic(self):
        records = [rec(f"v{i}", "A01") for i in range(50)]
        a = data.split_train_val(records, 0.8, seed=7)
        b = data.split_train_val(records, 0.8, seed=7)
        assert [r.visit_id for r in a[0]] == [r.visit_id for r in b[0]]

    def test_rounding(self):
        records = [rec(f"v{i}", "A01") for i in range(5)]
        train, val = data.split_train_val(records, 0.8, seed=0)
        assert len(train) == 4 and len(val) == 1

    def test_bad_ratio(self):
        with pytest.raises(ParameterError):
            data.split_train_val([rec("v0", "A01")], 1.0, seed=0)


class TestSynthetic:
    def test_uniform_when_skew_zero(self):
        spec = data.SyntheticSpec(num_classes=4, train_size=10000, test_size=10,
                                  skew=0.0, seed=1)
        ds = data.generate_synthetic(spec)
        counts = np.zeros(4)
        for r in ds.train:
            counts[int(r.icd_code[1:])] += 1
        # binomial tolerance: expected 2500 each, sd ~ 43
        assert np.abs(counts - 2500).max() < 5 * np.sqrt(10000 * 0.25 * 0.75)

    def test_keywords_only_from_own_class(self):
        spec = data.SyntheticSpec(num_classes=8, train_size=300, test_size=100,
                                  seed=3)
        ds = data.generate_synthetic(spec)
        for r in ds.train + ds.test:
            cls = int(r.icd_code[1:])
            words = set(r.symptoms_text.split())
            assert words & set(ds.class_keywords[cls])
            for other, pool in enumerate(ds.class_keywords):
                if other != cls:
                    assert not words & set(pool)

    def test_deterministic_output(self):
        spec = data.SyntheticSpec(num_classes=5, train_size=50, test_size=20,
                                  seed=9)
        a = data.generate_synthetic(spec)
        b = data.generate_synthetic(spec)
        assert a.train == b.train and a.test == b.test

    def test_keyword_rule_is_perfect(self):
        spec = data.SyntheticSpec(num_classes=8, train_size=500, test_size=100,
                                  seed=42)
        ds = data.generate_synthetic(spec)
        for r in ds.train:
            text = data.assemble_text(r)
            assert data.keyword_class(text, ds.class_keywords) == \
                int(r.icd_code[1:])

    def test_skew_orders_class_frequencies(self):
        spec = data.SyntheticSpec(num_classes=6, train_size=8000, test_size=10,
                                  skew=1.2, seed=11)
        ds = data.generate_synthetic(spec)
        counts = np.zeros(6)
        for r in ds.train:
            counts[int(r.icd_code[1:])] += 1
        assert counts[0] > counts[2] > counts[5]

    def test_probs_sum_to_one(self):
        spec = data.SyntheticSpec(num_classes=10, skew=1.7)
        assert np.isclose(sum(spec.class_probs()), 1.0)

    def test_noise_shift_changes_test_noise_only(self):
        spec = data.SyntheticSpec(num_classes=4, train_size=40, test_size=40,
                                  seed=5, test_noise_shift=True)
        ds = data.generate_synthetic(spec)
        noise = set(ds.noise_vocab)
        test_words = set()
        for r in ds.test:
            test_words |= set(r.anamnesis_text.split())
        assert not test_words & noise


class TestJsonl:
    def test_round_trip(self, tmp_path):
        spec = data.SyntheticSpec(num_classes=3, train_size=20, test_size=5,
                                  seed=2)
        ds = data.generate_synthetic(spec)
        path = tmp_path / "train.jsonl"
        data.write_records(ds.train, path)
        loaded = data.read_records(path)
        assert loaded == ds.train

    def test_duplicate_visit_id_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        data.write_records([rec("v1", "A01")], path)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(open(path).readline())
        with pytest.raises(DataError):
            data.read_records(path)

    def test_malformed_line_names_position(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"patient_id": "p"}\n', encoding="utf-8")
        with pytest.raises(Exception) as err:
            data.read_records(path)
        assert ":1:" in str(err.value)


class TestLabelSpaceIO:
    def test_save_load(self, tmp_path):
        space = data.LabelSpace(codes=["J06", "I11", "E11"], mode="root",
                                coverage=0.9)
        path = tmp_path / "labels.txt"
        space.save(path)
        loaded = data.LabelSpace.load(path)
        assert loaded.codes == space.codes
        assert loaded.mode == "root"

    def test_mode_inference_extended(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("J06.9\nJ06\n", encoding="utf-8")
        assert data.LabelSpace.load(path).mode == "extended"
