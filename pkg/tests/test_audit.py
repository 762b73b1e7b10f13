import functools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from anypredict.audit import (
    audit_dataset,
    audit_sample,
    edit_distance,
    ned,
    normalize_answer,
    write_audit_summary,
    write_reports,
)
from anypredict.consolidate import consolidate_row
from anypredict.errors import ProvenanceError
from anypredict.tabular import CellValue, ColumnSchema, TableDataset


@functools.cache
def naive_edit_distance(a: str, b: str) -> int:
    """Textbook recursive definition; the oracle for the DP implementation."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        naive_edit_distance(a[1:], b) + 1,
        naive_edit_distance(a, b[1:]) + 1,
        naive_edit_distance(a[1:], b[1:]) + (a[0] != b[0]),
    )


class TestEditDistance:
    def test_insertions_only(self):
        assert edit_distance("", "abc") == 3

    def test_kitten_sitting(self):
        assert edit_distance("kitten", "sitting") == 3
        assert naive_edit_distance("kitten", "sitting") == 3

    def test_identity(self):
        for s in ("", "a", "same string"):
            assert edit_distance(s, s) == 0

    @given(st.text(alphabet="abcd", max_size=8), st.text(alphabet="abcd", max_size=8))
    def test_matches_recursive_oracle(self, a, b):
        assert edit_distance(a, b) == naive_edit_distance(a, b)


class TestNed:
    def test_equal_strings(self):
        assert ned("60", "60") == 1.0

    def test_three_point_zero_vs_three(self):
        assert ned("3.0", "3") == pytest.approx(1 - 2 / 3)

    def test_both_empty(self):
        assert ned("", "") == 1.0

    @given(st.text(alphabet="abcd", max_size=8), st.text(alphabet="abcd", max_size=8))
    def test_symmetric_bounded_identity(self, a, b):
        value = ned(a, b)
        assert 0.0 <= value <= 1.0
        assert value == ned(b, a)
        assert (value == 1.0) == (a == b)

    @given(st.text(alphabet="abcd", min_size=1, max_size=8), st.integers(0, 7), st.sampled_from("abcd"))
    def test_single_edit_decreases_at_most_one_step(self, a, pos, ch):
        pos = pos % len(a)
        b = a[:pos] + ch + a[pos + 1 :]
        step = 1 / max(len(a), len(b))
        assert ned(a, b) >= 1.0 - step - 1e-12


class TestNormalizeAnswer:
    def test_lowercase_strip(self):
        assert normalize_answer("  Paclitaxel. ") == "paclitaxel"

    def test_inner_decimal_point_preserved(self):
        assert normalize_answer("3.0.") == "3.0"

    def test_whitespace_collapsed(self):
        assert normalize_answer("left   side") == "left side"


def audit_fixture():
    schema = (
        ColumnSchema("age", "numerical", "age in years"),
        ColumnSchema("post-menopause", "binary", "post-menopausal"),
        ColumnSchema("tumor size", "numerical", "tumor size in cm"),
    )
    rows = (
        (CellValue.numerical(18.0, "18"), CellValue.binary(True), CellValue.numerical(3.0, "3.0")),
        (CellValue.numerical(64.0, "64"), CellValue.binary(False), CellValue.numerical(1.2, "1.2")),
    )
    return TableDataset("bc", schema, rows, labels=(0, 1), task_id="t")


class TestAuditSample:
    def test_faithful_description_passes(self, mock_gateway):
        ds = audit_fixture()
        sample = consolidate_row(ds, 0, mock_gateway)
        audited, report = audit_sample(sample, ds, mock_gateway)
        assert audited.audit_status == "passed"
        assert report.mned == 1.0
        assert report.missed == ()
        assert report.rounds_used == 0
        assert all(f.ned == 1.0 for f in report.per_feature)

    def test_binary_false_not_probed(self, mock_gateway):
        ds = audit_fixture()
        sample = consolidate_row(ds, 1, mock_gateway)
        _, report = audit_sample(sample, ds, mock_gateway)
        assert [f.column for f in report.per_feature] == ["age", "tumor size"]

    def test_lossy_mock_corrected_in_one_round(self, lossy_gateway):
        ds = audit_fixture()
        sample = consolidate_row(ds, 0, lossy_gateway)
        assert "tumor size" not in sample.text
        audited, report = audit_sample(sample, ds, lossy_gateway, threshold=0.5, max_rounds=1)
        assert audited.audit_status == "corrected"
        assert report.rounds_used == 1
        assert "3.0" in audited.text
        assert report.missed == ()
        initial_missed = [f.column for f in report.per_feature_initial if f.ned < 0.5]
        assert initial_missed == ["tumor size"]

    def test_max_rounds_zero_fails(self, lossy_gateway):
        ds = audit_fixture()
        sample = consolidate_row(ds, 0, lossy_gateway)
        audited, report = audit_sample(sample, ds, lossy_gateway, threshold=0.5, max_rounds=0)
        assert audited.audit_status == "failed"
        assert report.missed != ()

    def test_unresolvable_provenance(self, mock_gateway):
        ds = audit_fixture()
        other = TableDataset("other", ds.schema, ds.rows, labels=ds.labels)
        sample = consolidate_row(ds, 0, mock_gateway)
        with pytest.raises(ProvenanceError):
            audit_sample(sample, other, mock_gateway)

    def test_source_row_not_mutated(self, lossy_gateway):
        ds = audit_fixture()
        before = ds.rows[0]
        sample = consolidate_row(ds, 0, lossy_gateway)
        audit_sample(sample, ds, lossy_gateway)
        assert ds.rows[0] == before

    def test_report_mean_invariant(self, lossy_gateway):
        ds = audit_fixture()
        sample = consolidate_row(ds, 0, lossy_gateway)
        _, report = audit_sample(sample, ds, lossy_gateway, max_rounds=0)
        mean = sum(f.ned for f in report.per_feature) / len(report.per_feature)
        assert report.mned == pytest.approx(mean)
        assert set(report.missed) <= {f.column for f in report.per_feature}


class TestAuditDataset:
    def test_all_pass_before_equals_after(self, mock_gateway):
        ds = audit_fixture()
        samples = [consolidate_row(ds, i, mock_gateway) for i in range(len(ds))]
        outcome = audit_dataset(samples, ds, mock_gateway)
        assert outcome.mned_before == outcome.mned_after == 1.0
        assert outcome.n_failed == 0

    def test_lossy_corpus_improves(self, lossy_gateway):
        ds = audit_fixture()
        samples = [consolidate_row(ds, i, lossy_gateway) for i in range(len(ds))]
        outcome = audit_dataset(samples, ds, lossy_gateway, max_rounds=2)
        assert outcome.mned_after > outcome.mned_before
        assert all(s.audit_status == "corrected" for s in outcome.samples)

    def test_monotone_improvement_even_without_full_recovery(self, lossy_gateway):
        ds = audit_fixture()
        samples = [consolidate_row(ds, i, lossy_gateway) for i in range(len(ds))]
        no_rounds = audit_dataset(samples, ds, lossy_gateway, max_rounds=0)
        one_round = audit_dataset(samples, ds, lossy_gateway, max_rounds=1)
        assert one_round.mned_after >= no_rounds.mned_after

    def test_per_sample_average_mode(self, lossy_gateway):
        ds = audit_fixture()
        samples = [consolidate_row(ds, i, lossy_gateway) for i in range(len(ds))]
        outcome = audit_dataset(samples, ds, lossy_gateway, per_sample_average=True)
        assert 0.0 <= outcome.mned_before <= outcome.mned_after <= 1.0

    def test_foreign_sample_rejected(self, mock_gateway):
        ds = audit_fixture()
        other = TableDataset("other", ds.schema, ds.rows, labels=ds.labels)
        sample = consolidate_row(other, 0, mock_gateway)
        with pytest.raises(ProvenanceError):
            audit_dataset([sample], ds, mock_gateway)

    def test_parallel_equals_serial(self, lossy_gateway):
        ds = audit_fixture()
        samples = [consolidate_row(ds, i, lossy_gateway) for i in range(len(ds))]
        a = audit_dataset(samples, ds, lossy_gateway, parallelism=1)
        b = audit_dataset(samples, ds, lossy_gateway, parallelism=4)
        assert a.samples == b.samples
        assert a.mned_before == b.mned_before
        assert a.mned_after == b.mned_after

    def test_artifact_writers(self, tmp_path, lossy_gateway):
        ds = audit_fixture()
        samples = [consolidate_row(ds, i, lossy_gateway) for i in range(len(ds))]
        outcome = audit_dataset(samples, ds, lossy_gateway)
        write_reports(outcome.reports, tmp_path / "reports.jsonl")
        write_audit_summary(
            [(ds.id, outcome.mned_before, outcome.mned_after, outcome.n_failed)],
            tmp_path / "summary.csv",
        )
        lines = (tmp_path / "reports.jsonl").read_text().splitlines()
        assert len(lines) == len(samples)
        header = (tmp_path / "summary.csv").read_text().splitlines()[0]
        assert header == "dataset_id,mned_before,mned_after,n_failed"
