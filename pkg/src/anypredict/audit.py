"""Fidelity audit of generated descriptions: QA probing, normalized edit
distance scoring, and the re-prompt correction loop.

Every non-omitted feature of the source row is probed against the generated
text. Categorical/numerical/text features are scored by normalized edit
distance between the probed answer and the source cell text; binary features
score 1 when the probe answers "yes" and 0 otherwise. Features scoring below
the threshold are re-injected via a correction prompt, up to ``max_rounds``
times.
"""

from __future__ import annotations

import csv
import json
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .consolidate import ConsolidatedSample
from .errors import ProvenanceError
from .gateway import Gateway, build_prompt
from .tabular import CellValue, ColumnSchema, TableDataset, linearize, render_schema_definition


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit-cost insert/delete/substitute."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        append = current.append
        for j, cb in enumerate(b, 1):
            cost_sub = previous[j - 1] + (ca != cb)
            cost_del = previous[j] + 1
            cost_ins = current[j - 1] + 1
            append(min(cost_sub, cost_del, cost_ins))
        previous = current
    return previous[-1]


def ned(a: str, b: str) -> float:
    """Normalized edit distance similarity: 1 - D / max(len(a), len(b)).

    Two empty strings are a perfect match (the 0/0 case is defined as 1).
    """
    if not a and not b:
        return 1.0
    return 1.0 - edit_distance(a, b) / max(len(a), len(b))


_STRIP_CHARS = string.punctuation + string.whitespace


def normalize_answer(text: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding punctuation."""
    collapsed = " ".join(text.lower().split())
    return collapsed.strip(_STRIP_CHARS)


@dataclass(frozen=True)
class FeatureAudit:
    column: str
    probed_answer: str
    reference: str
    ned: float


@dataclass(frozen=True)
class AuditReport:
    """Per-feature probe scores for one sample, before and after correction."""

    provenance_key: str
    per_feature: tuple[FeatureAudit, ...]
    mned: float
    missed: tuple[str, ...]
    rounds_used: int
    per_feature_initial: tuple[FeatureAudit, ...]
    mned_initial: float


def _mean_ned(audits: Sequence[FeatureAudit]) -> float:
    if not audits:
        return 1.0
    return sum(f.ned for f in audits) / len(audits)


def _probed_features(
    schema: Sequence[ColumnSchema], row: Sequence[CellValue]
) -> list[tuple[ColumnSchema, CellValue]]:
    """Features that made it into the linearization (non-missing, binary-true)."""
    probed = []
    for col, cell in zip(schema, row):
        if cell.is_missing:
            continue
        if col.kind == "binary" and cell.value is not True:
            continue
        probed.append((col, cell))
    return probed


def _probe_one(text: str, col: ColumnSchema, cell: CellValue, gateway: Gateway) -> FeatureAudit:
    if col.kind == "binary":
        answer = gateway.complete_bundle(build_prompt("qa_binary", "", text, col.name))
        score = 1.0 if normalize_answer(answer) == "yes" else 0.0
        return FeatureAudit(col.name, answer, "yes", score)
    answer = gateway.complete_bundle(build_prompt("qa_categorical", "", text, col.name))
    reference = cell.render()
    score = ned(normalize_answer(answer), normalize_answer(reference))
    return FeatureAudit(col.name, answer, reference, score)


def audit_sample(
    sample: ConsolidatedSample,
    dataset: TableDataset,
    gateway: Gateway,
    threshold: float = 0.5,
    max_rounds: int = 2,
) -> tuple[ConsolidatedSample, AuditReport]:
    """Probe every feature of the sample's source row; correct on misses.

    Returns the sample with its final text and audit status (passed /
    corrected / failed) together with the audit report. The source row is
    never mutated.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    if max_rounds < 0:
        raise ValueError("max_rounds must be >= 0")
    prov = sample.provenance
    if prov.dataset_id != dataset.id or not 0 <= prov.row_index < len(dataset.rows):
        raise ProvenanceError(
            f"sample {prov.key} does not resolve to a row of dataset {dataset.id!r}"
        )
    row = dataset.rows[prov.row_index]
    probed = _probed_features(dataset.schema, row)
    schema_def = render_schema_definition(dataset.schema)

    def run_probes(text: str) -> tuple[FeatureAudit, ...]:
        return tuple(_probe_one(text, col, cell, gateway) for col, cell in probed)

    def misses(audits: Sequence[FeatureAudit]) -> tuple[str, ...]:
        return tuple(f.column for f in audits if f.ned < threshold)

    text = sample.text
    per_feature_initial = run_probes(text)
    per_feature = per_feature_initial
    missed = misses(per_feature)
    rounds = 0
    while missed and rounds < max_rounds:
        missed_set = set(missed)
        missed_cols = [col for col, _ in probed if col.name in missed_set]
        missed_cells = [cell for col, cell in probed if col.name in missed_set]
        correction = build_prompt(
            "correct", schema_def, text, linearize(missed_cols, missed_cells)
        )
        text = gateway.complete_bundle(correction)
        rounds += 1
        per_feature = run_probes(text)
        missed = misses(per_feature)

    if not missed:
        status = "passed" if rounds == 0 else "corrected"
    else:
        status = "failed"

    report = AuditReport(
        provenance_key=prov.key,
        per_feature=per_feature,
        mned=_mean_ned(per_feature),
        missed=missed,
        rounds_used=rounds,
        per_feature_initial=per_feature_initial,
        mned_initial=_mean_ned(per_feature_initial),
    )
    return replace(sample, text=text, audit_status=status), report


@dataclass
class AuditOutcome:
    """Dataset-level audit result: updated samples plus MNED before/after."""

    samples: list[ConsolidatedSample]
    reports: list[AuditReport]
    mned_before: float
    mned_after: float

    @property
    def n_failed(self) -> int:
        return sum(1 for s in self.samples if s.audit_status == "failed")


def audit_dataset(
    samples: Sequence[ConsolidatedSample],
    dataset: TableDataset,
    gateway: Gateway,
    threshold: float = 0.5,
    max_rounds: int = 2,
    parallelism: int = 1,
    per_sample_average: bool = False,
) -> AuditOutcome:
    """Audit every sample of one dataset and aggregate MNED before/after.

    By default the mean is taken per feature across the whole dataset;
    ``per_sample_average`` switches to averaging each sample's MNED first.
    """
    for sample in samples:
        if sample.provenance.dataset_id != dataset.id:
            raise ProvenanceError(
                f"sample {sample.provenance.key} does not belong to dataset {dataset.id!r}"
            )

    def work(sample: ConsolidatedSample) -> tuple[ConsolidatedSample, AuditReport]:
        return audit_sample(sample, dataset, gateway, threshold, max_rounds)

    if parallelism <= 1:
        results = [work(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, samples))

    audited = [s for s, _ in results]
    reports = [r for _, r in results]
    if per_sample_average:
        before = [r.mned_initial for r in reports]
        after = [r.mned for r in reports]
    else:
        before = [f.ned for r in reports for f in r.per_feature_initial]
        after = [f.ned for r in reports for f in r.per_feature]
    mned_before = sum(before) / len(before) if before else 1.0
    mned_after = sum(after) / len(after) if after else 1.0
    return AuditOutcome(audited, reports, mned_before, mned_after)


# -- artifacts -----------------------------------------------------------------


def _feature_to_obj(f: FeatureAudit) -> dict:
    return {"column": f.column, "probed_answer": f.probed_answer, "reference": f.reference, "ned": f.ned}


def write_reports(reports: Iterable[AuditReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            obj = {
                "provenance_key": r.provenance_key,
                "per_feature": [_feature_to_obj(f) for f in r.per_feature],
                "mned": r.mned,
                "missed": list(r.missed),
                "rounds_used": r.rounds_used,
                "per_feature_initial": [_feature_to_obj(f) for f in r.per_feature_initial],
                "mned_initial": r.mned_initial,
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def write_audit_summary(
    rows: Iterable[tuple[str, float, float, int]], path: str | Path
) -> None:
    """Dataset summary CSV: (dataset_id, mned_before, mned_after, n_failed)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset_id", "mned_before", "mned_after", "n_failed"])
        for dataset_id, before, after, n_failed in rows:
            writer.writerow([dataset_id, repr(before), repr(after), n_failed])
