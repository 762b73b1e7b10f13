"""Turn table rows into natural-language samples, with paraphrase augmentation.

Each row yields one primary description (paraphrase index 0) and, when
augmentation is on, up to five numbered paraphrases (indices 1..5). Per-row
failures are collected rather than fatal; a task run aborts only when more
than half of its rows fail.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    AnyPredictError,
    ConsolidationAborted,
    DatasetNotFound,
    EmptyLinearization,
    ParseFailure,
    RowFailure,
)
from .gateway import Gateway, build_prompt
from .tabular import TableDataset, Task, linearize, render_schema_definition

AUDIT_STATUSES = ("unaudited", "passed", "corrected", "failed")


@dataclass(frozen=True, order=True)
class Provenance:
    dataset_id: str
    row_index: int
    paraphrase_index: int = 0

    @property
    def key(self) -> str:
        return f"{self.dataset_id}:{self.row_index}:{self.paraphrase_index}"


@dataclass(frozen=True)
class PseudoLabel:
    value: int
    confidence: float

    def __post_init__(self):
        if self.value not in (0, 1):
            raise ValueError("pseudo-label value must be 0 or 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("pseudo-label confidence must be in [0, 1]")


@dataclass(frozen=True)
class ConsolidatedSample:
    """A natural-language description of one row, plus its training target."""

    text: str
    provenance: Provenance
    label: int | None = None
    pseudo_label: PseudoLabel | None = None
    audit_status: str = "unaudited"

    def __post_init__(self):
        if not self.text:
            raise ValueError("sample text must be non-empty")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.audit_status not in AUDIT_STATUSES:
            raise ValueError(f"unknown audit status {self.audit_status!r}")

    @property
    def target(self) -> int | None:
        """Training target: the label when present, else the pseudo-label."""
        if self.label is not None:
            return self.label
        if self.pseudo_label is not None:
            return self.pseudo_label.value
        return None


def consolidate_row(dataset: TableDataset, row_index: int, gateway: Gateway) -> ConsolidatedSample:
    """Describe one row through the gateway (paraphrase index 0, unaudited)."""
    schema_def = render_schema_definition(dataset.schema)
    body = linearize(dataset.schema, dataset.rows[row_index])
    if not body:
        raise EmptyLinearization(dataset.id, row_index)
    try:
        text = gateway.complete_bundle(build_prompt("describe", schema_def, body))
    except AnyPredictError as exc:
        raise RowFailure(dataset.id, row_index, exc) from exc
    return ConsolidatedSample(
        text=text,
        provenance=Provenance(dataset.id, row_index, 0),
        label=dataset.labels[row_index] if dataset.labels is not None else None,
    )


_ITEM_MARKER_RE = re.compile(r"^\s*\d+[.)]\s*", re.MULTILINE)


def parse_numbered_list(text: str) -> list[str]:
    """Items of a '1. ...' / '1) ...' list, trimmed, capped at five."""
    markers = list(_ITEM_MARKER_RE.finditer(text))
    items = []
    for i, marker in enumerate(markers):
        end = markers[i + 1].start() if i + 1 < len(markers) else len(text)
        item = text[marker.end() : end].strip()
        if item:
            items.append(item)
    return items[:5]


def augment_row(
    dataset: TableDataset, row_index: int, gateway: Gateway
) -> list[ConsolidatedSample]:
    """Paraphrase one row up to five ways (paraphrase indices 1..k)."""
    schema_def = render_schema_definition(dataset.schema)
    body = linearize(dataset.schema, dataset.rows[row_index])
    if not body:
        raise EmptyLinearization(dataset.id, row_index)
    try:
        completion = gateway.complete_bundle(build_prompt("paraphrase5", schema_def, body))
    except AnyPredictError as exc:
        raise RowFailure(dataset.id, row_index, exc) from exc
    items = parse_numbered_list(completion)
    if not items:
        raise ParseFailure(completion)
    label = dataset.labels[row_index] if dataset.labels is not None else None
    return [
        ConsolidatedSample(
            text=item,
            provenance=Provenance(dataset.id, row_index, i + 1),
            label=label,
        )
        for i, item in enumerate(items)
    ]


@dataclass(frozen=True)
class RowFailureRecord:
    dataset_id: str
    row_index: int
    error_type: str
    message: str


def consolidate_task(
    task: Task,
    datasets: Mapping[str, TableDataset] | Sequence[TableDataset],
    gateway: Gateway,
    augment: bool = False,
    parallelism: int = 1,
) -> tuple[list[ConsolidatedSample], list[RowFailureRecord]]:
    """Consolidate every row of every member dataset.

    Returns samples in canonical (dataset id, row index, paraphrase index)
    order together with the per-row failure report. Raises
    ``ConsolidationAborted`` when more than half of the rows fail.
    """
    if not isinstance(datasets, Mapping):
        datasets = {d.id: d for d in datasets}
    missing = [ds_id for ds_id in task.datasets if ds_id not in datasets]
    if missing:
        raise DatasetNotFound(f"task {task.id!r} references unloaded datasets: {missing}")

    jobs = [
        (ds_id, row_index)
        for ds_id in task.datasets
        for row_index in range(len(datasets[ds_id]))
    ]

    def work(job: tuple[str, int]) -> list[ConsolidatedSample]:
        ds_id, row_index = job
        dataset = datasets[ds_id]
        out = [consolidate_row(dataset, row_index, gateway)]
        if augment:
            out.extend(augment_row(dataset, row_index, gateway))
        return out

    samples: list[ConsolidatedSample] = []
    failures: list[RowFailureRecord] = []

    def collect(job: tuple[str, int], outcome: list[ConsolidatedSample] | Exception) -> None:
        if isinstance(outcome, Exception):
            cause = outcome.cause if isinstance(outcome, RowFailure) else outcome
            failures.append(
                RowFailureRecord(job[0], job[1], type(cause).__name__, str(outcome))
            )
        else:
            samples.extend(outcome)

    if parallelism <= 1:
        for job in jobs:
            try:
                collect(job, work(job))
            except AnyPredictError as exc:
                collect(job, exc)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [(job, pool.submit(work, job)) for job in jobs]
            for job, future in futures:
                try:
                    collect(job, future.result())
                except AnyPredictError as exc:
                    collect(job, exc)

    if jobs and len(failures) * 2 > len(jobs):
        raise ConsolidationAborted(
            len(failures), len(jobs), [f.error_type for f in failures]
        )

    samples.sort(
        key=lambda s: (s.provenance.dataset_id, s.provenance.row_index, s.provenance.paraphrase_index)
    )
    return samples, failures


# -- JSON Lines artifact -----------------------------------------------------


def sample_to_obj(sample: ConsolidatedSample) -> dict:
    return {
        "text": sample.text,
        "label": sample.label,
        "pseudo_label": (
            None
            if sample.pseudo_label is None
            else {"value": sample.pseudo_label.value, "confidence": sample.pseudo_label.confidence}
        ),
        "provenance": {
            "dataset_id": sample.provenance.dataset_id,
            "row_index": sample.provenance.row_index,
            "paraphrase_index": sample.provenance.paraphrase_index,
        },
        "audit_status": sample.audit_status,
    }


def sample_from_obj(obj: dict) -> ConsolidatedSample:
    pseudo = obj.get("pseudo_label")
    prov = obj["provenance"]
    return ConsolidatedSample(
        text=obj["text"],
        provenance=Provenance(prov["dataset_id"], prov["row_index"], prov["paraphrase_index"]),
        label=obj.get("label"),
        pseudo_label=None if pseudo is None else PseudoLabel(pseudo["value"], pseudo["confidence"]),
        audit_status=obj.get("audit_status", "unaudited"),
    )


def write_samples(samples: Iterable[ConsolidatedSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_obj(sample), ensure_ascii=False) + "\n")


def read_samples(path: str | Path) -> list[ConsolidatedSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(sample_from_obj(json.loads(line)))
    return out
