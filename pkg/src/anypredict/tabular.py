"""Typed tabular data model, CSV/JSONL ingestion, and deterministic row linearization.

A dataset is an ordered column schema plus rows of tagged cells. Rows render
to prompt-ready strings via :func:`linearize`; the schema renders to the
prompt prefix via :func:`render_schema_definition`. Everything is immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError, SchemaMismatch

CELL_KINDS = ("categorical", "binary", "numerical", "text")

SEGMENT_SEP = "; "

_TRUE_TOKENS = {"1", "true", "t", "yes", "y"}
_FALSE_TOKENS = {"0", "false", "f", "no", "n"}


@dataclass(frozen=True)
class ColumnSchema:
    """One column: name, kind, and the human-readable meaning used in prompts."""

    name: str
    kind: str
    explanation: str
    unit: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("column name must be non-empty")
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown column kind {self.kind!r} for column {self.name!r}")
        if not self.explanation:
            raise ValueError(f"column {self.name!r} needs a non-empty explanation")


@dataclass(frozen=True)
class CellValue:
    """Tagged cell value. ``kind`` is a column kind or ``"missing"``.

    Numerical cells keep the source text in ``raw`` so that rendering (and
    audit references) reproduce the file verbatim, e.g. "3.0" stays "3.0".
    """

    kind: str
    value: str | bool | float | None = None
    raw: str | None = None

    def __post_init__(self):
        if self.kind not in CELL_KINDS and self.kind != "missing":
            raise ValueError(f"unknown cell kind {self.kind!r}")

    @staticmethod
    def categorical(value: str) -> "CellValue":
        return CellValue("categorical", value)

    @staticmethod
    def binary(value: bool) -> "CellValue":
        return CellValue("binary", bool(value))

    @staticmethod
    def numerical(value: float, raw: str | None = None) -> "CellValue":
        return CellValue("numerical", float(value), raw)

    @staticmethod
    def text(value: str) -> "CellValue":
        return CellValue("text", value)

    @property
    def is_missing(self) -> bool:
        return self.kind == "missing"

    def render(self) -> str:
        """Value as it appears in a linearized segment (empty for binary/missing)."""
        if self.kind in ("categorical", "text"):
            return str(self.value)
        if self.kind == "numerical":
            return self.raw if self.raw is not None else repr(self.value)
        return ""


MISSING = CellValue("missing")


@dataclass(frozen=True)
class TableDataset:
    """A schema, its rows, and optional binary labels (one per row)."""

    id: str
    schema: tuple[ColumnSchema, ...]
    rows: tuple[tuple[CellValue, ...], ...]
    labels: tuple[int, ...] | None = None
    task_id: str = ""

    def __post_init__(self):
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate column names in schema: {dupes}")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.schema):
                raise ValueError(
                    f"row {i} has {len(row)} cells, schema has {len(self.schema)} columns"
                )
            for col, cell in zip(self.schema, row):
                if not cell.is_missing and cell.kind != col.kind:
                    raise ValueError(
                        f"row {i}: cell kind {cell.kind!r} does not match column "
                        f"{col.name!r} of kind {col.kind!r}"
                    )
        if self.labels is not None:
            if len(self.labels) != len(self.rows):
                raise ValueError("labels must have one entry per row")
            bad = [v for v in self.labels if v not in (0, 1)]
            if bad:
                raise ValueError(f"labels must be 0 or 1, got {bad[:5]}")

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class Task:
    """A group of datasets sharing one label definition."""

    id: str
    datasets: tuple[str, ...]
    label_name: str
    positive_meaning: str


def linearize(schema: Sequence[ColumnSchema], row: Sequence[CellValue]) -> str:
    """Render a row as '; '-joined "name value" segments in schema order.

    Binary columns contribute the bare column name when true and are omitted
    when false; missing cells are omitted entirely. Deterministic.
    """
    if len(schema) != len(row):
        raise ValueError("row does not conform to schema")
    parts: list[str] = []
    for col, cell in zip(schema, row):
        if cell.is_missing:
            continue
        if col.kind == "binary":
            if cell.value is True:
                parts.append(col.name)
            continue
        parts.append(f"{col.name} {cell.render()}")
    return SEGMENT_SEP.join(parts)


def render_schema_definition(schema: Sequence[ColumnSchema]) -> str:
    """One "name(kind): explanation" line per column, in schema order."""
    return "\n".join(f"{c.name}({c.kind}): {c.explanation}" for c in schema)


def _parse_cell(text: str, col: ColumnSchema, row_index: int) -> CellValue:
    text = text.strip()
    if text == "":
        return MISSING
    if col.kind == "numerical":
        try:
            return CellValue.numerical(float(text), raw=text)
        except ValueError:
            raise ParseError(row_index, col.name, text) from None
    if col.kind == "binary":
        low = text.lower()
        if low in _TRUE_TOKENS:
            return CellValue.binary(True)
        if low in _FALSE_TOKENS:
            return CellValue.binary(False)
        raise ParseError(row_index, col.name, text)
    if col.kind == "categorical":
        return CellValue.categorical(text)
    return CellValue.text(text)


def _parse_label(text: str, column: str, row_index: int) -> int:
    text = text.strip()
    if text not in ("0", "1"):
        raise ParseError(row_index, column, text)
    return int(text)


def load_dataset(
    csv_path: str | Path,
    schema_path: str | Path,
    dataset_id: str | None = None,
    task_id: str = "",
) -> TableDataset:
    """Load a CSV against its JSON schema file.

    The schema file maps column name -> {kind, explanation, unit?, is_label?}.
    Exactly the header columns must be declared; at most one column may be the
    label. Empty cells become missing; numeric source text is preserved.
    """
    csv_path = Path(csv_path)
    schema_path = Path(schema_path)
    with open(schema_path, encoding="utf-8") as fh:
        schema_spec = json.load(fh)
    if not isinstance(schema_spec, dict):
        raise SchemaMismatch([], f"schema file {schema_path} must be a JSON object")

    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch([], f"{csv_path} has no header row") from None
        header = [h.strip() for h in header]

        missing_from_schema = [h for h in header if h not in schema_spec]
        missing_from_csv = [name for name in schema_spec if name not in header]
        if missing_from_schema or missing_from_csv:
            raise SchemaMismatch(missing_from_schema + missing_from_csv)

        label_columns = [name for name, spec in schema_spec.items() if spec.get("is_label")]
        if len(label_columns) > 1:
            raise SchemaMismatch(label_columns, "more than one column is marked is_label")
        label_column = label_columns[0] if label_columns else None

        columns: list[ColumnSchema | None] = []
        for name in header:
            if name == label_column:
                columns.append(None)
                continue
            spec = schema_spec[name]
            columns.append(
                ColumnSchema(
                    name=name,
                    kind=spec["kind"],
                    explanation=spec["explanation"],
                    unit=spec.get("unit"),
                )
            )

        rows: list[tuple[CellValue, ...]] = []
        labels: list[int] = []
        for row_index, record in enumerate(reader):
            if len(record) != len(header):
                raise ParseError(row_index, "<row>", ",".join(record))
            cells: list[CellValue] = []
            for col, text in zip(columns, record):
                if col is None:
                    labels.append(_parse_label(text, label_column, row_index))
                else:
                    cells.append(_parse_cell(text, col, row_index))
            rows.append(tuple(cells))

    return TableDataset(
        id=dataset_id or csv_path.stem,
        schema=tuple(c for c in columns if c is not None),
        rows=tuple(rows),
        labels=tuple(labels) if label_column else None,
        task_id=task_id,
    )


# -- JSON Lines persistence ----------------------------------------------
# Line 1 is a schema header object, each following line is one row object.


def _cell_to_obj(cell: CellValue) -> dict:
    if cell.is_missing:
        return {"kind": "missing"}
    obj: dict = {"kind": cell.kind, "value": cell.value}
    if cell.raw is not None:
        obj["raw"] = cell.raw
    return obj


def _cell_from_obj(obj: dict) -> CellValue:
    if obj["kind"] == "missing":
        return MISSING
    return CellValue(obj["kind"], obj["value"], obj.get("raw"))


def save_dataset(dataset: TableDataset, path: str | Path) -> None:
    """Persist a dataset as JSON Lines (schema header + one row per line)."""
    header = {
        "id": dataset.id,
        "task_id": dataset.task_id,
        "labeled": dataset.labels is not None,
        "schema": [
            {"name": c.name, "kind": c.kind, "explanation": c.explanation, "unit": c.unit}
            for c in dataset.schema
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, row in enumerate(dataset.rows):
            obj = {"cells": [_cell_to_obj(c) for c in row]}
            if dataset.labels is not None:
                obj["label"] = dataset.labels[i]
            fh.write(json.dumps(obj) + "\n")


def load_saved_dataset(path: str | Path) -> TableDataset:
    """Inverse of :func:`save_dataset`."""
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        schema = tuple(
            ColumnSchema(c["name"], c["kind"], c["explanation"], c.get("unit"))
            for c in header["schema"]
        )
        rows: list[tuple[CellValue, ...]] = []
        labels: list[int] = []
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            rows.append(tuple(_cell_from_obj(c) for c in obj["cells"]))
            if header["labeled"]:
                labels.append(obj["label"])
    return TableDataset(
        id=header["id"],
        schema=schema,
        rows=tuple(rows),
        labels=tuple(labels) if header["labeled"] else None,
        task_id=header["task_id"],
    )
