"""Exception types shared across the package."""

from __future__ import annotations


class AnyPredictError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AnyPredictError):
    """Invalid or incomplete configuration."""


# -- tabular ------------------------------------------------------------


class SchemaMismatch(AnyPredictError):
    """CSV header and schema file disagree."""

    def __init__(self, columns: list[str], message: str | None = None):
        self.columns = list(columns)
        super().__init__(message or f"schema mismatch for columns: {', '.join(self.columns)}")


class ParseError(AnyPredictError):
    """A cell could not be parsed as its declared kind."""

    def __init__(self, row_index: int, column: str, text: str):
        self.row_index = row_index
        self.column = column
        self.text = text
        super().__init__(f"cannot parse {text!r} in column {column!r} at row {row_index}")


# -- gateway ------------------------------------------------------------


class GatewayError(AnyPredictError):
    """HTTP completion call failed after retries."""

    def __init__(self, status: int | str, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(f"gateway request failed with status {status}: {body[:200]}")


class GatewayTimeout(AnyPredictError):
    """Completion call timed out after all retries."""


class CacheMiss(AnyPredictError):
    """Replay backend has no recorded response for a request."""

    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no cached response for request digest {digest}")


class MissingCorrectionPayload(AnyPredictError):
    """Correction prompt requested without the missed-feature linearization."""


# -- consolidator -------------------------------------------------------


class EmptyLinearization(AnyPredictError):
    """A row linearized to the empty string; there is nothing to describe."""

    def __init__(self, dataset_id: str, row_index: int):
        self.dataset_id = dataset_id
        self.row_index = row_index
        super().__init__(f"row {row_index} of {dataset_id!r} has no renderable cells")


class ParseFailure(AnyPredictError):
    """A completion could not be parsed as a numbered paraphrase list."""

    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"no numbered items found in completion: {raw[:200]!r}")


class RowFailure(AnyPredictError):
    """Per-row failure wrapper carrying row coordinates; the cause is chained."""

    def __init__(self, dataset_id: str, row_index: int, cause: Exception):
        self.dataset_id = dataset_id
        self.row_index = row_index
        self.cause = cause
        super().__init__(f"row {row_index} of {dataset_id!r} failed: {cause}")


class ConsolidationAborted(AnyPredictError):
    """More than half of the rows failed; the task run was aborted.

    ``failure_types`` holds the underlying error class name per failed row,
    so callers can tell a gateway outage from bad data.
    """

    def __init__(self, n_failed: int, n_total: int, failure_types: list[str] | None = None):
        self.n_failed = n_failed
        self.n_total = n_total
        self.failure_types = failure_types or []
        super().__init__(f"aborted: {n_failed}/{n_total} rows failed")


# -- auditor ------------------------------------------------------------


class ProvenanceError(AnyPredictError):
    """A sample's provenance does not resolve to a row of the given dataset."""


# -- valuation ----------------------------------------------------------


class TooLargeForExact(AnyPredictError):
    """Exact Shapley enumerates 2^n subsets; n is capped at 12."""


class DimensionError(AnyPredictError):
    """Embedded vectors in one batch do not share a dimension."""


# -- predictor ----------------------------------------------------------


class DegenerateLabels(AnyPredictError):
    """Training input is empty, unlabeled, or single-class."""


class UndefinedMetric(AnyPredictError):
    """The metric is undefined for this label distribution."""


class RegimenInputError(AnyPredictError):
    """The chosen training regimen is missing a required input set."""


# -- pipeline -----------------------------------------------------------


class PipelineOrderError(AnyPredictError):
    """An upstream step's artifacts are missing."""


class DatasetNotFound(AnyPredictError):
    """The requested dataset id is not part of the target task."""
