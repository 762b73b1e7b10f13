"""Tabular-to-text data engine with LLM consolidation, fidelity audits,
KNN-Shapley data valuation, and a desk-scale text classifier."""

from .audit import AuditReport, audit_dataset, audit_sample, edit_distance, ned
from .consolidate import (
    ConsolidatedSample,
    Provenance,
    PseudoLabel,
    augment_row,
    consolidate_row,
    consolidate_task,
)
from .gateway import (
    CompletionRequest,
    Gateway,
    GatewayConfig,
    PromptBundle,
    build_prompt,
    complete,
)
from .predictor import (
    EvalMetrics,
    FeaturizerConfig,
    PredictorModel,
    TrainConfig,
    auroc,
    featurize,
    prauc,
    predict_proba,
    pseudo_label,
    run_regimen,
    train,
)
from .tabular import (
    CellValue,
    ColumnSchema,
    TableDataset,
    Task,
    linearize,
    load_dataset,
    render_schema_definition,
)
from .valuation import (
    EmbeddedSample,
    ValuationResult,
    exact_shapley,
    export_score_histogram,
    knn_shapley,
    knn_utility,
    stratified_select,
)

__version__ = "0.1.0"
