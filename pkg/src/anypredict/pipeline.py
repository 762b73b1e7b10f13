"""Three-step pipeline orchestration with on-disk artifact handoff.

Each step is independently runnable and writes its artifacts plus a manifest
entry (path, sha256, timing) under the configured artifact directory. Step
ordering is enforced by artifact presence. With a fixed seed and a replay (or
mock) gateway, artifact digests are stable across reruns.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from filelock import FileLock

from .audit import AuditOutcome, audit_dataset, write_audit_summary, write_reports
from .consolidate import (
    ConsolidatedSample,
    consolidate_task,
    read_samples,
    write_samples,
)
from .errors import ConfigError, DatasetNotFound, PipelineOrderError
from .gateway import Gateway, GatewayConfig
from .predictor import (
    EvalMetrics,
    FeaturizerConfig,
    PredictorModel,
    TrainConfig,
    evaluate,
    featurize_matrix,
    pseudo_label,
    run_regimen,
    save_model,
    split_rows,
    train,
)
from .tabular import TableDataset, Task, load_dataset
from .valuation import (
    ValuationResult,
    _knn_shapley_core,
    export_score_histogram,
    stratified_select,
    write_histogram_csv,
    write_scores_csv,
)

log = logging.getLogger("anypredict")

SAMPLES_TARGET = "samples_target.jsonl"
SAMPLES_OUTDOMAIN = "samples_outdomain.jsonl"
AUDIT_REPORTS = "audit_reports.jsonl"
AUDIT_SUMMARY = "audit_summary.csv"
SCORES = "scores.csv"
HISTOGRAM = "histogram.csv"
TSUP = "tsup.jsonl"
METRICS = "metrics.csv"
RANKING = "ranking.csv"
MANIFEST = "manifest.json"


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    id: str
    csv: Path
    schema: Path


@dataclass(frozen=True)
class TaskSpec:
    id: str
    label_name: str
    positive_meaning: str
    datasets: tuple[DatasetSpec, ...]

    def as_task(self) -> Task:
        return Task(
            id=self.id,
            datasets=tuple(d.id for d in self.datasets),
            label_name=self.label_name,
            positive_meaning=self.positive_meaning,
        )


@dataclass(frozen=True)
class PipelineConfig:
    target_task: TaskSpec
    out_domain_tasks: tuple[TaskSpec, ...]
    gateway: GatewayConfig
    audit_threshold: float
    audit_max_rounds: int
    audit_per_sample_average: bool
    valuation_k: int
    valuation_budget: int
    valuation_validation_fraction: float
    valuation_embedding: str
    histogram_bins: int
    train: TrainConfig
    fewshot_train: TrainConfig
    fewshot_eval_fraction: float
    featurizer: FeaturizerConfig
    regimens: tuple[str, ...]
    test_fraction: float
    augment: bool
    parallelism: int
    rng_seed: int
    artifact_dir: Path
    config_digest: str


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value):
    if isinstance(value, str):
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_RE.sub(repl, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


def _task_spec(obj: dict, base: Path) -> TaskSpec:
    try:
        datasets = tuple(
            DatasetSpec(
                id=d["id"],
                csv=(base / d["csv"]).resolve(),
                schema=(base / d["schema"]).resolve(),
            )
            for d in obj["datasets"]
        )
        return TaskSpec(
            id=obj["id"],
            label_name=obj.get("label_name", ""),
            positive_meaning=obj.get("positive_meaning", ""),
            datasets=datasets,
        )
    except KeyError as exc:
        raise ConfigError(f"task definition missing key {exc}") from None


def load_config(path: str | Path, seed_override: int | None = None) -> PipelineConfig:
    """Parse and validate a pipeline config file.

    String values may reference environment variables as ``${NAME}``. Paths
    are resolved relative to the config file. The config digest is a sha256
    over the raw file bytes (plus the seed override, when one is applied).
    """
    path = Path(path)
    try:
        raw_bytes = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    digest_src = raw_bytes if seed_override is None else raw_bytes + f"|seed={seed_override}".encode()
    digest = hashlib.sha256(digest_src).hexdigest()
    try:
        obj = _interpolate(json.loads(raw_bytes))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None

    base = path.parent
    try:
        target = _task_spec(obj["target_task"], base)
    except KeyError:
        raise ConfigError("config needs a target_task section") from None
    out_domain = tuple(_task_spec(t, base) for t in obj.get("out_domain_tasks", []))

    for spec in (*target.datasets, *(d for t in out_domain for d in t.datasets)):
        for p in (spec.csv, spec.schema):
            if not p.exists():
                raise ConfigError(f"dataset file does not exist: {p}")

    rng_seed = int(obj.get("rng_seed", 0)) if seed_override is None else seed_override

    gateway_obj = dict(obj.get("gateway", {}))
    try:
        gateway = GatewayConfig(**gateway_obj)
    except TypeError as exc:
        raise ConfigError(f"bad gateway section: {exc}") from None

    audit_obj = obj.get("audit", {})
    valuation_obj = obj.get("valuation", {})
    embedding = valuation_obj.get("embedding", "featurizer")
    if embedding != "featurizer":
        raise ConfigError(f"unknown embedding source {embedding!r}")

    train_obj = dict(obj.get("train", {}))
    train_obj["rng_seed"] = rng_seed
    fewshot_obj = obj.get("fewshot", {})
    fewshot_train_obj = {**train_obj, **fewshot_obj.get("train", {})}
    fewshot_train_obj["rng_seed"] = rng_seed
    try:
        train_config = TrainConfig(**train_obj)
        fewshot_train = TrainConfig(**fewshot_train_obj)
        featurizer = FeaturizerConfig(**obj.get("featurizer", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train/featurizer section: {exc}") from None

    regimens = obj.get("regimens", obj.get("regimen", ["finetune"]))
    if isinstance(regimens, str):
        regimens = [regimens]

    if "artifact_dir" not in obj:
        raise ConfigError("config needs an artifact_dir")

    try:
        return PipelineConfig(
            target_task=target,
            out_domain_tasks=out_domain,
            gateway=gateway,
            audit_threshold=float(audit_obj.get("threshold", 0.5)),
            audit_max_rounds=int(audit_obj.get("max_rounds", 2)),
            audit_per_sample_average=bool(audit_obj.get("per_sample_average", False)),
            valuation_k=int(valuation_obj.get("k", 5)),
            valuation_budget=int(valuation_obj.get("budget", 1000)),
            valuation_validation_fraction=float(valuation_obj.get("validation_fraction", 0.25)),
            valuation_embedding=embedding,
            histogram_bins=int(valuation_obj.get("histogram_bins", 20)),
            train=train_config,
            fewshot_train=fewshot_train,
            fewshot_eval_fraction=float(
                fewshot_obj.get("eval_fraction", obj.get("test_fraction", 0.25))
            ),
            featurizer=featurizer,
            regimens=tuple(regimens),
            test_fraction=float(obj.get("test_fraction", 0.25)),
            augment=bool(obj.get("augment", False)),
            parallelism=int(obj.get("parallelism", 1)),
            rng_seed=rng_seed,
            artifact_dir=(base / obj["artifact_dir"]).resolve(),
            config_digest=digest,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- manifest ----------------------------------------------------------------


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _update_manifest(
    config: PipelineConfig,
    step: str,
    artifacts: Mapping[str, Path],
    started: float,
    finished: float,
) -> dict:
    manifest_path = config.artifact_dir / MANIFEST
    with FileLock(str(manifest_path) + ".lock"):
        manifest = {}
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest["config_digest"] = config.config_digest
        steps = manifest.setdefault("steps", {})
        steps[step] = {
            "artifacts": {
                name: {
                    "path": str(p.relative_to(config.artifact_dir)),
                    "sha256": file_sha256(p),
                }
                for name, p in sorted(artifacts.items())
            },
            "started": started,
            "finished": finished,
            "duration_s": finished - started,
        }
        tmp = manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, manifest_path)
    return manifest


def manifest_digests(manifest: Mapping) -> dict:
    """The reproducible portion of a manifest: config + artifact digests."""
    return {
        "config_digest": manifest.get("config_digest"),
        "artifacts": {
            step: {name: entry["sha256"] for name, entry in body["artifacts"].items()}
            for step, body in manifest.get("steps", {}).items()
        },
    }


def _require(config: PipelineConfig, *names: str) -> None:
    missing = [n for n in names if not (config.artifact_dir / n).exists()]
    if missing:
        raise PipelineOrderError(
            f"missing upstream artifacts in {config.artifact_dir}: {missing} "
            "(run the earlier pipeline steps first)"
        )


# -- step 1: consolidate --------------------------------------------------------


def _load_task(spec: TaskSpec) -> tuple[Task, dict[str, TableDataset]]:
    datasets = {
        d.id: load_dataset(d.csv, d.schema, dataset_id=d.id, task_id=spec.id)
        for d in spec.datasets
    }
    return spec.as_task(), datasets


def _consolidate_and_audit(
    spec: TaskSpec, gateway: Gateway, config: PipelineConfig
) -> tuple[list[ConsolidatedSample], list, list[tuple[str, float, float, int]]]:
    task, datasets = _load_task(spec)
    samples, failures = consolidate_task(
        task, datasets, gateway, augment=config.augment, parallelism=config.parallelism
    )
    if failures:
        log.warning("%d row(s) failed during consolidation of task %s", len(failures), task.id)
    audited: list[ConsolidatedSample] = []
    reports = []
    summary_rows = []
    for ds_id in task.datasets:
        subset = [s for s in samples if s.provenance.dataset_id == ds_id]
        outcome = audit_dataset(
            subset,
            datasets[ds_id],
            gateway,
            threshold=config.audit_threshold,
            max_rounds=config.audit_max_rounds,
            parallelism=config.parallelism,
            per_sample_average=config.audit_per_sample_average,
        )
        audited.extend(outcome.samples)
        reports.extend(outcome.reports)
        summary_rows.append((ds_id, outcome.mned_before, outcome.mned_after, outcome.n_failed))
    return audited, reports, summary_rows


def cmd_consolidate(config: PipelineConfig) -> dict:
    """Step 1: consolidate and audit the target and out-domain tasks."""
    started = time.time()
    config.artifact_dir.mkdir(parents=True, exist_ok=True)
    gateway = Gateway(config.gateway)

    target_samples, reports, summary = _consolidate_and_audit(config.target_task, gateway, config)
    outdomain_samples: list[ConsolidatedSample] = []
    for spec in config.out_domain_tasks:
        samples, task_reports, task_summary = _consolidate_and_audit(spec, gateway, config)
        outdomain_samples.extend(samples)
        reports.extend(task_reports)
        summary.extend(task_summary)

    paths = {
        SAMPLES_TARGET: config.artifact_dir / SAMPLES_TARGET,
        SAMPLES_OUTDOMAIN: config.artifact_dir / SAMPLES_OUTDOMAIN,
        AUDIT_REPORTS: config.artifact_dir / AUDIT_REPORTS,
        AUDIT_SUMMARY: config.artifact_dir / AUDIT_SUMMARY,
    }
    write_samples(target_samples, paths[SAMPLES_TARGET])
    write_samples(outdomain_samples, paths[SAMPLES_OUTDOMAIN])
    write_reports(reports, paths[AUDIT_REPORTS])
    write_audit_summary(summary, paths[AUDIT_SUMMARY])
    manifest = _update_manifest(config, "consolidate", paths, started, time.time())
    log.info(
        "consolidated %d target and %d out-domain samples",
        len(target_samples),
        len(outdomain_samples),
    )
    return {"n_target": len(target_samples), "n_outdomain": len(outdomain_samples), "manifest": manifest}


# -- step 2: enrich ---------------------------------------------------------------


def _carve_validation(
    train_part: Sequence[ConsolidatedSample], fraction: float, rng_seed: int
) -> list[ConsolidatedSample]:
    """Label-stratified validation slice of primary training samples."""
    primaries = [s for s in train_part if s.provenance.paraphrase_index == 0]
    rng = np.random.default_rng([rng_seed, 0xA1])
    by_label: dict[int, list[ConsolidatedSample]] = {}
    for s in primaries:
        by_label.setdefault(s.label if s.label is not None else -1, []).append(s)
    out: list[ConsolidatedSample] = []
    for label in sorted(by_label):
        members = by_label[label]
        members = [members[i] for i in rng.permutation(len(members))]
        n_val = max(1, int(round(fraction * len(members)))) if len(members) > 1 else len(members)
        out.extend(members[:n_val])
    out.sort(key=lambda s: s.provenance.key)
    return out


def _enrich_core(
    target_samples: Sequence[ConsolidatedSample],
    outdomain_samples: Sequence[ConsolidatedSample],
    config: PipelineConfig,
) -> tuple[PredictorModel, list[tuple[ConsolidatedSample, float]], list[ConsolidatedSample], ValuationResult]:
    """Learn, annotate, audit: returns (initial model, scored pool, cleaned set, result)."""
    train_part, _ = split_rows(target_samples, config.test_fraction, config.rng_seed)
    val_samples = _carve_validation(
        train_part, config.valuation_validation_fraction, config.rng_seed
    )
    initial_model = train(train_part, config.train, config.featurizer)

    pseudo = pseudo_label(initial_model, outdomain_samples)
    X_sup = featurize_matrix([s.text for s in pseudo], config.featurizer)
    y_sup = np.array([s.pseudo_label.value for s in pseudo], dtype=np.int64)
    keys = [s.provenance.key for s in pseudo]
    X_val = featurize_matrix([s.text for s in val_samples], config.featurizer)
    y_val = np.array([s.label for s in val_samples], dtype=np.int64)

    phi, value_of_full = _knn_shapley_core(
        X_sup, y_sup, keys, X_val, y_val, config.valuation_k, config.parallelism
    )
    result = ValuationResult(
        scores=dict(zip(keys, phi.tolist())),
        k=config.valuation_k,
        n_validation=len(val_samples),
        value_of_full=float(value_of_full),
    )
    scored = list(zip(pseudo, phi.tolist()))
    budget = config.valuation_budget
    if budget > len(scored):
        warnings.warn(
            f"budget {budget} exceeds pool size {len(scored)}; selecting everything",
            stacklevel=2,
        )
        budget = len(scored)
    cleaned = stratified_select(scored, budget)
    return initial_model, scored, cleaned, result


def cmd_enrich(config: PipelineConfig) -> dict:
    """Step 2: pseudo-label out-domain samples, score them, select T_sup."""
    started = time.time()
    _require(config, SAMPLES_TARGET, SAMPLES_OUTDOMAIN)
    target_samples = read_samples(config.artifact_dir / SAMPLES_TARGET)
    outdomain_samples = read_samples(config.artifact_dir / SAMPLES_OUTDOMAIN)
    if not outdomain_samples:
        raise PipelineOrderError("no out-domain samples to enrich from")

    _, scored, cleaned, result = _enrich_core(target_samples, outdomain_samples, config)

    paths = {
        SCORES: config.artifact_dir / SCORES,
        HISTOGRAM: config.artifact_dir / HISTOGRAM,
        TSUP: config.artifact_dir / TSUP,
    }
    write_scores_csv(scored, paths[SCORES])
    targets = {s.provenance.key: s.pseudo_label.value for s, _ in scored}
    write_histogram_csv(
        export_score_histogram(result, config.histogram_bins, targets), paths[HISTOGRAM]
    )
    write_samples(cleaned, paths[TSUP])
    manifest = _update_manifest(config, "enrich", paths, started, time.time())
    log.info("selected %d of %d scored samples", len(cleaned), len(scored))
    return {"n_scored": len(scored), "n_selected": len(cleaned), "manifest": manifest}


# -- step 3: train & evaluate -------------------------------------------------------


def _write_metrics_csv(rows: Iterable[tuple[str, str, EvalMetrics]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset_id", "regimen", "auroc", "prauc", "n_test", "positive_ratio"])
        for dataset_id, regimen, m in rows:
            writer.writerow(
                [dataset_id, regimen, repr(m.auroc), repr(m.prauc), m.n_test, repr(m.positive_ratio)]
            )


def _write_ranking_csv(metrics: dict[str, dict[str, EvalMetrics]], path: Path) -> None:
    """Cross-regimen mean rank per metric (rank 1 = best, ties averaged)."""
    regimens = sorted(metrics)
    datasets = sorted({ds for per in metrics.values() for ds in per})

    def mean_rank(metric: str) -> dict[str, float]:
        totals = {r: 0.0 for r in regimens}
        for ds in datasets:
            values = [(r, getattr(metrics[r][ds], metric)) for r in regimens if ds in metrics[r]]
            values.sort(key=lambda pair: -pair[1])
            i = 0
            while i < len(values):
                j = i
                while j + 1 < len(values) and values[j + 1][1] == values[i][1]:
                    j += 1
                rank = (i + j) / 2.0 + 1.0
                for r, _ in values[i : j + 1]:
                    totals[r] += rank
                i = j + 1
        return {r: totals[r] / len(datasets) for r in regimens}

    rank_auroc = mean_rank("auroc")
    rank_prauc = mean_rank("prauc")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regimen", "avg_rank_auroc", "avg_rank_prauc"])
        for r in regimens:
            writer.writerow([r, repr(rank_auroc[r]), repr(rank_prauc[r])])


def cmd_train_eval(config: PipelineConfig) -> dict:
    """Step 3: run the configured regimens and write per-dataset metrics."""
    started = time.time()
    _require(config, SAMPLES_TARGET)
    needs_sup = [r for r in config.regimens if r in ("augment", "finetune", "zeroshot")]
    if needs_sup:
        _require(config, TSUP)
    target_samples = read_samples(config.artifact_dir / SAMPLES_TARGET)
    sup_samples = (
        read_samples(config.artifact_dir / TSUP)
        if (config.artifact_dir / TSUP).exists()
        else []
    )

    rows: list[tuple[str, str, EvalMetrics]] = []
    per_regimen: dict[str, dict[str, EvalMetrics]] = {}
    paths: dict[str, Path] = {}
    for regimen in config.regimens:
        result = run_regimen(
            regimen,
            target_samples,
            sup_samples,
            config.train,
            config.featurizer,
            config.test_fraction,
        )
        per_regimen[regimen] = result.metrics
        for dataset_id in sorted(result.metrics):
            rows.append((dataset_id, regimen, result.metrics[dataset_id]))
        model_name = f"model_{regimen}.json"
        paths[model_name] = config.artifact_dir / model_name
        save_model(result.model, paths[model_name])

    paths[METRICS] = config.artifact_dir / METRICS
    _write_metrics_csv(rows, paths[METRICS])
    if len(config.regimens) > 1:
        paths[RANKING] = config.artifact_dir / RANKING
        _write_ranking_csv(per_regimen, paths[RANKING])
    manifest = _update_manifest(config, "train", paths, started, time.time())
    return {"metrics": per_regimen, "manifest": manifest}


# -- protocols ---------------------------------------------------------------------


def _primary_samples_of(
    samples: Sequence[ConsolidatedSample], dataset_id: str
) -> list[ConsolidatedSample]:
    return [
        s
        for s in samples
        if s.provenance.dataset_id == dataset_id and s.provenance.paraphrase_index == 0
    ]


def _zeroshot_core(
    config: PipelineConfig,
    held_out_dataset_id: str,
    target_samples: Sequence[ConsolidatedSample],
    outdomain_samples: Sequence[ConsolidatedSample],
) -> tuple[PredictorModel, list[tuple[ConsolidatedSample, float]], list[ConsolidatedSample]]:
    """Zero-shot: exclude the held-out dataset from every step-2 input."""
    retained = [
        s for s in target_samples if s.provenance.dataset_id != held_out_dataset_id
    ]
    if not retained:
        raise DatasetNotFound(
            f"excluding {held_out_dataset_id!r} leaves no target samples"
        )
    _, scored, cleaned, _ = _enrich_core(retained, outdomain_samples, config)
    model = train(cleaned, config.train, config.featurizer)
    return model, scored, cleaned


def cmd_zeroshot_protocol(config: PipelineConfig, held_out_dataset_id: str) -> dict:
    """Exclude one target dataset end to end, train on T_sup only, evaluate on it."""
    started = time.time()
    if held_out_dataset_id not in {d.id for d in config.target_task.datasets}:
        raise DatasetNotFound(f"{held_out_dataset_id!r} is not part of the target task")
    _require(config, SAMPLES_TARGET, SAMPLES_OUTDOMAIN)
    target_samples = read_samples(config.artifact_dir / SAMPLES_TARGET)
    outdomain_samples = read_samples(config.artifact_dir / SAMPLES_OUTDOMAIN)

    model, scored, cleaned = _zeroshot_core(
        config, held_out_dataset_id, target_samples, outdomain_samples
    )
    eval_samples = _primary_samples_of(target_samples, held_out_dataset_id)
    metrics = evaluate(model, eval_samples)

    out_dir = config.artifact_dir / f"zeroshot_{held_out_dataset_id}"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        f"zeroshot_{held_out_dataset_id}/{SCORES}": out_dir / SCORES,
        f"zeroshot_{held_out_dataset_id}/{TSUP}": out_dir / TSUP,
        f"zeroshot_{held_out_dataset_id}/{METRICS}": out_dir / METRICS,
        f"zeroshot_{held_out_dataset_id}/model.json": out_dir / "model.json",
    }
    write_scores_csv(scored, out_dir / SCORES)
    write_samples(cleaned, out_dir / TSUP)
    _write_metrics_csv([(held_out_dataset_id, "zeroshot", metrics)], out_dir / METRICS)
    save_model(model, out_dir / "model.json")
    manifest = _update_manifest(
        config, f"zeroshot_{held_out_dataset_id}", paths, started, time.time()
    )
    return {"metrics": metrics, "manifest": manifest}


def _stratified_order(
    samples: Sequence[ConsolidatedSample], rng: np.random.Generator
) -> list[ConsolidatedSample]:
    """Shuffled order whose every prefix tracks the label proportions."""
    by_label: dict[int, list[ConsolidatedSample]] = {}
    for s in sorted(samples, key=lambda s: s.provenance.key):
        by_label.setdefault(s.label if s.label is not None else -1, []).append(s)
    pools = {
        label: [members[i] for i in rng.permutation(len(members))]
        for label, members in by_label.items()
    }
    total = sum(len(m) for m in pools.values())
    proportions = {label: len(m) / total for label, m in pools.items()}
    taken = {label: 0 for label in pools}
    out: list[ConsolidatedSample] = []
    for position in range(1, total + 1):
        candidates = [label for label in sorted(pools) if taken[label] < len(pools[label])]
        label = max(candidates, key=lambda c: (proportions[c] * position - taken[c], -c))
        out.append(pools[label][taken[label]])
        taken[label] += 1
    return out


def cmd_fewshot_protocol(
    config: PipelineConfig,
    held_out_dataset_id: str,
    shots: Sequence[int],
    seeds: Sequence[int],
) -> dict:
    """Fine-tune the zero-shot model on stratified shot draws from the
    held-out dataset, over a grid of shot counts and seeds."""
    started = time.time()
    if held_out_dataset_id not in {d.id for d in config.target_task.datasets}:
        raise DatasetNotFound(f"{held_out_dataset_id!r} is not part of the target task")
    _require(config, SAMPLES_TARGET, SAMPLES_OUTDOMAIN)
    target_samples = read_samples(config.artifact_dir / SAMPLES_TARGET)
    outdomain_samples = read_samples(config.artifact_dir / SAMPLES_OUTDOMAIN)
    held_out = _primary_samples_of(target_samples, held_out_dataset_id)

    rows: list[tuple[str, int, int, int, EvalMetrics]] = []
    for seed in seeds:
        seeded = replace(config, rng_seed=seed, train=replace(config.train, rng_seed=seed))
        zeroshot_model, _, _ = _zeroshot_core(
            seeded, held_out_dataset_id, target_samples, outdomain_samples
        )
        rng = np.random.default_rng([seed, 0xFE])
        eval_rows, pool_rows = _split_eval_pool(held_out, config.fewshot_eval_fraction, rng)
        pool_order = _stratified_order(pool_rows, rng)
        for requested in shots:
            used = min(requested, len(pool_order))
            if used < requested:
                warnings.warn(
                    f"requested {requested} shots but only {len(pool_order)} rows are "
                    f"available; clipped",
                    stacklevel=2,
                )
            if used == 0:
                model = zeroshot_model
            else:
                model = train(
                    pool_order[:used],
                    replace(config.fewshot_train, rng_seed=seed),
                    config.featurizer,
                    init=zeroshot_model,
                )
            metrics = evaluate(model, eval_rows)
            rows.append((held_out_dataset_id, requested, used, seed, metrics))

    out_dir = config.artifact_dir / f"fewshot_{held_out_dataset_id}"
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["dataset_id", "shots_requested", "shots_used", "seed", "auroc", "prauc", "n_test"]
        )
        for dataset_id, requested, used, seed, m in rows:
            writer.writerow(
                [dataset_id, requested, used, seed, repr(m.auroc), repr(m.prauc), m.n_test]
            )

    aggregate_path = out_dir / "aggregate.csv"
    with open(aggregate_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shots_requested", "auroc_mean", "auroc_std", "prauc_mean", "prauc_std"])
        for requested in shots:
            aurocs = np.array([m.auroc for _, req, _, _, m in rows if req == requested])
            praucs = np.array([m.prauc for _, req, _, _, m in rows if req == requested])
            writer.writerow(
                [
                    requested,
                    repr(float(aurocs.mean())),
                    repr(float(aurocs.std())),
                    repr(float(praucs.mean())),
                    repr(float(praucs.std())),
                ]
            )

    paths = {
        f"fewshot_{held_out_dataset_id}/{METRICS}": metrics_path,
        f"fewshot_{held_out_dataset_id}/aggregate.csv": aggregate_path,
    }
    manifest = _update_manifest(
        config, f"fewshot_{held_out_dataset_id}", paths, started, time.time()
    )
    per_shot = {
        requested: [m for _, req, _, _, m in rows if req == requested] for requested in shots
    }
    return {"rows": rows, "per_shot": per_shot, "manifest": manifest}


def _split_eval_pool(
    samples: Sequence[ConsolidatedSample], eval_fraction: float, rng: np.random.Generator
) -> tuple[list[ConsolidatedSample], list[ConsolidatedSample]]:
    """Label-stratified (eval, shot-pool) split; the two parts are disjoint."""
    by_label: dict[int, list[ConsolidatedSample]] = {}
    for s in sorted(samples, key=lambda s: s.provenance.key):
        by_label.setdefault(s.label if s.label is not None else -1, []).append(s)
    eval_rows: list[ConsolidatedSample] = []
    pool_rows: list[ConsolidatedSample] = []
    for label in sorted(by_label):
        members = by_label[label]
        members = [members[i] for i in rng.permutation(len(members))]
        n_eval = int(round(eval_fraction * len(members)))
        if len(members) >= 2:
            n_eval = min(max(n_eval, 1), len(members) - 1)
        eval_rows.extend(members[:n_eval])
        pool_rows.extend(members[n_eval:])
    return eval_rows, pool_rows


def run_pipeline(config: PipelineConfig) -> dict:
    """Chain consolidate, enrich, and train for small fixtures / CI."""
    cmd_consolidate(config)
    cmd_enrich(config)
    result = cmd_train_eval(config)
    return result["manifest"]
