"""Desk-scale text classifier: seeded hashed character n-grams feeding an
L2-regularized logistic model, plus ranking metrics and the four training
regimens (augment / finetune / scratch / zeroshot).

The featurizer is a pluggable stand-in for a transformer encoder: swap
``featurize_matrix`` / ``featurize`` for another embedding and nothing else
changes.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .consolidate import ConsolidatedSample, PseudoLabel
from .errors import DegenerateLabels, RegimenInputError, UndefinedMetric

REGIMENS = ("augment", "finetune", "scratch", "zeroshot")


# -- featurizer ----------------------------------------------------------------


@dataclass(frozen=True)
class FeaturizerConfig:
    ngram_min: int = 3
    ngram_max: int = 5
    dim: int = 1 << 16
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.ngram_min <= self.ngram_max:
            raise ValueError("need 1 <= ngram_min <= ngram_max")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")


_U64 = np.uint64
_MASK64 = (1 << 64) - 1
_MULT = _U64(0x100000001B3)
_SEED_GOLD = _U64(0x9E3779B97F4A7C15)


def _splitmix64(h: np.ndarray) -> np.ndarray:
    h = h + _SEED_GOLD
    h = (h ^ (h >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> _U64(27))) * _U64(0x94D049BB133111EB)
    return h ^ (h >> _U64(31))


def _seed_state(seed: int, n: int) -> np.uint64:
    """Initial hash state for (seed, n-gram width), mixed in masked Python ints."""
    h = ((seed * 0x100000001B3 + n) + 0x9E3779B97F4A7C15) & _MASK64
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
    return _U64(h ^ (h >> 31))


def _hashed_ngrams(text: str, config: FeaturizerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated (index, signed count) pairs for one text."""
    data = np.frombuffer(text.lower().encode("utf-8"), dtype=np.uint8)
    pieces = []
    for n in range(config.ngram_min, config.ngram_max + 1):
        if len(data) < n:
            continue
        windows = sliding_window_view(data, n).astype(_U64)
        h = np.full(len(windows), _seed_state(config.seed, n))
        for j in range(n):
            h = h * _MULT + windows[:, j]
        pieces.append(_splitmix64(h))
    if not pieces:
        return np.empty(0, dtype=np.int64), np.empty(0)
    h = np.concatenate(pieces)
    idx = (h % _U64(config.dim)).astype(np.int64)
    sign = np.where((h >> _U64(63)).astype(bool), -1.0, 1.0)
    order = np.argsort(idx, kind="stable")
    idx = idx[order]
    sign = sign[order]
    boundaries = np.concatenate(([0], np.flatnonzero(np.diff(idx)) + 1))
    unique_idx = idx[boundaries]
    sums = np.add.reduceat(sign, boundaries)
    keep = sums != 0.0
    return unique_idx[keep], sums[keep]


def featurize(text: str, config: FeaturizerConfig = FeaturizerConfig()) -> np.ndarray:
    """Dense L2-normalized hashed n-gram vector (all-zeros for empty input)."""
    idx, vals = _hashed_ngrams(text, config)
    vec = np.zeros(config.dim)
    if len(idx) == 0:
        return vec
    vec[idx] = vals
    norm = np.linalg.norm(vals)
    if norm > 0:
        vec /= norm
    return vec


def featurize_matrix(
    texts: Sequence[str], config: FeaturizerConfig = FeaturizerConfig()
) -> sparse.csr_matrix:
    """CSR matrix of row-normalized feature vectors, one row per text."""
    indptr = [0]
    indices: list[np.ndarray] = []
    values: list[np.ndarray] = []
    for text in texts:
        idx, vals = _hashed_ngrams(text, config)
        norm = np.linalg.norm(vals)
        if norm > 0:
            vals = vals / norm
        indices.append(idx)
        values.append(vals)
        indptr.append(indptr[-1] + len(idx))
    if indices:
        data = np.concatenate(values)
        cols = np.concatenate(indices)
    else:
        data = np.empty(0)
        cols = np.empty(0, dtype=np.int64)
    return sparse.csr_matrix(
        (data, cols, np.asarray(indptr, dtype=np.int64)),
        shape=(len(texts), config.dim),
    )


# -- model ---------------------------------------------------------------------


@dataclass
class PredictorModel:
    weights: np.ndarray
    bias: float
    featurizer_config: FeaturizerConfig
    training_history: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.weights.shape != (self.featurizer_config.dim,):
            raise ValueError("weights dimension must equal featurizer dimension")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_proba(model: PredictorModel, text: str) -> float:
    """P(y=1 | text) = sigmoid of the linear score; always inside (0, 1)."""
    x = featurize(text, model.featurizer_config)
    z = float(model.weights @ x + model.bias)
    p = float(_sigmoid(np.array([z]))[0])
    return float(np.clip(p, 1e-12, 1.0 - 1e-12))


def predict_scores(model: PredictorModel, texts: Sequence[str]) -> np.ndarray:
    X = featurize_matrix(texts, model.featurizer_config)
    z = X @ model.weights + model.bias
    return np.clip(_sigmoid(np.asarray(z)), 1e-12, 1.0 - 1e-12)


def logistic_loss_and_grad(
    weights: np.ndarray,
    bias: float,
    X,
    y: np.ndarray,
    l2_penalty: float,
) -> tuple[float, np.ndarray, float]:
    """Mean logistic loss with an L2 ridge on the weights, and its gradient."""
    z = np.asarray(X @ weights) + bias
    margin = np.where(y == 1, z, -z)
    loss = float(np.logaddexp(0.0, -margin).mean() + 0.5 * l2_penalty * (weights @ weights))
    residual = _sigmoid(z) - y
    grad_w = np.asarray(X.T @ residual) / len(y) + l2_penalty * weights
    grad_b = float(residual.mean())
    return loss, grad_w, grad_b


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    max_epochs: int = 30
    batch_size: int = 64
    l2_penalty: float = 1e-6
    early_stop_patience: int = 5
    validation_fraction: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs, batch_size, early_stop_patience must be >= 1")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")


def _targets(samples: Sequence[ConsolidatedSample]) -> np.ndarray:
    targets = []
    for sample in samples:
        target = sample.target
        if target is None:
            raise DegenerateLabels(
                f"sample {sample.provenance.key} has neither label nor pseudo-label"
            )
        targets.append(target)
    return np.asarray(targets, dtype=np.float64)


def _stratified_holdout(
    y: np.ndarray, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; every class keeps at least one training row."""
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        members = members[rng.permutation(len(members))]
        n_val = int(round(fraction * len(members)))
        n_val = min(n_val, len(members) - 1)
        val_idx.append(members[:n_val])
        train_idx.append(members[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def train(
    samples: Sequence[ConsolidatedSample],
    config: TrainConfig = TrainConfig(),
    featurizer: FeaturizerConfig = FeaturizerConfig(),
    init: PredictorModel | None = None,
) -> PredictorModel:
    """Mini-batch gradient descent on the regularized logistic loss.

    A stratified validation fraction is held out for early stopping on AUROC
    (falling back to negative training loss when the holdout cannot support
    AUROC); the best-validation checkpoint is returned. With a fixed rng_seed
    the run is bit-reproducible.
    """
    if not samples:
        raise DegenerateLabels("no training samples")
    y = _targets(samples)
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("training samples are single-class")

    X = featurize_matrix([s.text for s in samples], featurizer)
    rng = np.random.default_rng(config.rng_seed)
    train_idx, val_idx = _stratified_holdout(y, config.validation_fraction, rng)
    X_train, y_train = X[train_idx], y[train_idx]
    X_val, y_val = X[val_idx], y[val_idx]
    val_usable = len(val_idx) > 0 and len(np.unique(y_val)) == 2

    if init is not None:
        if init.featurizer_config != featurizer:
            raise ValueError("init model featurizer does not match")
        weights = init.weights.copy()
        bias = float(init.bias)
    else:
        weights = np.zeros(featurizer.dim)
        bias = 0.0

    n = len(train_idx)
    lr = config.learning_rate
    l2 = config.l2_penalty
    history: list[tuple[int, float]] = []
    best_criterion: tuple = (-np.inf,)
    best_weights = weights.copy()
    best_bias = bias
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = perm[start : start + config.batch_size]
            Xb = X_train[batch]
            yb = y_train[batch]
            z = np.asarray(Xb @ weights) + bias
            residual = _sigmoid(z) - yb
            weights -= lr * (np.asarray(Xb.T @ residual) / len(batch) + l2 * weights)
            bias -= lr * float(residual.mean())

        if val_usable:
            score = auroc(np.asarray(X_val @ weights) + bias, y_val)
            val_loss, _, _ = logistic_loss_and_grad(weights, bias, X_val, y_val, l2)
            # AUROC decides; validation loss breaks ties so training continues
            # to grow margins while the ranking is already saturated.
            criterion = (score, -val_loss)
        else:
            loss, _, _ = logistic_loss_and_grad(weights, bias, X_train, y_train, l2)
            score = -loss
            criterion = (score,)
        history.append((epoch, float(score)))
        if criterion > best_criterion:
            best_criterion = criterion
            best_weights = weights.copy()
            best_bias = bias
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break

    return PredictorModel(best_weights, best_bias, featurizer, history)


def pseudo_label(
    model: PredictorModel, external_samples: Sequence[ConsolidatedSample]
) -> list[ConsolidatedSample]:
    """Attach (pseudo-label, confidence) from the model; ties go positive."""
    scores = predict_scores(model, [s.text for s in external_samples])
    out = []
    for sample, p in zip(external_samples, scores):
        value = 1 if p >= 0.5 else 0
        out.append(
            replace(sample, pseudo_label=PseudoLabel(value, float(max(p, 1.0 - p))))
        )
    return out


# -- metrics -------------------------------------------------------------------


def _tie_averaged_ranks(scores: np.ndarray) -> np.ndarray:
    n = len(scores)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUROC: (correctly ordered pairs + half the ties) / (P * N)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    ranks = _tie_averaged_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def prauc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision over descending scores; tied scores keep input order."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise UndefinedMetric("PRAUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    cum_pos = np.cumsum(y_sorted)
    positions = np.arange(1, len(y_sorted) + 1)
    hits = y_sorted == 1
    return float((cum_pos[hits] / positions[hits]).sum() / n_pos)


@dataclass(frozen=True)
class EvalMetrics:
    auroc: float
    prauc: float
    n_test: int
    positive_ratio: float


def evaluate(model: PredictorModel, samples: Sequence[ConsolidatedSample]) -> EvalMetrics:
    labels = _targets(samples).astype(int)
    scores = predict_scores(model, [s.text for s in samples])
    return EvalMetrics(
        auroc=auroc(scores, labels),
        prauc=prauc(scores, labels),
        n_test=len(samples),
        positive_ratio=float(labels.mean()),
    )


# -- regimens ------------------------------------------------------------------


def split_rows(
    samples: Sequence[ConsolidatedSample],
    test_fraction: float,
    rng_seed: int,
) -> tuple[list[ConsolidatedSample], list[ConsolidatedSample]]:
    """Per-dataset, label-stratified train/test split on row groups.

    Paraphrases follow their source row, so augmented copies of a test row
    never leak into training. Test samples are primary descriptions only.
    """
    rows: dict[tuple[str, int], list[ConsolidatedSample]] = {}
    for sample in samples:
        rows.setdefault(
            (sample.provenance.dataset_id, sample.provenance.row_index), []
        ).append(sample)

    rng = np.random.default_rng([rng_seed, 0x5E1E])
    test_keys: set[tuple[str, int]] = set()
    by_group: dict[tuple[str, int], list[tuple[str, int]]] = {}
    for key, members in sorted(rows.items()):
        label = members[0].label
        by_group.setdefault((key[0], -1 if label is None else label), []).append(key)
    for _, keys in sorted(by_group.items()):
        keys = [keys[i] for i in rng.permutation(len(keys))]
        n_test = int(round(test_fraction * len(keys)))
        if len(keys) >= 2:
            n_test = min(max(n_test, 1), len(keys) - 1)
        test_keys.update(keys[:n_test])

    train_out: list[ConsolidatedSample] = []
    test_out: list[ConsolidatedSample] = []
    for key, members in sorted(rows.items()):
        if key in test_keys:
            test_out.extend(m for m in members if m.provenance.paraphrase_index == 0)
        else:
            train_out.extend(members)
    return train_out, test_out


@dataclass
class RegimenResult:
    regimen: str
    model: PredictorModel
    metrics: dict[str, EvalMetrics]


def run_regimen(
    regimen: str,
    target_samples: Sequence[ConsolidatedSample],
    sup_samples: Sequence[ConsolidatedSample],
    config: TrainConfig = TrainConfig(),
    featurizer: FeaturizerConfig = FeaturizerConfig(),
    test_fraction: float = 0.25,
) -> RegimenResult:
    """Train under one regimen and evaluate per held-out target dataset.

    augment: one run on target-train plus the supplementary set.
    finetune: pretrain on the supplementary set, continue on target-train.
    scratch: target-train only. zeroshot: supplementary set only, evaluated
    on the target test split it never saw.
    """
    if regimen not in REGIMENS:
        raise ValueError(f"unknown regimen {regimen!r}")
    if not target_samples:
        raise RegimenInputError("target task samples are required for every regimen")
    if regimen == "zeroshot" and not sup_samples:
        raise RegimenInputError("zeroshot needs a non-empty supplementary set")

    train_part, test_part = split_rows(target_samples, test_fraction, config.rng_seed)

    if regimen == "scratch":
        model = train(train_part, config, featurizer)
    elif regimen == "augment":
        model = train(list(train_part) + list(sup_samples), config, featurizer)
    elif regimen == "finetune":
        if sup_samples:
            pretrained = train(list(sup_samples), config, featurizer)
            model = train(train_part, config, featurizer, init=pretrained)
        else:
            model = train(train_part, config, featurizer)
    else:
        model = train(list(sup_samples), config, featurizer)

    metrics: dict[str, EvalMetrics] = {}
    by_dataset: dict[str, list[ConsolidatedSample]] = {}
    for sample in test_part:
        by_dataset.setdefault(sample.provenance.dataset_id, []).append(sample)
    for dataset_id in sorted(by_dataset):
        metrics[dataset_id] = evaluate(model, by_dataset[dataset_id])
    return RegimenResult(regimen, model, metrics)


# -- model artifact --------------------------------------------------------------


def save_model(model: PredictorModel, path: str | Path) -> None:
    obj = {
        "bias": model.bias,
        "featurizer_config": {
            "ngram_min": model.featurizer_config.ngram_min,
            "ngram_max": model.featurizer_config.ngram_max,
            "dim": model.featurizer_config.dim,
            "seed": model.featurizer_config.seed,
        },
        "training_history": [[epoch, score] for epoch, score in model.training_history],
        "weights_b64": base64.b64encode(
            np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
        ).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_model(path: str | Path) -> PredictorModel:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    fc = FeaturizerConfig(**obj["featurizer_config"])
    weights = np.frombuffer(base64.b64decode(obj["weights_b64"]), dtype="<f8").copy()
    return PredictorModel(
        weights=weights,
        bias=float(obj["bias"]),
        featurizer_config=fc,
        training_history=[(int(e), float(s)) for e, s in obj["training_history"]],
    )
