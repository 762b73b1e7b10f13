"""Data-value scoring of pseudo-labeled samples.

The utility of a training subset S for one validation point is the fraction
of its k nearest members (cosine distance over unit vectors, ties broken by
ascending provenance key) that share the validation target, divided by k;
the empty set has utility 0. ``exact_shapley`` enumerates all subsets (the
test oracle, n <= 12); ``knn_shapley`` computes the same values in closed
form per validation point, in O(N log N), and scales to 100K+ samples.
Final scores are means over validation points, so the efficiency axiom reads
"sum of scores = mean full-set utility".
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .consolidate import ConsolidatedSample
from .errors import DimensionError, TooLargeForExact


@dataclass(frozen=True, eq=False)
class EmbeddedSample:
    """A provenance-keyed unit vector with a binary target."""

    sample_ref: str
    vector: np.ndarray
    target: int

    def __post_init__(self):
        if self.target not in (0, 1):
            raise ValueError("target must be 0 or 1")
        vec = np.asarray(self.vector, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"vector of {self.sample_ref!r} is not L2-normalized (|v|={norm})")
        object.__setattr__(self, "vector", vec)


@dataclass
class ValuationResult:
    """Per-sample scores together with the k and validation set that produced them."""

    scores: dict[str, float]
    k: int
    n_validation: int
    value_of_full: float


def _stack(samples: Sequence[EmbeddedSample]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    dims = {s.vector.shape[0] for s in samples}
    if len(dims) > 1:
        raise DimensionError(f"inconsistent embedding dimensions: {sorted(dims)}")
    X = np.stack([s.vector for s in samples])
    y = np.array([s.target for s in samples], dtype=np.int64)
    keys = [s.sample_ref for s in samples]
    return X, y, keys


def knn_utility(selected: Sequence[EmbeddedSample], val: EmbeddedSample, k: int) -> float:
    """V(S): matching fraction of the min(k, |S|) nearest members, over k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not selected:
        return 0.0
    dims = {s.vector.shape[0] for s in selected}
    if len(dims) > 1 or val.vector.shape[0] not in dims:
        raise DimensionError("selected/validation vectors disagree on dimension")
    ordered = sorted(
        selected, key=lambda s: (1.0 - float(s.vector @ val.vector), s.sample_ref)
    )
    nearest = ordered[: min(k, len(ordered))]
    return sum(1 for s in nearest if s.target == val.target) / k


def exact_shapley(
    train: Sequence[EmbeddedSample],
    val_set: Sequence[EmbeddedSample],
    k: int,
) -> ValuationResult:
    """Shapley scores by full 2^n subset enumeration (n <= 12); the oracle."""
    n = len(train)
    if n == 0 or not val_set:
        raise ValueError("train and val_set must be non-empty")
    if n > 12:
        raise TooLargeForExact(f"exact enumeration capped at 12 samples, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    X, y, keys = _stack(train)
    Xv, yv, _ = _stack(val_set)
    if X.shape[1] != Xv.shape[1]:
        raise DimensionError("train/validation vectors disagree on dimension")

    # Per validation point: train indices in (distance, key) order, plus match flags.
    orders = []
    matches = []
    for j in range(len(val_set)):
        dist = 1.0 - X @ Xv[j]
        order = sorted(range(n), key=lambda i: (dist[i], keys[i]))
        orders.append(order)
        matches.append([1.0 if y[i] == yv[j] else 0.0 for i in range(n)])

    # Mean utility over validation points for every subset bitmask.
    n_val = len(val_set)
    vbar = np.zeros(1 << n)
    for mask in range(1, 1 << n):
        size = mask.bit_count()
        take = min(k, size)
        total = 0.0
        for order, match in zip(orders, matches):
            found = 0
            acc = 0.0
            for i in order:
                if mask >> i & 1:
                    acc += match[i]
                    found += 1
                    if found == take:
                        break
            total += acc / k
        vbar[mask] = total / n_val

    # phi_i = sum over S not containing i of |S|!(n-1-|S|)!/n! * marginal(i, S).
    weights = [
        math.factorial(s) * math.factorial(n - 1 - s) / math.factorial(n) for s in range(n)
    ]
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        for mask in range(1 << n):
            if mask & bit:
                continue
            phi[i] += weights[mask.bit_count()] * (vbar[mask | bit] - vbar[mask])

    return ValuationResult(
        scores=dict(zip(keys, phi.tolist())),
        k=k,
        n_validation=n_val,
        value_of_full=float(vbar[(1 << n) - 1]),
    )


def _knn_shapley_core(
    X_train,
    y_train: np.ndarray,
    keys: Sequence[str],
    X_val,
    y_val: np.ndarray,
    k: int,
    parallelism: int = 1,
    chunk_size: int = 32,
) -> tuple[np.ndarray, float]:
    """Closed-form scores for the KNN utility, summed over validation points.

    Chunk boundaries are fixed (independent of ``parallelism``) and partial
    results are reduced in chunk order, so the output is bit-identical for
    any worker count.
    """
    n = X_train.shape[0]
    n_val = X_val.shape[0]
    key_array = np.asarray(keys)
    key_rank = np.empty(n, dtype=np.int64)
    key_rank[np.argsort(key_array, kind="stable")] = np.arange(n)

    terminal = min(k, n) / (k * n)
    ranks = np.arange(1, n, dtype=np.float64)
    step_coef = np.minimum(float(k), ranks) / (k * ranks)

    def do_chunk(start: int, stop: int) -> tuple[np.ndarray, float]:
        block = X_val[start:stop]
        product = X_train @ block.T
        if sparse.issparse(product):
            product = product.toarray()
        dist = 1.0 - np.asarray(product, dtype=np.float64)
        phi_part = np.zeros(n)
        vfull_part = 0.0
        for t in range(stop - start):
            order = np.lexsort((key_rank, dist[:, t]))
            matched = (y_train[order] == y_val[start + t]).astype(np.float64)
            s_sorted = np.empty(n)
            s_sorted[n - 1] = matched[n - 1] * terminal
            if n > 1:
                delta = (matched[:-1] - matched[1:]) * step_coef
                s_sorted[:-1] = s_sorted[n - 1] + np.cumsum(delta[::-1])[::-1]
            contribution = np.empty(n)
            contribution[order] = s_sorted
            phi_part += contribution
            vfull_part += matched[: min(k, n)].sum() / k
        return phi_part, vfull_part

    bounds = [(s, min(s + chunk_size, n_val)) for s in range(0, n_val, chunk_size)]
    if parallelism <= 1 or len(bounds) == 1:
        parts = [do_chunk(s, e) for s, e in bounds]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(do_chunk, s, e) for s, e in bounds]
            parts = [f.result() for f in futures]

    phi = np.zeros(n)
    vfull = 0.0
    for phi_part, vfull_part in parts:
        phi += phi_part
        vfull += vfull_part
    return phi / n_val, vfull / n_val


def knn_shapley(
    train: Sequence[EmbeddedSample],
    val_set: Sequence[EmbeddedSample],
    k: int,
    parallelism: int = 1,
) -> ValuationResult:
    """Exact Shapley scores for the KNN utility, one O(N log N) pass per
    validation point, averaged over the validation set."""
    if not train or not val_set:
        raise ValueError("train and val_set must be non-empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    X, y, keys = _stack(train)
    Xv, yv, _ = _stack(val_set)
    if X.shape[1] != Xv.shape[1]:
        raise DimensionError("train/validation vectors disagree on dimension")
    phi, value_of_full = _knn_shapley_core(X, y, keys, Xv, yv, k, parallelism)
    return ValuationResult(
        scores=dict(zip(keys, phi.tolist())),
        k=k,
        n_validation=len(val_set),
        value_of_full=float(value_of_full),
    )


def _reassign_overfull(quotas: dict[int, int], counts: dict[int, int]) -> dict[int, int]:
    """Clip quotas above their class population and move the surplus to
    classes with room, largest headroom first. Warns when it has to act."""
    overfull = [c for c in quotas if quotas[c] > counts[c]]
    if not overfull:
        return quotas
    warnings.warn(
        f"class quota exceeded population for classes {overfull}; surplus reassigned",
        stacklevel=3,
    )
    surplus = 0
    for c in overfull:
        surplus += quotas[c] - counts[c]
        quotas[c] = counts[c]
    for c in sorted(quotas, key=lambda c: (-(counts[c] - quotas[c]), c)):
        if surplus == 0:
            break
        room = counts[c] - quotas[c]
        take = min(room, surplus)
        quotas[c] += take
        surplus -= take
    return quotas


def _largest_remainder_quotas(counts: dict[int, int], budget: int) -> dict[int, int]:
    total = sum(counts.values())
    raw = {c: budget * n / total for c, n in counts.items()}
    quotas = {c: int(math.floor(v)) for c, v in raw.items()}
    leftover = budget - sum(quotas.values())
    by_remainder = sorted(counts, key=lambda c: (-(raw[c] - quotas[c]), c))
    for c in by_remainder:
        if leftover == 0:
            break
        quotas[c] += 1
        leftover -= 1
    return _reassign_overfull(quotas, counts)


def stratified_select(
    scored: Sequence[tuple[ConsolidatedSample, float]],
    budget: int,
) -> list[ConsolidatedSample]:
    """Pick the cleaned supplementary set: per-class quotas proportional to
    the pseudo-label distribution (largest-remainder rounding), filled by the
    top-scored samples of each class. Output is sorted by provenance key."""
    if budget > len(scored):
        raise ValueError(f"budget {budget} exceeds pool size {len(scored)}")
    if budget == len(scored):
        return sorted((s for s, _ in scored), key=lambda s: s.provenance.key)

    def class_of(sample: ConsolidatedSample) -> int:
        target = sample.target
        if target is None:
            raise ValueError(f"sample {sample.provenance.key} has no label or pseudo-label")
        return target

    by_class: dict[int, list[tuple[ConsolidatedSample, float]]] = {}
    for sample, phi in scored:
        by_class.setdefault(class_of(sample), []).append((sample, phi))

    counts = {c: len(members) for c, members in by_class.items()}
    quotas = _largest_remainder_quotas(counts, budget)

    selected: list[ConsolidatedSample] = []
    for c, members in by_class.items():
        members.sort(key=lambda pair: (-pair[1], pair[0].provenance.key))
        selected.extend(sample for sample, _ in members[: quotas[c]])
    selected.sort(key=lambda s: s.provenance.key)
    return selected


def export_score_histogram(
    result: ValuationResult,
    bins: int,
    targets: Mapping[str, int] | None = None,
) -> list[tuple[float, float, int, float | None]]:
    """Histogram rows (bin_low, bin_high, count, positive_ratio) over scores.

    ``targets`` maps provenance key to pseudo-label; when given, each bin also
    reports the positive pseudo-label ratio of its members.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    keys = sorted(result.scores)
    values = np.array([result.scores[key] for key in keys])
    counts, edges = np.histogram(values, bins=bins)
    rows: list[tuple[float, float, int, float | None]] = []
    if targets is not None:
        labels = np.array([targets[key] for key in keys], dtype=np.float64)
    bin_index = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    for b in range(bins):
        ratio: float | None = None
        if targets is not None and counts[b] > 0:
            ratio = float(labels[bin_index == b].mean())
        rows.append((float(edges[b]), float(edges[b + 1]), int(counts[b]), ratio))
    return rows


def write_scores_csv(
    scored: Sequence[tuple[ConsolidatedSample, float]], path: str | Path
) -> None:
    """Score artifact: (provenance_key, pseudo_label, confidence, phi)."""
    rows = sorted(scored, key=lambda pair: pair[0].provenance.key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["provenance_key", "pseudo_label", "confidence", "phi"])
        for sample, phi in rows:
            pseudo = sample.pseudo_label
            writer.writerow(
                [
                    sample.provenance.key,
                    "" if pseudo is None else pseudo.value,
                    "" if pseudo is None else repr(pseudo.confidence),
                    repr(phi),
                ]
            )


def write_histogram_csv(
    rows: Sequence[tuple[float, float, int, float | None]], path: str | Path
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count", "positive_ratio"])
        for low, high, count, ratio in rows:
            writer.writerow([repr(low), repr(high), count, "" if ratio is None else repr(ratio)])
