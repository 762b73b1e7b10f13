"""Seeded generator for a small two-task transfer benchmark.

The target task is marker-token lookup: each row's note holds three tokens
from a shared vocabulary, and the label is the majority token class. A large
out-domain pool shares the vocabulary (under a different schema) but carries
no labels, so any lift has to come through pseudo-labeling and valuation.
Half of the pool is concept-bearing, half is junk-token noise, which is what
the score-histogram and valuation checks discriminate on.

Marker tokens are random letter strings drawn from one distribution for both
classes, so no character n-gram is class-correlated by construction; every
token has to be learned from data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TARGET_SIZES = {"clinic_a": 120, "clinic_b": 40, "clinic_c": 40}
POOL_SIZE_EACH = 2500
N_MARKERS_PER_CLASS = 40
N_PRIVATE_PER_CLASS = 16
N_JUNK = 64
TOKENS_PER_NOTE = 3


@dataclass(frozen=True)
class BenchmarkPaths:
    root: Path
    config: Path
    data_dir: Path


def _random_tokens(rng: np.random.Generator, count: int, length: int = 6) -> list[str]:
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    tokens: set[str] = set()
    while len(tokens) < count:
        tokens.add("".join(rng.choice(letters, size=length)))
    return sorted(tokens)


def _note_for_label(
    rng: np.random.Generator,
    pos: list[str],
    neg: list[str],
    label: int,
    private: tuple[list[str], list[str]] | None = None,
    n_private: int = 0,
) -> str:
    """Three tokens whose majority class equals ``label``.

    With ``private`` vocabularies, ``n_private`` of the slots draw from them
    instead of the shared vocabulary. A dataset built this way carries signal
    that no other dataset can teach, which is what gives few-shot adaptation
    real headroom over the zero-shot transfer baseline.
    """
    n_pos = int(rng.integers(2, TOKENS_PER_NOTE + 1)) if label else int(rng.integers(0, 2))
    classes = [1] * n_pos + [0] * (TOKENS_PER_NOTE - n_pos)
    slot_private = [True] * n_private + [False] * (TOKENS_PER_NOTE - n_private)
    classes = [classes[i] for i in rng.permutation(TOKENS_PER_NOTE)]
    slot_private = [slot_private[i] for i in rng.permutation(TOKENS_PER_NOTE)]
    picks = []
    for cls, is_private in zip(classes, slot_private):
        if is_private:
            vocab = private[0] if cls else private[1]
        else:
            vocab = pos if cls else neg
        picks.append(vocab[int(rng.integers(0, len(vocab)))])
    return " ".join(picks)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_schema(path: Path, spec: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec, fh, indent=1)
        fh.write("\n")


def generate(root: str | Path, seed: int = 2024) -> BenchmarkPaths:
    """Write the benchmark CSVs, schemas, and base pipeline config under root."""
    root = Path(root)
    data_dir = root / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_shared = 2 * N_MARKERS_PER_CLASS
    n_private = 2 * N_PRIVATE_PER_CLASS
    all_tokens = _random_tokens(rng, n_shared + n_private + N_JUNK)
    order = rng.permutation(len(all_tokens))
    pos = [all_tokens[i] for i in order[:N_MARKERS_PER_CLASS]]
    neg = [all_tokens[i] for i in order[N_MARKERS_PER_CLASS:n_shared]]
    private_pos = [all_tokens[i] for i in order[n_shared : n_shared + N_PRIVATE_PER_CLASS]]
    private_neg = [all_tokens[i] for i in order[n_shared + N_PRIVATE_PER_CLASS : n_shared + n_private]]
    junk = [all_tokens[i] for i in order[n_shared + n_private :]]

    noise_columns = {
        "clinic_a": ("ward", 40),
        "clinic_b": ("shift", 10),
        "clinic_c": ("device", 12),
    }
    for ds_id, n_rows in TARGET_SIZES.items():
        noise_name, cardinality = noise_columns[ds_id]
        # clinic_a carries its own private markers (two of three slots), so a
        # model that never saw clinic_a rows has headroom left for few-shot.
        private = (private_pos, private_neg) if ds_id == "clinic_a" else None
        n_private_slots = 2 if ds_id == "clinic_a" else 0
        rows = []
        for row_index in range(n_rows):
            label = row_index % 2  # balanced labels by construction
            rows.append(
                [
                    _note_for_label(rng, pos, neg, label, private, n_private_slots),
                    f"{noise_name}{rng.integers(0, cardinality):02d}",
                    f"{rng.uniform(20, 80):.1f}",
                    label,
                ]
            )
        _write_csv(data_dir / f"{ds_id}.csv", ["note", noise_name, "reading", "outcome"], rows)
        _write_schema(
            data_dir / f"{ds_id}.schema.json",
            {
                "note": {"kind": "text", "explanation": "observed marker tokens for the case"},
                noise_name: {"kind": "categorical", "explanation": "recording location code"},
                "reading": {"kind": "numerical", "explanation": "instrument reading", "unit": "au"},
                "outcome": {"kind": "binary", "explanation": "deterioration within follow-up", "is_label": True},
            },
        )

    for ds_id, vocab_pos, vocab_neg in (
        ("registry_concept", pos, neg),
        ("registry_noise", junk[: N_JUNK // 2], junk[N_JUNK // 2 :]),
    ):
        rows = []
        for row_index in range(POOL_SIZE_EACH):
            summary = _note_for_label(rng, vocab_pos, vocab_neg, row_index % 2)
            rows.append([summary, f"src{rng.integers(0, 25):02d}"])
        _write_csv(data_dir / f"{ds_id}.csv", ["summary", "source"], rows)
        _write_schema(
            data_dir / f"{ds_id}.schema.json",
            {
                "summary": {"kind": "text", "explanation": "registry summary tokens"},
                "source": {"kind": "categorical", "explanation": "registry source code"},
            },
        )

    config = {
        "rng_seed": 0,
        "artifact_dir": "artifacts",
        "augment": False,
        "parallelism": 8,
        "regimens": ["scratch", "finetune"],
        "test_fraction": 0.25,
        "target_task": {
            "id": "deterioration",
            "label_name": "outcome",
            "positive_meaning": "the case deteriorated within follow-up",
            "datasets": [
                {"id": ds_id, "csv": f"data/{ds_id}.csv", "schema": f"data/{ds_id}.schema.json"}
                for ds_id in TARGET_SIZES
            ],
        },
        "out_domain_tasks": [
            {
                "id": "registry",
                "datasets": [
                    {
                        "id": ds_id,
                        "csv": f"data/{ds_id}.csv",
                        "schema": f"data/{ds_id}.schema.json",
                    }
                    for ds_id in ("registry_concept", "registry_noise")
                ],
            }
        ],
        "gateway": {"backend": "mock"},
        "audit": {"threshold": 0.5, "max_rounds": 2},
        "valuation": {"k": 5, "budget": 1500, "validation_fraction": 0.3, "histogram_bins": 20},
        # Full-batch descent on the convex loss: margins and the intercept
        # converge smoothly, which keeps pseudo-label thresholds meaningful.
        "train": {
            "learning_rate": 5.0,
            "max_epochs": 300,
            "batch_size": 4096,
            "l2_penalty": 1e-4,
            "early_stop_patience": 30,
            "validation_fraction": 0.2,
        },
        # Few-shot fine-tuning is deliberately gentle so small shot draws
        # refine the zero-shot prior instead of overwriting it.
        "fewshot": {
            "eval_fraction": 0.5,
            "train": {
                "learning_rate": 0.5,
                "max_epochs": 60,
                "early_stop_patience": 60,
                "validation_fraction": 0.1,
            },
        },
    }
    config_path = root / "config.json"
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=1)
        fh.write("\n")
    return BenchmarkPaths(root=root, config=config_path, data_dir=data_dir)


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Generate the synthetic transfer benchmark")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args(argv)
    paths = generate(args.out, args.seed)
    print(f"benchmark written to {paths.root} (config: {paths.config})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
