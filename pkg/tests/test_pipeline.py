import csv
import dataclasses
import json
import shutil

import numpy as np
import pytest

from anypredict import cli, pipeline
from anypredict.consolidate import read_samples
from anypredict.errors import ConfigError, DatasetNotFound, PipelineOrderError


def write_benchmark_fixture(root, n_a=40, n_b=30, n_ood=60, seed=42):
    """Small two-task fixture in the same shape as the full benchmark."""
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pos = [f"{c}brgt" for c in "abcdefgh"]
    neg = [f"{c}drk" for c in "abcdefgh"]

    def note(label):
        n_pos = int(rng.integers(2, 4)) if label else int(rng.integers(0, 2))
        picks = [pos[i] for i in rng.integers(0, len(pos), n_pos)]
        picks += [neg[i] for i in rng.integers(0, len(neg), 3 - n_pos)]
        return " ".join(picks)

    def write_target(name, n):
        with open(data / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["note", "site", "outcome"])
            for i in range(n):
                label = i % 2
                w.writerow([note(label), f"s{rng.integers(0, 5)}", label])
        (data / f"{name}.schema.json").write_text(
            json.dumps(
                {
                    "note": {"kind": "text", "explanation": "observed tokens"},
                    "site": {"kind": "categorical", "explanation": "site code"},
                    "outcome": {"kind": "binary", "explanation": "label", "is_label": True},
                }
            )
        )

    write_target("clinic_a", n_a)
    write_target("clinic_b", n_b)

    with open(data / "registry_x.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["summary", "source"])
        for i in range(n_ood):
            w.writerow([note(i % 2), f"r{rng.integers(0, 5)}"])
    (data / "registry_x.schema.json").write_text(
        json.dumps(
            {
                "summary": {"kind": "text", "explanation": "registry tokens"},
                "source": {"kind": "categorical", "explanation": "source code"},
            }
        )
    )

    config = {
        "rng_seed": 3,
        "artifact_dir": "artifacts",
        "augment": False,
        "parallelism": 2,
        "regimens": ["scratch"],
        "test_fraction": 0.25,
        "target_task": {
            "id": "outcome",
            "label_name": "outcome",
            "positive_meaning": "positive outcome",
            "datasets": [
                {"id": "clinic_a", "csv": "data/clinic_a.csv", "schema": "data/clinic_a.schema.json"},
                {"id": "clinic_b", "csv": "data/clinic_b.csv", "schema": "data/clinic_b.schema.json"},
            ],
        },
        "out_domain_tasks": [
            {
                "id": "registry",
                "datasets": [
                    {
                        "id": "registry_x",
                        "csv": "data/registry_x.csv",
                        "schema": "data/registry_x.schema.json",
                    }
                ],
            }
        ],
        "gateway": {"backend": "mock"},
        "audit": {"threshold": 0.5, "max_rounds": 2},
        "valuation": {"k": 3, "budget": 40, "validation_fraction": 0.3, "histogram_bins": 8},
        "train": {
            "learning_rate": 5.0,
            "max_epochs": 120,
            "batch_size": 512,
            "l2_penalty": 1e-4,
            "early_stop_patience": 15,
            "validation_fraction": 0.2,
        },
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=1))
    return config_path


@pytest.fixture(scope="module")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    write_benchmark_fixture(root)
    return root


@pytest.fixture(scope="module")
def consolidated(fixture_root):
    config = pipeline.load_config(fixture_root / "config.json")
    pipeline.cmd_consolidate(config)
    return config


class TestConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            pipeline.load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            pipeline.load_config(path)

    def test_missing_dataset_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(
            json.dumps(
                {
                    "artifact_dir": "a",
                    "target_task": {
                        "id": "t",
                        "datasets": [{"id": "x", "csv": "gone.csv", "schema": "gone.json"}],
                    },
                }
            )
        )
        with pytest.raises(ConfigError):
            pipeline.load_config(path)

    def test_env_interpolation(self, fixture_root, monkeypatch):
        raw = json.loads((fixture_root / "config.json").read_text())
        raw["artifact_dir"] = "${PIPE_TEST_DIR}"
        path = fixture_root / "config_env.json"
        path.write_text(json.dumps(raw))
        monkeypatch.setenv("PIPE_TEST_DIR", "env_artifacts")
        config = pipeline.load_config(path)
        assert config.artifact_dir.name == "env_artifacts"
        monkeypatch.delenv("PIPE_TEST_DIR")
        with pytest.raises(ConfigError):
            pipeline.load_config(path)

    def test_unknown_embedding_source(self, fixture_root):
        raw = json.loads((fixture_root / "config.json").read_text())
        raw["valuation"]["embedding"] = "transformer"
        path = fixture_root / "config_emb.json"
        path.write_text(json.dumps(raw))
        with pytest.raises(ConfigError):
            pipeline.load_config(path)

    def test_seed_override_changes_digest(self, fixture_root):
        a = pipeline.load_config(fixture_root / "config.json")
        b = pipeline.load_config(fixture_root / "config.json", seed_override=99)
        assert a.config_digest != b.config_digest
        assert b.rng_seed == 99


class TestStepOrdering:
    def test_enrich_before_consolidate(self, fixture_root):
        config = pipeline.load_config(fixture_root / "config.json")
        fresh = dataclasses.replace(config, artifact_dir=fixture_root / "untouched")
        with pytest.raises(PipelineOrderError):
            pipeline.cmd_enrich(fresh)

    def test_train_before_consolidate(self, fixture_root):
        config = pipeline.load_config(fixture_root / "config.json")
        fresh = dataclasses.replace(config, artifact_dir=fixture_root / "untouched2")
        with pytest.raises(PipelineOrderError):
            pipeline.cmd_train_eval(fresh)


class TestConsolidateStep:
    def test_faithful_mock_all_pass(self, consolidated):
        config = consolidated
        samples = read_samples(config.artifact_dir / pipeline.SAMPLES_TARGET)
        assert len(samples) == 70
        assert all(s.audit_status == "passed" for s in samples)
        with open(config.artifact_dir / pipeline.AUDIT_SUMMARY) as fh:
            rows = list(csv.DictReader(fh))
        assert {r["dataset_id"] for r in rows} == {"clinic_a", "clinic_b", "registry_x"}
        assert all(float(r["mned_after"]) == 1.0 for r in rows)

    def test_lossy_mock_improves_summary(self, fixture_root):
        config = pipeline.load_config(fixture_root / "config.json")
        lossy = dataclasses.replace(
            config,
            gateway=dataclasses.replace(config.gateway, mock_variant="lossy"),
            artifact_dir=fixture_root / "artifacts_lossy",
        )
        pipeline.cmd_consolidate(lossy)
        with open(lossy.artifact_dir / pipeline.AUDIT_SUMMARY) as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            assert float(row["mned_after"]) > float(row["mned_before"])
        samples = read_samples(lossy.artifact_dir / pipeline.SAMPLES_TARGET)
        assert all(s.audit_status == "corrected" for s in samples)

    def test_manifest_written(self, consolidated):
        manifest = json.loads((consolidated.artifact_dir / pipeline.MANIFEST).read_text())
        assert manifest["config_digest"] == consolidated.config_digest
        artifacts = manifest["steps"]["consolidate"]["artifacts"]
        assert set(artifacts) == {
            pipeline.SAMPLES_TARGET,
            pipeline.SAMPLES_OUTDOMAIN,
            pipeline.AUDIT_REPORTS,
            pipeline.AUDIT_SUMMARY,
        }


class TestEnrichStep:
    def test_budget_covers_pool_selects_everything(self, consolidated):
        result = pipeline.cmd_enrich(consolidated)
        assert result["n_scored"] == 60
        assert result["n_selected"] == 40  # budget
        cleaned = read_samples(consolidated.artifact_dir / pipeline.TSUP)
        assert len(cleaned) == 40
        assert all(s.pseudo_label is not None for s in cleaned)

    def test_budget_larger_than_pool(self, consolidated, fixture_root):
        big = dataclasses.replace(
            consolidated,
            valuation_budget=10_000,
            artifact_dir=consolidated.artifact_dir,
        )
        with pytest.warns(UserWarning):
            result = pipeline.cmd_enrich(big)
        assert result["n_selected"] == result["n_scored"]

    def test_scores_csv_layout(self, consolidated):
        with open(consolidated.artifact_dir / pipeline.SCORES) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert header == ["provenance_key", "pseudo_label", "confidence", "phi"]
        assert len(rows) == 60
        keys = [r[0] for r in rows]
        assert keys == sorted(keys)

    def test_deterministic_rerun_same_digests(self, consolidated):
        pipeline.cmd_enrich(consolidated)
        first = json.loads((consolidated.artifact_dir / pipeline.MANIFEST).read_text())
        pipeline.cmd_enrich(consolidated)
        second = json.loads((consolidated.artifact_dir / pipeline.MANIFEST).read_text())
        assert (
            pipeline.manifest_digests(first)["artifacts"]["enrich"]
            == pipeline.manifest_digests(second)["artifacts"]["enrich"]
        )


class TestTrainStep:
    def test_single_regimen_metrics(self, consolidated):
        result = pipeline.cmd_train_eval(consolidated)
        assert set(result["metrics"]) == {"scratch"}
        with open(consolidated.artifact_dir / pipeline.METRICS) as fh:
            rows = list(csv.DictReader(fh))
        assert {r["dataset_id"] for r in rows} == {"clinic_a", "clinic_b"}

    def test_all_regimens_and_ranking(self, consolidated):
        config = dataclasses.replace(
            consolidated, regimens=("augment", "finetune", "scratch", "zeroshot")
        )
        result = pipeline.cmd_train_eval(config)
        assert set(result["metrics"]) == {"augment", "finetune", "scratch", "zeroshot"}
        with open(config.artifact_dir / pipeline.METRICS) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8  # 4 regimens x 2 datasets
        with open(config.artifact_dir / pipeline.RANKING) as fh:
            ranking = list(csv.DictReader(fh))
        assert {r["regimen"] for r in ranking} == set(result["metrics"])
        for row in ranking:
            assert 1.0 <= float(row["avg_rank_auroc"]) <= 4.0


class TestZeroshotProtocol:
    def test_exclusion_is_total(self, consolidated):
        result = pipeline.cmd_zeroshot_protocol(consolidated, "clinic_a")
        out_dir = consolidated.artifact_dir / "zeroshot_clinic_a"
        for name in (pipeline.SCORES, pipeline.TSUP):
            content = (out_dir / name).read_text()
            assert "clinic_a:" not in content
        assert result["metrics"].n_test == 40
        assert 0.0 <= result["metrics"].auroc <= 1.0

    def test_unknown_dataset(self, consolidated):
        with pytest.raises(DatasetNotFound):
            pipeline.cmd_zeroshot_protocol(consolidated, "clinic_z")


class TestFewshotProtocol:
    def test_zero_shots_equals_zeroshot_model_on_eval_split(self, consolidated):
        result = pipeline.cmd_fewshot_protocol(consolidated, "clinic_b", [0, 4], [11])
        rows = result["rows"]
        by_shots = {req: m for _, req, used, _, m in rows}
        assert 0 in by_shots and 4 in by_shots

    def test_shot_draws_disjoint_from_eval(self, consolidated):
        # protocol-level invariant: eval rows and pool rows cannot overlap
        target = read_samples(consolidated.artifact_dir / pipeline.SAMPLES_TARGET)
        held = [
            s
            for s in target
            if s.provenance.dataset_id == "clinic_b" and s.provenance.paraphrase_index == 0
        ]
        rng = np.random.default_rng([11, 0xFE])
        eval_rows, pool_rows = pipeline._split_eval_pool(held, 0.25, rng)
        eval_keys = {s.provenance.key for s in eval_rows}
        pool_keys = {s.provenance.key for s in pool_rows}
        assert not eval_keys & pool_keys
        assert eval_keys | pool_keys == {s.provenance.key for s in held}

    def test_oversized_shots_clipped_with_warning(self, consolidated):
        with pytest.warns(UserWarning):
            result = pipeline.cmd_fewshot_protocol(consolidated, "clinic_b", [500], [5])
        (_, requested, used, _, _), = result["rows"]
        assert requested == 500
        assert used < 500

    def test_aggregate_csv(self, consolidated):
        pipeline.cmd_fewshot_protocol(consolidated, "clinic_b", [0, 4], [1, 2])
        agg = consolidated.artifact_dir / "fewshot_clinic_b" / "aggregate.csv"
        rows = list(csv.DictReader(open(agg)))
        assert [r["shots_requested"] for r in rows] == ["0", "4"]


class TestCli:
    def test_run_and_exit_codes(self, tmp_path):
        root = tmp_path / "cli"
        config_path = write_benchmark_fixture(root, n_a=20, n_b=16, n_ood=20, seed=7)
        assert cli.main(["run", "--config", str(config_path)]) == 0
        manifest = json.loads((root / "artifacts" / pipeline.MANIFEST).read_text())
        assert set(manifest["steps"]) == {"consolidate", "enrich", "train"}

    def test_config_error_exit_code(self, tmp_path):
        missing = tmp_path / "missing.json"
        assert cli.main(["run", "--config", str(missing)]) == cli.EXIT_CONFIG

    def test_order_error_exit_code(self, tmp_path):
        root = tmp_path / "cli2"
        config_path = write_benchmark_fixture(root, n_a=20, n_b=16, n_ood=20)
        assert cli.main(["enrich", "--config", str(config_path)]) == cli.EXIT_ORDER

    def test_gateway_error_exit_code(self, tmp_path):
        root = tmp_path / "cli3"
        config_path = write_benchmark_fixture(root, n_a=20, n_b=16, n_ood=20)
        raw = json.loads(config_path.read_text())
        cache = root / "empty_cache.jsonl"
        cache.write_text("")
        raw["gateway"] = {"backend": "replay", "cache_path": str(cache)}
        config_path.write_text(json.dumps(raw))
        assert cli.main(["consolidate", "--config", str(config_path)]) == cli.EXIT_GATEWAY

    def test_data_error_exit_code(self, tmp_path):
        root = tmp_path / "cli4"
        config_path = write_benchmark_fixture(root, n_a=20, n_b=16, n_ood=20)
        assert (
            cli.main(["zeroshot", "--config", str(config_path), "--dataset", "ghost"])
            == cli.EXIT_DATA
        )
