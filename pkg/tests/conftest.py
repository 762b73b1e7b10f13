import numpy as np
import pytest
from hypothesis import settings

from anypredict.consolidate import ConsolidatedSample, Provenance
from anypredict.gateway import Gateway, GatewayConfig
from anypredict.tabular import CellValue, ColumnSchema, TableDataset

settings.register_profile("suite", deadline=None, max_examples=100)
settings.load_profile("suite")


@pytest.fixture
def mock_gateway():
    return Gateway(GatewayConfig(backend="mock"))


@pytest.fixture
def lossy_gateway():
    return Gateway(GatewayConfig(backend="mock", mock_variant="lossy"))


@pytest.fixture
def patient_schema():
    return (
        ColumnSchema("age", "numerical", "the age of the patient in years"),
        ColumnSchema("gender", "categorical", "the gender of the patient"),
        ColumnSchema("height", "numerical", "height in meters"),
        ColumnSchema("weight", "numerical", "weight in kilograms"),
    )


@pytest.fixture
def patient_dataset(patient_schema):
    rows = (
        (
            CellValue.numerical(18.0, "18"),
            CellValue.categorical("f"),
            CellValue.numerical(1.7, "1.7"),
            CellValue.numerical(60.0, "60"),
        ),
    )
    return TableDataset("trial_a", patient_schema, rows, labels=(0,), task_id="mortality")


@pytest.fixture
def tumor_dataset():
    schema = (
        ColumnSchema("post-menopause", "binary", "post-menopausal at enrollment"),
        ColumnSchema("prior hormonal therapy", "binary", "received hormonal therapy before"),
        ColumnSchema("tumor size", "numerical", "tumor size in centimeters"),
    )
    rows = (
        (CellValue.binary(True), CellValue.binary(False), CellValue.numerical(3.0, "3.0")),
        (CellValue.binary(False), CellValue.binary(True), CellValue.numerical(1.2, "1.2")),
    )
    return TableDataset("trial_b", schema, rows, labels=(1, 0), task_id="mortality")


def make_samples(texts_labels, dataset_id="toy"):
    return [
        ConsolidatedSample(text, Provenance(dataset_id, i), label=label)
        for i, (text, label) in enumerate(texts_labels)
    ]


def token_corpus(n, rng_seed=0, dataset_id="toy", pos_token="brightmark", neg_token="darkmark"):
    """Linearly separable corpus: the class token decides the label."""
    rng = np.random.default_rng(rng_seed)
    fillers = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    out = []
    for i in range(n):
        label = i % 2
        token = pos_token if label else neg_token
        tail = " ".join(rng.choice(fillers, size=3))
        out.append((f"The note is {token} {tail}.", label))
    return make_samples(out, dataset_id)
