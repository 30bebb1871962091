"""Pytest fixtures for lesion-bench tests."""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from lesion_bench.core_model import (
    BinaryMask,
    DatasetManifest,
    DiagnosisClass,
    ManifestEntry,
    Partition,
    PredictionRecord,
    SegStratum,
    Task,
)
from lesion_bench.synth import SynthConfig, write_synthetic_dataset


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    tmpdir = Path(tempfile.mkdtemp())
    yield tmpdir
    shutil.rmtree(tmpdir)


@pytest.fixture
def test_manifests_dir():
    """Path to the shipped fixture manifests."""
    return Path(__file__).parent.parent / "test_manifests"


@pytest.fixture
def fixture_1512_path(test_manifests_dir):
    """The 1,512-image classification manifest (1,196 internal + 316 external)."""
    return test_manifests_dir / "classification_1512" / "manifest.csv"


@pytest.fixture
def mask_from_rows():
    """Build a mask from strings where '#' is foreground and '.' background."""

    def build(*rows: str) -> BinaryMask:
        return BinaryMask(np.array([[c == "#" for c in row] for row in rows], dtype=bool))

    return build


@pytest.fixture
def seg_manifest():
    """Three segmentation images across two strata."""
    return DatasetManifest(
        task=Task.SEGMENTATION,
        entries=(
            ManifestEntry("img_b", stratum=SegStratum.NEVI),
            ManifestEntry("img_a", stratum=SegStratum.MEL),
            ManifestEntry("img_c", stratum=SegStratum.NEVI),
        ),
    )


@pytest.fixture
def make_cls_manifest():
    """Classification manifest from (image_id, label, partition) triples."""

    def build(rows) -> DatasetManifest:
        entries = tuple(
            ManifestEntry(image_id, label=DiagnosisClass(label), partition=Partition(partition))
            for image_id, label, partition in rows
        )
        return DatasetManifest(task=Task.CLASSIFICATION, entries=entries)

    return build


@pytest.fixture
def one_hot():
    """A prediction record putting 0.9 on one class and 0.01 elsewhere."""

    def build(image_id: str, label: str) -> PredictionRecord:
        cls = DiagnosisClass(label)
        probs = tuple(0.9 if c is cls else 0.01 for c in DiagnosisClass)
        return PredictionRecord(image_id, probs)

    return build


@pytest.fixture
def small_config():
    """A quick synthetic configuration."""
    return SynthConfig(
        seed=7,
        n_images=8,
        image_size=24,
        n_segmentation_submissions=2,
        n_attribute_submissions=1,
        n_classification_submissions=2,
        attribute_names=("globules", "streaks"),
    )


@pytest.fixture
def synthetic_dir(temp_dir, small_config):
    """A written synthetic dataset with submissions for all three tasks."""
    out = temp_dir / "synthetic"
    write_synthetic_dataset(small_config, out)
    return out
