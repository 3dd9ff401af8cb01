from __future__ import annotations

import os
from pathlib import Path

import pytest

from cropforge.decoder import DecoderConfig
from cropforge.encoder import ConceptVocabulary, EncoderParams, SyntheticEncoder
from cropforge.models.core import load_manifest, load_samples
from cropforge.models.seed import GeneratorParams, generate_synthetic

CONCEPTS = ["woman", "dog", "boat", "cat", "tree", "car", "bird", "horse"]


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CROPFORGE_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set CROPFORGE_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def vocab() -> ConceptVocabulary:
    return ConceptVocabulary(CONCEPTS, dim=16, seed=7)


@pytest.fixture
def encoder(vocab) -> SyntheticEncoder:
    return SyntheticEncoder(vocab, EncoderParams(grid_side=6, dim=16, noise=0.0, seed=7))


@pytest.fixture
def tiny_decoder() -> DecoderConfig:
    return DecoderConfig(num_queries=4, num_layers=1, model_dim=16, num_heads=2, mlp_hidden=16)


@pytest.fixture
def vocab_file(tmp_path) -> Path:
    path = tmp_path / "vocab.txt"
    path.write_text("# test concepts\n" + "\n".join(CONCEPTS) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def dataset_dir(tmp_path) -> Path:
    out = tmp_path / "data"
    params = GeneratorParams(canvas=48, write_images=True)
    generate_synthetic(out, {"train": 12, "val": 2, "test": 3}, CONCEPTS, seed=7, params=params)
    return out


@pytest.fixture
def train_samples(dataset_dir):
    return load_samples(load_manifest(dataset_dir / "train"), training=True)


@pytest.fixture
def test_samples(dataset_dir):
    return load_samples(load_manifest(dataset_dir / "test"))
