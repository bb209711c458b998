"""공통 테스트 픽스처."""

import json
from pathlib import Path

import pytest
import torch

from xspec_frontalizer.data import FaceDataset, load_manifest
from xspec_frontalizer.synthetic import generate_synthetic_dataset
from xspec_frontalizer.types import (
    ClassifierConfig,
    CriticConfig,
    EmbedderConfig,
    GeneratorConfig,
    TrainConfig,
)

POSES = [-60.0, -30.0, 30.0, 60.0]


def tiny_config_dict(**updates) -> dict:
    """CPU에서 빠르게 도는 작은 네트워크 설정."""
    data = {
        "generator": {"encoder_channels": [8, 16, 16, 16, 16]},
        "critic": {"channels": [4, 8, 8, 8, 8]},
        "classifier": {"hidden_dim": 16},
        "embedder": {"dim": 16},
        "batch_size": 4,
        "total_steps": 3,
        "checkpoint_every": 2,
        "log_every": 1,
    }
    data.update(updates)
    return data


def tiny_config(**updates) -> TrainConfig:
    return TrainConfig.model_validate(tiny_config_dict(**updates))


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    """작은 학습 설정 픽스처."""
    return tiny_config()


@pytest.fixture
def tiny_generator_config() -> GeneratorConfig:
    return GeneratorConfig(encoder_channels=[8, 16, 16, 16, 16])


@pytest.fixture
def tiny_critic_config() -> CriticConfig:
    return CriticConfig(channels=[4, 8, 8, 8, 8])


@pytest.fixture
def tiny_classifier_config() -> ClassifierConfig:
    return ClassifierConfig(hidden_dim=16)


@pytest.fixture
def tiny_embedder_config() -> EmbedderConfig:
    return EmbedderConfig(dim=16)


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    """CLI용 작은 설정 JSON 파일."""
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict()), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """8명, 포즈 4개 합성 데이터셋 (세션 공유, 읽기 전용)."""
    out_dir = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic_dataset(8, POSES, out_dir, seed=7)


@pytest.fixture
def dataset(synthetic_manifest: Path) -> FaceDataset:
    return load_manifest(synthetic_manifest)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield
