from pathlib import Path
from typing import Dict

import pytest
import torch

from core.config_handler import ConfigHandler, ExperimentConfig
from core.networks import LFDANetwork
from core.perceptual import PerceptualExtractor
from core.scene_sources import SceneDataset, synthetic_split
from misc.variants_enum import Domain, Split

SHIPPED_ENV = Path(__file__).resolve().parent / "conf" / "lfda.env"

# small enough for CPU tests: 32x32 images, max disparity f * B / d_min = 4 px = W / 8
TINY_SETTINGS: Dict[str, str] = {
    "DATA_HEIGHT": "32",
    "DATA_WIDTH": "32",
    "DATA_FOCAL": "16",
    "DATA_BASELINE": "0.25",
    "DATA_MAX_OBJECTS": "3",
    "DATA_TRAIN_COUNT": "6",
    "DATA_VAL_COUNT": "2",
    "DATA_TEST_COUNT": "2",
    "MODEL_CONTENT_CHANNELS": "8,8,16,16",
    "MODEL_STYLE_CHANNELS": "4,8,8,16",
    "MODEL_DECODER_CHANNELS": "16,8,8",
    "MODEL_GENERATOR_CHANNELS": "16,8,8",
    "MODEL_DISC_CHANNELS": "8,8,8",
    "MODEL_PERCEPTUAL_CHANNELS": "4,4,8,8,8",
    "TRAIN_TOTAL_STEPS": "3",
    "TRAIN_BATCH_SIZE": "2",
    "TRAIN_CHECKPOINT_EVERY": "2",
    "TRAIN_LOG_EVERY": "1",
    "EVAL_MACS_HEIGHT": "32",
    "EVAL_MACS_WIDTH": "64",
    "EVAL_TRANSLATE_SAMPLES": "2",
}


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: desk-scale reproduction runs (set LFDA_RUN_SLOW=1)")


def make_experiment(**overrides: str) -> ExperimentConfig:
    return ConfigHandler(overrides={**TINY_SETTINGS, **overrides}).experiment()


def write_env_file(path: Path, **overrides: str) -> Path:
    settings = {**TINY_SETTINGS, **overrides}
    path.write_text("\n".join(f"{key}={value}" for key, value in settings.items()) + "\n")
    return path


@pytest.fixture
def tiny_experiment() -> ExperimentConfig:
    return make_experiment()


@pytest.fixture
def tiny_network(tiny_experiment: ExperimentConfig) -> LFDANetwork:
    return LFDANetwork(tiny_experiment.model, tiny_experiment.data)


@pytest.fixture
def tiny_extractor() -> PerceptualExtractor:
    return PerceptualExtractor((4, 4, 8, 8, 8), seed=7)


@pytest.fixture(scope="session")
def tiny_splits() -> Dict[str, SceneDataset]:
    data = make_experiment().data
    return {
        "source_train": synthetic_split(data, Domain.SOURCE, Split.TRAIN),
        "target_train": synthetic_split(data, Domain.TARGET, Split.TRAIN),
        "target_val": synthetic_split(data, Domain.TARGET, Split.VAL),
        "source_val": synthetic_split(data, Domain.SOURCE, Split.VAL),
    }


@pytest.fixture
def tiny_env_file(tmp_path: Path) -> Path:
    return write_env_file(tmp_path / "tiny.env")


@pytest.fixture(autouse=True)
def _seed_torch() -> None:
    torch.manual_seed(0)
