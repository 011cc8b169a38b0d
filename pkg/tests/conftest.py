import pytest
import torch


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def test_data_dir():
    from pathlib import Path

    module_dir = Path(__file__).resolve().parent
    test_data_dir = module_dir / "test_data"
    return test_data_dir.resolve()


@pytest.fixture
def texture():
    from vjdd.core.motionsynth import random_texture

    return random_texture(48, 48, torch.Generator().manual_seed(7))


@pytest.fixture
def tiny_config(tmp_path):
    from vjdd.core.config import RunConfig

    return RunConfig.build(
        {
            "model.buffer_size": 3,
            "model.feat_channels": 4,
            "model.hidden_channels": 8,
            "model.max_channels": 16,
            "model.f_max": 2,
            "data.crop_size": 32,
            "data.clip_len": 3,
            "data.batch_size": 1,
            "motion.margin": 4,
            "motion.max_translation": 1.0,
            "motion.max_rotation": 0.5,
            "loss.long_term_gap": 2,
            "schedule.pretrain_steps": 2,
            "schedule.finetune_steps": 2,
            "schedule.checkpoint_every": 1,
            "paths.work_dir": str(tmp_path / "run"),
        }
    )
