"""Pytest configuration and fixtures for irsr tests."""

from pathlib import Path

import numpy as np
import pytest
import torch

from irsr.config import (
    DEFAULT_CLASSES,
    AugmentationParams,
    DegradationParams,
    DiscriminatorConfig,
    GeneratorConfig,
    NetworkMode,
    TrainingSchedule,
)
from irsr.data_pipeline import ArraySource, PatchBatchStream, build_validation_batch
from irsr.discriminator import build_discriminator
from irsr.generator import build_generator
from irsr.losses import FeatureExtractor
from irsr.synthetic import synth_tissue
from irsr.trainer import Trainer

TOY_PATCH = 16
TOY_IMAGE = 32


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def setup_logging():
    """Silence library logging during tests."""
    from loguru import logger

    logger.disable("irsr")
    yield
    logger.enable("irsr")


@pytest.fixture(autouse=True)
def no_data_root(monkeypatch):
    """Keep a developer's IRSR_DATA_ROOT from leaking into manifest resolution."""
    monkeypatch.delenv("IRSR_DATA_ROOT", raising=False)


def toy_generator_config(mode: NetworkMode = NetworkMode.CGAN) -> GeneratorConfig:
    return GeneratorConfig(mode=mode, channel_schedule=(4, 8), cond_hidden=4)


def toy_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(widths=(4, 8), fc_width=8, input_size=TOY_PATCH)


def toy_degradation() -> DegradationParams:
    return DegradationParams(blur_sigma=1.0, down_factor=4)


def toy_schedule(**overrides) -> TrainingSchedule:
    values = dict(
        phase1_iters=6,
        phase2_iters=12,
        batch_size=2,
        patch_size=TOY_PATCH,
        lr_g=1e-3,
        validate_every=1000,
        checkpoint_every=1000,
    )
    values.update(overrides)
    return TrainingSchedule(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_sources():
    """Eight small synthetic tissue images with 3-class masks."""
    sources = []
    for i in range(8):
        color, masks = synth_tissue(TOY_IMAGE, np.random.default_rng([7, i]), cells=6)
        sources.append(ArraySource(name=f"toy{i}", color=color, masks=masks))
    return sources


@pytest.fixture
def make_generator():
    def factory(mode: NetworkMode = NetworkMode.CGAN, seed: int = 0):
        return build_generator(toy_generator_config(mode), seed=seed)

    return factory


@pytest.fixture
def make_trainer(toy_sources):
    """Build a toy trainer; call again with the same arguments for a twin run."""

    def factory(
        schedule: TrainingSchedule | None = None,
        mode: NetworkMode = NetworkMode.CGAN,
        out_dir: Path | None = None,
        seed: int = 0,
        on_step=None,
        with_validation: bool = True,
    ) -> Trainer:
        schedule = schedule or toy_schedule()
        stream = PatchBatchStream(
            toy_sources[:6],
            toy_degradation(),
            AugmentationParams(),
            patch_size=schedule.patch_size,
            batch_size=schedule.batch_size,
            seed=seed,
        )
        val_batch = None
        if with_validation:
            val_batch = build_validation_batch(toy_sources[6:], toy_degradation(), schedule.patch_size, seed)
        return Trainer(
            gen=build_generator(toy_generator_config(mode), seed=seed),
            disc=build_discriminator(toy_discriminator_config(), seed=seed + 1),
            extractor=FeatureExtractor.random(seed=0, layers=2, width=4),
            schedule=schedule,
            train_stream=stream,
            val_batch=val_batch,
            out_dir=out_dir,
            seed=seed,
            on_step=on_step,
        )

    return factory


def toy_masks(batch: int = 2, size: int = TOY_PATCH, seed: int = 0) -> torch.Tensor:
    """Random one-hot (B, 3, size, size) masks."""
    g = torch.Generator().manual_seed(seed)
    index = torch.randint(len(DEFAULT_CLASSES), (batch, size, size), generator=g)
    return torch.nn.functional.one_hot(index, len(DEFAULT_CLASSES)).permute(0, 3, 1, 2).float()
