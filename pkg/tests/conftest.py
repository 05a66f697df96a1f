import numpy as np
import pytest
import torch

from regionsynth.train import TrainConfig


@pytest.fixture
def tiny_cfg():
    """Smallest configuration that exercises every code path quickly."""
    return TrainConfig(
        image_size=16, channels=3, gen_base_channels=8, gen_depth=2, z_dim=8, temb_dim=16,
        disc_base_channels=8, disc_blocks=2, batch_size=2, iterations=3,
        log_interval=1, checkpoint_interval=0, seed=0,
    )


@pytest.fixture
def toy_batch():
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    m = torch.zeros(2, 1, 16, 16)
    m[:, :, 4:10, 5:12] = 1
    return x0, m


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    from regionsynth.pipeline import make_toy_dataset

    return make_toy_dataset(6, 16, 16, 0, tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, toy_manifest):
    from regionsynth.train import run_training

    cfg = TrainConfig(
        image_size=16, gen_base_channels=8, gen_depth=2, z_dim=8, temb_dim=16,
        disc_base_channels=8, disc_blocks=2, batch_size=2, iterations=2,
        log_interval=1, checkpoint_interval=0, seed=0,
    )
    return run_training(cfg, toy_manifest.select(split="defect"), tmp_path_factory.mktemp("run"))


GATE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
