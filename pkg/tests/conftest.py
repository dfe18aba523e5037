import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

import pytest

from pointcmp.config import RunConfig
from pointcmp.data import generate_synthetic_dataset, write_dataset

MICRO = dict(videos_per_class=6, raw_frames=8, raw_points=64, frames=4, points_per_frame=32, segments=2,
             tokens=4, channels=16, hidden=8, heads=2, depth=1, proj_dim=8, batch_size=4, epochs=2,
             warmup_epochs=1, probe_epochs=5, finetune_epochs=1, eval_views=2)


@pytest.fixture(scope="session")
def micro_cfg():
    return RunConfig(**MICRO).validate()


@pytest.fixture(scope="session")
def micro_data(micro_cfg, tmp_path_factory):
    path = tmp_path_factory.mktemp("micro") / "data.pcv"
    write_dataset(generate_synthetic_dataset(micro_cfg.synthetic_spec()), path, micro_cfg.num_classes)
    return path


# acceptance summary: test_acceptance records one line per criterion here
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
