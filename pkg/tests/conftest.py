"""Shared toy training runs and the acceptance verdict summary.

The toy runs train the default-size decoder on five synthetic GOPs and take
tens of minutes on one CPU core; session scope makes every consumer share them.
"""

import time

import pytest

from csvideonet.model import ModelConfig
from csvideonet.sensing import SensingMatrixSet
from csvideonet.synthetic import synthetic_gop_blocks
from csvideonet.training import TrainConfig, key_pairs, make_sequence_set, pretrain_key_cnn, train_full

ACCEPTANCE_LINES: list[str] = []

OVERFIT_PRETRAIN_STEPS = 200


@pytest.fixture(scope="session")
def toy_setup():
    blocks = synthetic_gop_blocks(5, seed=100)
    mats = SensingMatrixSet.generate(40, 10, 1024, seed=0)
    return blocks, mats, make_sequence_set(blocks, mats), ModelConfig()


@pytest.fixture(scope="session")
def overfit_run(toy_setup):
    """Pretrained key CNN, then 2000 full-phase steps with the training-set loss logged every 100."""
    _, _, data, mc = toy_setup
    t0 = time.perf_counter()
    pre = pretrain_key_cnn(*key_pairs(data), TrainConfig.pretrain_defaults(steps=OVERFIT_PRETRAIN_STEPS), mc)
    res = train_full(data, TrainConfig.full_defaults(steps=2000, eval_every=100), mc, pretrained=pre.key_cnn)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def scratch_run(toy_setup):
    """Same data and seeds as ``overfit_run`` but no pretraining; 500 steps."""
    _, _, data, mc = toy_setup
    return train_full(data, TrainConfig.full_defaults(steps=500, eval_every=500), mc, pretrained=None)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
