"""Shared fixtures: a small shapes dataset and a pretrained base model.

Both are built once per session; the base model takes about a minute.
"""

import numpy as np
import pytest

from metacontrol import pipeline as pl
from metacontrol.config import RunConfig
from metacontrol.tasks import Dataset, gen_dataset

DATA_SEED = 1
N_IMAGES = 640


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    return RunConfig.build({})


@pytest.fixture(scope="session")
def shapes(run_config):
    """(train, test) split of the default-size shapes dataset."""
    full = Dataset(gen_dataset(N_IMAGES, run_config["unet.size"], DATA_SEED))
    return full.split(run_config["data.test"])


@pytest.fixture(scope="session")
def pretrained(run_config, shapes):
    """(base checkpoint, loss log) from the configured pretraining run."""
    return pl.pretrain(run_config, shapes[0])


@pytest.fixture(scope="session")
def base_checkpoint(pretrained):
    return pretrained[0]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def meta_run(run_config, base_checkpoint, shapes):
    """Default meta-training run (configured steps, Enc4Mid) on the shared base model."""
    return pl.train_control(run_config, base_checkpoint, shapes[0], "meta")


# ---------------------------------------------------------------- acceptance verdicts

VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """record(number, name, passed, detail) prints one pass/fail line per criterion."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}"
        if detail:
            line += "\n" + "\n".join("    " + d for d in detail.rstrip().splitlines())
        VERDICTS[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
