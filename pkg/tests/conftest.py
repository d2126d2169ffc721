import numpy as np
import pytest

from umt import synth
from umt.config import TrainConfig
from umt.engine import TrainData, run_training
from umt.params import ArchConfig, DetectorParams


@pytest.fixture(scope="session")
def arch():
    return ArchConfig()


@pytest.fixture(scope="session")
def splits():
    return synth.build_splits(synth.SceneSpec(), synth.shift_preset("strong"), 40, 40, 20, seed=5)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, splits, arch):
    """A source-only model trained briefly on the small splits."""
    cfg = TrainConfig(variant="SourceOnly", lr1_steps=1200, lr2_steps=300, seed=0)
    out = tmp_path_factory.mktemp("trained")
    return run_training(cfg, TrainData.from_splits(splits), out, arch)


@pytest.fixture
def rand_params(arch):
    return DetectorParams.init(arch, 123)


@pytest.fixture
def scene(splits):
    return splits["source_train"][0]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
