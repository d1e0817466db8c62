import numpy as np
import pytest

from vrx.experiments import (BiasConfig, LogicConfig, PipelineConfig, SensitivityConfig, run_bias_diagnosis,
                             run_logic_consistency, run_pipeline, run_sensitivity)
from vrx.teacher import train_teacher
from vrx.vce import discover_concepts
from vrx.world import default_world, generate_dataset, single_part_world

from helpers import ACCEPTANCE


class Small:
    """A quickly trained teacher with its train and test images."""

    def __init__(self, spec, per_class=100, epochs=6):
        self.spec = spec
        self.train = generate_dataset(spec, per_class, seed=0)
        self.test = generate_dataset(spec, 50, seed=1, id_offset=10_000)
        self.teacher = train_teacher(self.train, spec.n_classes, epochs=epochs)

    def of_class(self, c, split="train"):
        return [im for im in getattr(self, split) if im.label == c]


@pytest.fixture(scope="session")
def small():
    return Small(default_world())


@pytest.fixture(scope="session")
def single_part():
    return Small(single_part_world(), per_class=300, epochs=8)


@pytest.fixture(scope="session")
def small_banks(small):
    return [discover_concepts(small.of_class(c)[:30], small.teacher, c) for c in range(3)]


@pytest.fixture(scope="session")
def default_run():
    """Full-scale pipeline on the default world: (artifacts, report)."""
    return run_pipeline(cfg=PipelineConfig())


@pytest.fixture(scope="session")
def biased_run():
    return run_pipeline(cfg=PipelineConfig(world="pose-biased"))


@pytest.fixture(scope="session")
def logic_report(default_run):
    return run_logic_consistency(default_run[0], LogicConfig())


@pytest.fixture(scope="session")
def sensitivity_report(default_run):
    return run_sensitivity(default_run[0], SensitivityConfig())


@pytest.fixture(scope="session")
def bias_report(biased_run):
    return run_bias_diagnosis(BiasConfig(), biased_run[0])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
