import hypothesis
import pytest

from pdvfs.perfmodel import FrequencyLadder, synth_model_set
from pdvfs.simulator import SchedulerPolicy
from pdvfs.workload import LengthDistribution, gen_gamma_trace

hypothesis.settings.register_profile("default", deadline=None, max_examples=60)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("default")

LADDER = FrequencyLadder((990.0, 1188.0, 1386.0, 1584.0, 1782.0, 1980.0))


@pytest.fixture(scope="session")
def ladder():
    return LADDER


@pytest.fixture(scope="session")
def models():
    return synth_model_set(LADDER, [1, 2], "compute-bound", "memory-bound")


@pytest.fixture(scope="session")
def cb_models():
    return synth_model_set(LADDER, [1, 2], "compute-bound", "compute-bound")


@pytest.fixture
def policy():
    return SchedulerPolicy()


@pytest.fixture(scope="session")
def small_trace():
    return gen_gamma_trace(3.0, 0.5, 20_000, LengthDistribution(max_input=2048, max_output=256), seed=7)
