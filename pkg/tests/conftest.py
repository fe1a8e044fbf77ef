import numpy as np
import pytest

from recalx.data import SplitSpec, feature_means, fixture_joint, make_synthetic, split
from recalx.model import BayesOracle, LevelScaledClassifier, TrainConfig, train_mlp
from recalx.perturbation import PerturbationStrategy

from helpers import ACCEPTANCE_LINES

PLANTED = {"kind": "planted", "weights": [3.0, 1.0, 0.0], "version": 1}
SMALL_MLP = TrainConfig(hidden_sizes=(16,), epochs=20, batch_size=64, learning_rate=0.05, momentum=0.9, seed=0)


@pytest.fixture(scope="session")
def joint():
    return fixture_joint()


@pytest.fixture(scope="session")
def zero():
    return PerturbationStrategy.zero_baseline(3)


@pytest.fixture(scope="session")
def oracle(joint, zero):
    return BayesOracle(joint, zero)


@pytest.fixture(scope="session")
def planted_parts():
    ds, _ = make_synthetic(PLANTED, 5000, 0)
    return split(ds, SplitSpec((0.6, 0.2, 0.2), 1))


@pytest.fixture(scope="session")
def planted_mlp(planted_parts):
    train, _, _ = planted_parts
    return train_mlp(train, SMALL_MLP)


@pytest.fixture(scope="session")
def mean_strategy(planted_parts):
    return PerturbationStrategy.mean_replacement(feature_means(planted_parts[0]))


@pytest.fixture(scope="session")
def miscal_mlp(planted_mlp):
    """Planted MLP whose logits are tripled once more than half the features are perturbed."""
    return LevelScaledClassifier(planted_mlp, 3.0, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
