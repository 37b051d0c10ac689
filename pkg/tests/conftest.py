import numpy as np
import pytest

from gmirlab.data import Dataset, DomainSpec, make_domain_pair
from gmirlab.net import ModelConfig
from gmirlab.trainer import TrainConfig, pretrain

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_model():
    return ModelConfig(input_dim=2, hidden_dims=(8,), num_classes=2)


def random_dataset(n, seed, input_dim=2, num_classes=2, id_offset=0, domain="old"):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, input_dim))
    y = np.arange(n) % num_classes
    return Dataset(np.arange(n) + id_offset, x, y, np.full(n, domain), domain_tag=domain,
                   num_classes=num_classes)


@pytest.fixture(scope="session")
def small_pair():
    old = DomainSpec("two-moons", 200, 11, 0.0, (0.0, 0.0), 0.15, "old", 0)
    new = DomainSpec("two-moons", 180, 12, np.deg2rad(30.0), (0.0, 0.0), 0.225, "new", 200)
    return make_domain_pair(old, new)


@pytest.fixture(scope="session")
def trained_toy(small_pair):
    """A model pretrained a little on the old domain, with its config."""
    cfg = TrainConfig(ModelConfig(hidden_dims=(16,)), epochs=5, batch_size=8, lr=0.05, seed=3)
    res = pretrain(cfg, small_pair.old_train, small_pair.old_val)
    return cfg.model, res.checkpoint.params


BEHAVIOUR_SEEDS = tuple(range(10))
BEHAVIOUR_STRATEGIES = ("naive", "gmir", "random-resampling", "fixed-sampling")


@pytest.fixture(scope="session")
def default_behaviour():
    """Default-size task over ten seeds: the two lower bounds plus four finetuning runs."""
    import dataclasses

    from gmirlab.config import find_strategy, load_preset
    from gmirlab.experiment import run_experiment

    cfg = load_preset("default")
    cfg = dataclasses.replace(cfg, seeds=BEHAVIOUR_SEEDS,
                              strategies=tuple(find_strategy(cfg, s) for s in BEHAVIOUR_STRATEGIES))
    return run_experiment(cfg, scratch_runs=["scratch-clear", "scratch-adverse"]).report
