import sys

import numpy as np
import pytest
import torch

from semaug.data import DOMAINS, domain_spec, generate_caption_corpus, generate_synthetic_domain
from semaug.embedding import ToyPretrainConfig, build_bundle, pretrain_toy_embedding

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_caption_corpus(3000, seed=0)


@pytest.fixture(scope="session")
def toy_bundle(toy_corpus):
    """The seeded pretrained toy encoder used by the acceptance runs."""
    return pretrain_toy_embedding(toy_corpus, ToyPretrainConfig())


@pytest.fixture
def random_bundle():
    return build_bundle(seed=0)


@pytest.fixture(scope="session")
def clear_small():
    return generate_synthetic_domain(domain_spec("clear"), 24, seed=3)


@pytest.fixture(scope="session")
def domains_small():
    return {d: generate_synthetic_domain(domain_spec(d), 12, seed=4) for d in DOMAINS}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
