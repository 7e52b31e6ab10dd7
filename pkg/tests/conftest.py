import pytest

from fpad.splits import random_split
from fpad.synthcorpus import CorpusConfig, generate_corpus

SMALL = dict(num_classes=20, exemplars_per_class=6, sequences_per_class=4)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(seed=0, **SMALL))


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return random_split(small_corpus.catalog, 6, 0)
