import random

import pytest

from tcmeval.corpus import Corpus, load_corpus, make_record, sample_corpus_path
from tcmeval.dataset import build_dataset
from tcmeval.retrieval import build_index


@pytest.fixture(scope="session")
def sample_corpus():
    return load_corpus(sample_corpus_path())


@pytest.fixture(scope="session")
def sample_index(sample_corpus):
    return build_index(sample_corpus)


@pytest.fixture(scope="session")
def dataset42(sample_corpus):
    return build_dataset(sample_corpus, 42)


def make_synth_corpus(n_drugs=220, n_herbs=400, seed=0):
    """Synthetic corpus with distinct CJK-digit names, 1..12 herbs each."""
    herbs = [f"药材{i:03d}" for i in range(n_herbs)]
    rng = random.Random(seed)
    records = []
    for i in range(n_drugs):
        records.append(make_record(f"药品{i:03d}", rng.sample(herbs, rng.randint(1, 12))))
    return Corpus(records)


@pytest.fixture(scope="session")
def synth220():
    return make_synth_corpus()


@pytest.fixture(scope="session")
def synth220_dataset(synth220):
    ds = build_dataset(synth220, 7)
    assert len(ds.t_items()) == 110 and len(ds.f_items()) == 110
    return ds
