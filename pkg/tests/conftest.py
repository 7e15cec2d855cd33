"""Shared fixtures: one tiny corpus and one untrained lip encoder per run."""

import pytest

from avse import ae as ae_mod
from avse import corpus


def tiny_cfg(seed=100):
    return corpus.CorpusConfig(
        n_train_utt=2, n_test_utt=1, duration_s=1.0,
        train_snrs_db=(0, 6), test_snrs_db=(-4,),
        train_noise_kinds=("white",), test_noise_kinds=("pink",),
        master_seed=seed)


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny_corpus")
    records = corpus.build_corpus(tiny_cfg(), base)
    return records, base


@pytest.fixture(scope="session")
def lip_ae():
    # untrained weights are fine where only plumbing is under test
    return ae_mod.LipAutoencoder(seed=3)
