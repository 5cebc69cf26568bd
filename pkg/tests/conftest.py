import os

import numpy as np
import pytest

from stylemt.data import SYNTH_TAXONOMY, SynthConfig, load_dataset, synth_style_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 96/48 synthetic dataset at 32 x 32 for quick training tests."""
    root = str(tmp_path_factory.mktemp("synth_small"))
    ds = synth_style_dataset(SynthConfig(n_train=96, n_test=48, size=32), seed=5, root=root)
    return ds, load_dataset(ds.train_manifest, SYNTH_TAXONOMY), load_dataset(ds.test_manifest, SYNTH_TAXONOMY)


@pytest.fixture(scope="session")
def full_synth(tmp_path_factory):
    """The 600/200, 64 x 64 synthetic dataset."""
    root = str(tmp_path_factory.mktemp("synth_full"))
    ds = synth_style_dataset(SynthConfig(), seed=0, root=root)
    return ds, load_dataset(ds.train_manifest, SYNTH_TAXONOMY), load_dataset(ds.test_manifest, SYNTH_TAXONOMY)


def pytest_report_header(config):
    return f"cpu count {os.cpu_count()}"
