import os

import pytest

from latticewave.dataset import DatasetConfig, build_dataset


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Small dataset shared across detector tests: 12 train / 6 test, T=64."""
    config = DatasetConfig(
        master_seed=7,
        n_particles=120,
        n_steps=64,
        dt=2e-8,
        train_counts={"N": 8, "R": 2, "S": 0, "C": 2},
        test_counts={"N": 4, "R": 1, "S": 0, "C": 1},
        type_c_group_size=2,
        special_pairs=1,
    )
    out = tmp_path_factory.mktemp("detector-data") / "ds"
    build_dataset(config, str(out), workers=4)
    return os.path.join(str(out), "manifest.json")
