import numpy as np
import pytest
import torch

from demixlab.datagen import chorales as chorales_mod
from demixlab.datagen import chords as chords_mod
from demixlab.datagen.store import Dataset

torch.set_num_threads(2)


@pytest.fixture(scope="session", autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def chord_dataset(tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("chords")
    cfg = chords_mod.ChordConfig(n_examples=120, seed=11)
    chords_mod.generate_dataset(cfg, root)
    return Dataset(root)


@pytest.fixture(scope="session")
def chord_config() -> chords_mod.ChordConfig:
    return chords_mod.ChordConfig(n_examples=120, seed=11)


@pytest.fixture(scope="session")
def chorale_dataset(tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("chorales")
    cfg = chorales_mod.ChoraleConfig(
        n_examples=16,
        seed=5,
        parts=("S", "B"),
        part_pools={"S": (0, 1), "B": (10, 11)},
    )
    chorales_mod.generate_dataset(cfg, root)
    return Dataset(root)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def torch_rng() -> torch.Generator:
    return torch.Generator().manual_seed(1234)
