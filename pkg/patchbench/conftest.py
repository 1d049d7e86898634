"""
Κοινά fixtures για τα tests.

Όλα τρέχουν σε CPU χωρίς δίκτυο: toy detectors, συνθετικά datasets και
μια προσωρινή SQLite βάση για το run history.
"""

import pytest
import torch

from .detector_service import ToyDetector, default_registry, toy_spec_from_entry
from .dataset_parser import synthetic_dataset
from .schemas import SyntheticSpec, TrainConfig


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """Κάθε test έχει δική του βάση και δικό του cache."""
    monkeypatch.setenv("PATCHBENCH_DB", f"sqlite:///{tmp_path / 'history.db'}")
    monkeypatch.setenv("PATCHBENCH_CACHE", str(tmp_path / "cache"))
    torch.manual_seed(0)


@pytest.fixture
def registry():
    return default_registry()


@pytest.fixture
def red_spec(registry):
    return toy_spec_from_entry(registry.get("toy-red"))


@pytest.fixture
def blue_spec(registry):
    return toy_spec_from_entry(registry.get("toy-blue"))


@pytest.fixture
def toy_red(red_spec):
    return ToyDetector(red_spec, name="toy-red", weights_id="toy-red")


@pytest.fixture
def toy_blue(blue_spec):
    return ToyDetector(blue_spec, name="toy-blue", weights_id="toy-blue")


@pytest.fixture
def red_dataset(red_spec):
    return synthetic_dataset(SyntheticSpec(count=8, templates=[red_spec]), seed=0)


@pytest.fixture
def pair_dataset(red_spec, blue_spec):
    """Κάθε εικόνα έχει ένα κόκκινο και ένα μπλε template."""
    return synthetic_dataset(SyntheticSpec(count=8, templates=[red_spec, blue_spec]), seed=0)


@pytest.fixture
def quick_train():
    """Μικρό training config για γρήγορα tests."""
    return TrainConfig(epochs=3, lr0=0.05, lr_drop_every=2, batch_size=4, patch_size=16)
