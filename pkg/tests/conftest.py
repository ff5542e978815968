from pathlib import Path
import numpy as np
import pytest
from engine import load_config_file
from panel import TrialPanel
from sim import scenario_presets, simulate_trial

ROOT = Path(__file__).resolve().parents[1]


def make_panel(n=4, K=3, **arrays):
    """Hand-built panel; every array not given is zero."""
    fields = {
        'ids': np.arange(n),
        'visit_times': np.arange(K + 1, dtype=float),
        'L0': np.zeros((n, 1)),
        'Z0': np.zeros(n, dtype=np.int8),
        'A0': np.zeros(n, dtype=np.int8),
        'Y': np.zeros((K, n), dtype=np.int8),
        'D': np.zeros((K, n), dtype=np.int8),
        'C': np.zeros((K, n), dtype=np.int8),
        'L': np.zeros((K - 1, n, 1)),
        'A': np.zeros((K - 1, n), dtype=np.int8),
        'Z': np.zeros((K - 1, n), dtype=np.int8),
    }
    for name, value in arrays.items():
        fields[name] = np.asarray(value)
    return TrialPanel(**fields)


@pytest.fixture
def panel_factory():
    return make_panel


@pytest.fixture(scope="session")
def scenario1():
    return scenario_presets()['scenario1']


@pytest.fixture(scope="session")
def scenario_panel(scenario1):
    return simulate_trial(scenario1, 3000, seed=11)


@pytest.fixture
def engine_config():
    config = load_config_file(ROOT / "config.json")
    config['learners']['folds'] = 3
    return config
