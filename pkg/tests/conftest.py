from __future__ import annotations

import copy

import pytest

# Five 2-d quadratic clients with fixed heterogeneous participation.
BIAS_CENTERS = [[-0.2, 0.05], [-0.1, -0.05], [0.0, 0.1], [0.1, -0.1], [0.2, 0.0]]
BIAS_P = [0.9, 0.7, 0.5, 0.3, 0.1]


def quad_config(**changes) -> dict:
    """A small quadratic config dict; keys with ``__`` reach into tables."""
    doc = {
        "N": 5,
        "T": 60,
        "I": 3,
        "gamma": 0.05,
        "eta": 0.5,
        "seed": 0,
        "cadence": 10,
        "algorithm": {"strategy": "fedau_finite_K", "K": 5},
        "population": {"mode": "manual", "p": list(BIAS_P)},
        "objective": {"kind": "quadratic_isotropic", "centers": copy.deepcopy(BIAS_CENTERS), "noise_sigma": 0.1},
    }
    for key, value in changes.items():
        node = doc
        parts = key.split("__")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return doc


@pytest.fixture
def quad_doc():
    return quad_config()
