import itertools
import sys
from functools import reduce

import numpy as np
import pytest

from hamdesign.hilbert import WaveFunction, enumerate_basis


def dense_product(factors, n_sites, local_dim):
    """Full-space matrix of a site-local product via explicit Kronecker products."""
    mats = [np.eye(local_dim, dtype=complex) for _ in range(n_sites)]
    for site, m in factors:
        mats[site] = mats[site] @ np.asarray(m, dtype=complex)
    return reduce(np.kron, mats)


def all_configs(n_sites, local_dim):
    return [np.array(c) for c in itertools.product(range(local_dim), repeat=n_sites)]


def random_state(basis, rng, complex_=True):
    v = rng.standard_normal(basis.dim)
    if complex_:
        v = v + 1j * rng.standard_normal(basis.dim)
    return WaveFunction.normalized(basis, v)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def qubit_basis_4():
    return enumerate_basis(4, 2, None, "open")


def small_planted_dict(**overrides):
    """A planted problem small enough to recover in about a second."""
    d = {
        "name": "small-planted",
        "seed": 0,
        "model": {"name": "pauli_strings_k_local", "params": {"k": 2, "max_range": 1, "real_only": True}},
        "sizes": {"train": [6]},
        "reference": {"source": "planted", "support": ["XX", "Z", "ZZ"]},
        "loss": {"terms": [{"kind": "overlap", "weight": 1.0}, {"kind": "kl", "weight": 0.2},
                           {"kind": "energy_variance", "weight": 1.0}],
                 "gauge": {"kind": "freeze_one", "index": "XX", "value": 1.0}},
        "optimizer": {"restart_period": 1000, "max_iters": 60},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key] = {**d[key], **value}
        else:
            d[key] = value
    return d


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(number))
