from __future__ import annotations

import pytest

from odesearch.dataset import load_registry, make_instance


@pytest.fixture(scope="session")
def registry():
    return load_registry()


@pytest.fixture(scope="session")
def systems_by_name(registry):
    return {system.name: system for system in registry}


@pytest.fixture(scope="session")
def growth_instance(systems_by_name):
    return make_instance(systems_by_name["Population growth (naive)"])


@pytest.fixture(scope="session")
def harmonic_instance(systems_by_name):
    return make_instance(systems_by_name["Harmonic oscillator"])
