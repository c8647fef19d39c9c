import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from adrsq import (
    ConeIndex,
    ScenarioBundle,
    beta_star,
    build_grid,
    build_whitney,
    load_scenario,
    make_boundary_set,
    make_kernel,
    run_tb_pipeline,
)

settings.register_profile("suite", max_examples=25, deadline=None)
settings.load_profile("suite")

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"
SCENARIO_NAMES = ("line_poisson", "circle_disk", "circle_envelope_tail",
                  "cantor")


@pytest.fixture(scope="session")
def seg_bset():
    return make_boundary_set("segment_line", 256, length=1.0)


@pytest.fixture(scope="session")
def seg_grid(seg_bset):
    return build_grid(seg_bset, 1, 5)


@pytest.fixture(scope="session")
def seg_whit(seg_bset):
    return build_whitney(seg_bset, np.array([[0.0, 1.0], [0.0, 0.5]]), 3, 7)


@pytest.fixture(scope="session")
def seg_kernel(seg_bset):
    return make_kernel("poisson_derivative", seg_bset)


@pytest.fixture(scope="session")
def seg_cones(seg_whit, seg_grid):
    return ConeIndex(seg_whit, seg_grid,
                     beta=beta_star(seg_whit, seg_grid)).build_all()


# depth-6 unit segment used by the embedding and stopping-time criteria
@pytest.fixture(scope="session")
def deep_bset():
    return make_boundary_set("segment_line", 512, length=1.0)


@pytest.fixture(scope="session")
def deep_grid(deep_bset):
    return build_grid(deep_bset, 0, 6)


@pytest.fixture(scope="session")
def deep_whit(deep_bset):
    return build_whitney(deep_bset, np.array([[0.0, 1.0], [0.0, 0.5]]), 3, 7)


@pytest.fixture(scope="session")
def deep_cones(deep_whit, deep_grid):
    return ConeIndex(deep_whit, deep_grid,
                     beta=beta_star(deep_whit, deep_grid)).build_all()


class _ScenarioRuns:
    """Run each shipped scenario pipeline once, on demand, with timing."""

    def __init__(self):
        self._cache = {}

    def __call__(self, name: str):
        if name not in self._cache:
            scenario = load_scenario(SCENARIO_DIR / f"{name}.json")
            bundle = ScenarioBundle(scenario)
            t0 = time.perf_counter()
            result = run_tb_pipeline(scenario, bundle=bundle)
            elapsed = time.perf_counter() - t0
            self._cache[name] = {"scenario": scenario, "bundle": bundle,
                                 "result": result, "seconds": elapsed}
        return self._cache[name]


@pytest.fixture(scope="session")
def scenario_run():
    return _ScenarioRuns()
