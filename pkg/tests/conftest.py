from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hyperwalker.fusion import FusionParameters
from hyperwalker.workbench import SyntheticSpec, build_store, generate_manifold, split_studies

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one "criterion N ...: PASS|FAIL" line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def unit(rng: np.random.Generator, dim: int, n: int | None = None) -> np.ndarray:
    shape = (dim,) if n is None else (n, dim)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    """A 16-d planted manifold split into hypergraph, train and test studies."""
    spec = SyntheticSpec(dims=16, n_subjects=15, studies_per_subject=4, seed=7)
    records, truth = generate_manifold(spec)
    split = split_studies(records, graph_frac=0.5, train_frac=0.25, seed=0)
    store = build_store(split.graph, seed=0)
    fusion = FusionParameters.identity(16, 32, seed=0)
    return {"spec": spec, "records": records, "truth": truth, "split": split, "store": store, "fusion": fusion}
