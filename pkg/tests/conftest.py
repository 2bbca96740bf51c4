from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def tiny_spec():
    from shortmr.phantom import PhantomSpec

    return PhantomSpec(
        shape=(16, 16, 16), n_regions=8, attr_regions=(3,), disease_regions=(6,), seed=5
    )


@pytest.fixture
def tiny_cohort(tiny_spec):
    from shortmr.phantom import balanced_demographics, generate_cohort

    return generate_cohort(tiny_spec, balanced_demographics(20))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def record_criterion():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str, seconds: float) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}  ({seconds:.1f} s)"
        _CRITERIA.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
