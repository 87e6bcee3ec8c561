import numpy as np
import pytest

from tagdiff.configuration import TorusBox
from tagdiff.gibbs import GcmcParams, sample_chain, sample_independent
from tagdiff.potential import lennard_jones, zero_potential

ACCEPTANCE_LINES = []


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def box2():
    return TorusBox(10.0, 2)


@pytest.fixture(scope="session")
def lj2():
    return lennard_jones(1.0, 1.0, 2, cutoff=2.5)


@pytest.fixture(scope="session")
def free2():
    return zero_potential(2)


@pytest.fixture(scope="session")
def lj_samples(lj2, box2):
    """Independent equilibrium configurations at density ~0.3."""
    return sample_independent(GcmcParams(activity=0.25), lj2, box2, 40, 150, seed_base=1234)


@pytest.fixture(scope="session")
def lj_chain(lj2, box2):
    res = sample_chain(GcmcParams(activity=0.25), lj2, box2, 3000, thin_sweeps=5, burn_in_sweeps=200,
                       rng=np.random.default_rng(99))
    return res.samples
