import numpy as np
import pytest

from greenhouse_rlmpc import plant


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def weather():
    return plant.synth_weather(seed=7, length=plant.T_F + 40)


def random_states(rng, n):
    """Plausible greenhouse states spread around the operating region."""
    return np.column_stack(
        [
            rng.uniform(0.002, 0.3, n),
            rng.uniform(5e-4, 3e-3, n),
            rng.uniform(5.0, 30.0, n),
            rng.uniform(4e-3, 1.6e-2, n),
        ]
    )


def random_inputs(rng, n):
    return rng.uniform(0.0, 1.0, (n, 3)) * np.array([1.2, 7.5, 150.0])


def random_disturbances(rng, n):
    return np.column_stack(
        [
            rng.uniform(0.0, 600.0, n),
            rng.uniform(6e-4, 8e-4, n),
            rng.uniform(-5.0, 15.0, n),
            rng.uniform(3e-3, 8e-3, n),
        ]
    )


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
