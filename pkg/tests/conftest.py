import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from segnlme import kernels
from segnlme.model import ModelSpec, SubjectData, Theta
from segnlme.simulate import SimScenario, generate_dataset, table_truth

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

BACKENDS = sorted(kernels.BACKENDS)


@pytest.fixture
def spec():
    return ModelSpec()


@pytest.fixture
def truth():
    return table_truth()


def small_theta(n_b=4):
    """A well-conditioned parameter set for small synthetic instances."""
    beta = [10.72, 4.59, 4.21, -1.64][:n_b] if n_b == 4 else [4.0, 9.0, 1.0]
    return Theta(alpha=[0.14], beta=beta, tau_mean=-1.15, tau_var=0.5,
                 A=[[0.01]], B=0.1 * np.eye(n_b), sigma_e2=0.2)


def make_subject(sid="s1", times=(0.1, 0.5, 1.2), values=(4.5, 2.6, 1.9),
                 censored=None, limit=2.3010299956639813):
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    cens = np.zeros(times.size, bool) if censored is None else np.asarray(censored, bool)
    values = np.where(cens, limit, values)
    return SubjectData.from_arrays(sid, times, values, cens, np.full(times.size, limit))


@pytest.fixture
def dataset(spec):
    sc = SimScenario(n_subjects=30, censor_rate=0.3, rng_seed=11)
    return generate_dataset(sc, spec, np.random.default_rng(4))


# acceptance criteria verdicts, printed as one line each after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
