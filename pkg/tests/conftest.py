import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ntklab._runtime import tune_allocator
from ntklab.activations import ActivationSpec
from ntklab.data import TeacherSpec, generate
from ntklab.margin import estimate_margin
from ntklab.model import InitDistribution, init_symmetric

settings.register_profile("ntklab", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ntklab")

tune_allocator()

# the reference separable problem used across the end-to-end tests
REFERENCE = dict(n=200, d=10, margin_floor=0.5, s=0.1, data_seed=0, init_seed=0)


@pytest.fixture(scope="session")
def reference_data():
    spec = TeacherSpec(margin_floor=REFERENCE["margin_floor"], s=REFERENCE["s"])
    return generate(spec, REFERENCE["n"], REFERENCE["d"], REFERENCE["data_seed"])


@pytest.fixture(scope="session")
def reference_certificate(reference_data):
    """Certified margin at a width that the certificate itself deems sufficient."""
    dist = InitDistribution.gaussian(reference_data.d)
    params0 = init_symmetric(1488, reference_data.d, dist, REFERENCE["init_seed"], 0.0, ActivationSpec("tanh"))
    return params0, estimate_margin(params0, reference_data)


def random_unit_rows(rng, n, d, max_norm=1.0):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * (max_norm * rng.random(n) ** (1.0 / d))[:, None]


# PASS/FAIL lines recorded by the acceptance suite, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
