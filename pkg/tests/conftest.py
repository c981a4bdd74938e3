import numpy as np
import pytest

# Verdict lines appended by test_acceptance.verdict(); echoed after the run
# summary so they stay visible even though pytest captures per-test stdout.
ACCEPTANCE_VERDICTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


def random_twists(rng, n, max_angle=np.pi - 1e-3, trans_scale=2.0):
    """Twists with rotation magnitude uniform in (0, max_angle]."""
    tau = trans_scale * rng.standard_normal((n, 3))
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    mag = rng.uniform(0.0, max_angle, size=(n, 1))
    return np.concatenate([tau, axis * mag], axis=-1)
