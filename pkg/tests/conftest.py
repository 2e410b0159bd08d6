import numpy as np
import pytest
from hypothesis import strategies as st

from inertialpose import quaternion as Q
from inertialpose.synthetic import Imperfections, SynthConfig, make_trial, random_motion


def unit_quaternions():
    """Hypothesis strategy for unit quaternions (rejecting near-zero draws)."""
    comp = st.floats(-1.0, 1.0, allow_nan=False)
    return (
        st.tuples(comp, comp, comp, comp)
        .map(np.array)
        .filter(lambda v: np.linalg.norm(v) > 0.1)
        .map(Q.normalize)
    )


def vectors(scale=5.0):
    comp = st.floats(-scale, scale, allow_nan=False)
    return st.tuples(comp, comp, comp).map(np.array)


def synth_trial(n_segments=2, duration=10.0, seed=0, **imperfections):
    rng = np.random.default_rng(seed)
    cfg = SynthConfig(
        duration=duration,
        segments=random_motion(n_segments, rng),
        imperfections=Imperfections(**imperfections),
        seed=seed,
        subject=f"S{seed:02d}",
    )
    return make_trial(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_trial():
    return synth_trial(n_segments=3, duration=20.0, seed=7)


# acceptance results, printed once more at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
