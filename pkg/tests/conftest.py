import numpy as np
import pytest

from fsidlm.config import parse_config
from fsidlm.mesh import fluid_box_mesh, quarter_annulus_mesh, solid_rect_mesh
from fsidlm.spaces import disc_p1_space, vector_q1_space, vector_q2_space


def small_annulus(nf=8, **kw):
    """Annulus configuration with the solid mesh three times finer than the fluid mesh."""
    return parse_config(overrides=dict(fluid_nx=nf, fluid_ny=nf, solid_nx=3 * nf, solid_ny=3 * nf // 2, **kw))


def small_bar(nf=10, **kw):
    return parse_config(scenario="bar", overrides=dict(fluid_nx=nf, fluid_ny=nf, solid_nx=3 * nf // 2,
                                                       solid_ny=max(2, 3 * nf // 8), **kw))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fluid8():
    m = fluid_box_mesh(8, 8)
    return vector_q2_space(m), disc_p1_space(m)


@pytest.fixture
def annulus_space():
    return vector_q1_space(quarter_annulus_mesh(24, 12))


@pytest.fixture
def bar_space():
    return vector_q1_space(solid_rect_mesh(12, 3))


# PASS/FAIL lines from the acceptance suite, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
