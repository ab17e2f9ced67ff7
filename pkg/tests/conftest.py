import warnings

import pytest
from hypothesis import strategies as st

from prompt_pyramid.pyramid import PyramidConfig, PyramidWarning

DEFAULT = PyramidConfig(32, ((2, 2), (2, 1), (3, 2), (3, 2), (3, 1)))
TABLE3 = [
    PyramidConfig(16, ((4, 2), (3, 2), (3, 1))),
    PyramidConfig(16, ((2, 1), (3, 2), (3, 2), (3, 1))),
    PyramidConfig(32, ((4, 2), (3, 2), (3, 2), (3, 1))),
]


@st.composite
def pyramid_configs(draw, max_frames=64, max_layers=6):
    """Valid configs built by picking (c, o) layer by layer until one prompt is left."""
    n = draw(st.integers(2, max_frames))
    frames, params = n, []
    while n > 1:
        k = len(params) + 1
        last = k == max_layers or draw(st.integers(0, 3)) == 0
        if last:
            params.append((n, 1))
            break
        lo = 1 if k == 1 else 2
        if lo > n - 1:
            params.append((n, 1))
            break
        c = draw(st.integers(lo, n - 1))
        offsets = [o for o in range(1, n - c + 1) if (n - c) % o == 0]
        o = draw(st.sampled_from(offsets))
        params.append((c, o))
        n = (n - c) // o + 1
    if not params:
        params.append((frames, 1))
    return PyramidConfig(frames, tuple(params))


@pytest.fixture(autouse=True)
def _quiet_pyramid_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PyramidWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
