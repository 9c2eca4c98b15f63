import dataclasses

import numpy as np
import pytest

from ofdmcluster.config import FiberParams, FrontendParams, LinkConfig, OfdmParams


def small_config(**changes) -> LinkConfig:
    """A short, cheap link: 16 subcarriers, 40 symbols, one 20 km span."""
    base = LinkConfig(
        ofdm=OfdmParams(n_subcarriers=16, n_symbols_per_subcarrier=40, n_pilot_symbols=4),
        fiber=FiberParams(span_length_km=20.0, n_spans=1),
        ssfm_step_km=1.0,
    )
    return base.replace(**changes) if changes else base.validate()


TRANSPARENT_FRONTEND = FrontendParams(clipping_ratio_db=20.0, quantizer_bits=24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small():
    return small_config()


def replace(obj, **changes):
    return dataclasses.replace(obj, **changes)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
