import os

import hypothesis
import numpy as np
import pytest

from mug.config import FineEncoderConfig, FusionConfig, MUGConfig, SaxConfig

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small enough for exhaustive finite differences."""
    return MUGConfig(
        fine=FineEncoderConfig(input_dim=1, d_model=8, n_heads=2, n_layers=1, d_ff=12, dropout=0.0),
        sax=SaxConfig(alphabet_size=4, word_length=3, embed_dim=6),
        fusion=FusionConfig(d_k=5, d_ff=10),
        segments=2,
    )


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
