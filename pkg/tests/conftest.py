import numpy as np
import pytest
import torch

from pccl.data import synth_generate
from pccl.models import SegmenterSpec, build_segmenter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_models():
    """Desk-scale students at 32 px: cheap enough for gradient tests."""
    m1 = build_segmenter(SegmenterSpec.for_scale("lightweight_conv", "desk", input_size=32), seed=0)
    m2 = build_segmenter(SegmenterSpec.for_scale("windowed_transformer", "desk", input_size=32), seed=1)
    return m1, m2


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """34 phantoms at 32 px -> 20 train / 4 val / 10 test."""
    root = tmp_path_factory.mktemp("synth")
    synth_generate(34, 32, 7, root)
    return root


def random_probs(shape, gen=None, dtype=torch.float64):
    return torch.softmax(torch.randn(shape, generator=gen, dtype=dtype), dim=1)


# acceptance criteria report one line each at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
