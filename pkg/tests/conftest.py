import numpy as np
import pytest

from hsc.autodiff import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def randomize(module, rng, scale=0.5):
    """Overwrite every parameter with noise so zero-initialised heads do not hide behaviour."""
    for p in module.parameters():
        p.data[...] = rng.normal(scale=scale, size=p.data.shape)
    return module


def tiny_codec_config(**changes):
    from hsc.codec import CodecConfig

    base = dict(C1=4, C2=2, filters=8, hyper_filters=8, res_blocks1=1, res_blocks2=1, attention1="",
                attention2="", context_hidden=6, context_layers=2)
    base.update(changes)
    return CodecConfig(**base)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
