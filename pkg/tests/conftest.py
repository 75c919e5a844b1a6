import numpy as np
import pytest

from tscodec.model import CodecConfig


def mini_config(**overrides):
    """Miniature codec: 2x32 windows, 2x8 latent, k=4, two quantizers."""
    base = dict(
        c_in=2, t_in=32, c_lat=2, l_lat=8,
        encoder_channels=(3, 3, 2), strides=(2, 2),
        decoder_channels_a=(4,), decoder_strides_a=(1,),
        decoder_channels_b=(4, 3), decoder_strides_b=(2, 2),
        decoder_residual_units=1, disc_channels=3,
        n_quantizers=2, codebook_size=4, eval_span=16,
    )
    base.update(overrides)
    return CodecConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mini_cfg():
    return mini_config()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
