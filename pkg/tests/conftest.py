import numpy as np
import pytest

from advla.encoder import EncoderConfig, init_encoder

TINY = EncoderConfig(image_h=16, image_w=16, patch_size=4, embed_dim=16, num_blocks=2,
                     num_heads=2, proj_dim=8, seed=3)


@pytest.fixture(scope="session")
def tiny_enc():
    return init_encoder(TINY)


@pytest.fixture(scope="session")
def desk_enc():
    return init_encoder(EncoderConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=16, w=16, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, (3, h, w))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
