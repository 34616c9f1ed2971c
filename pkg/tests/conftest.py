import numpy as np
import pytest

from resvit.data import generate_phantom_dataset
from resvit.gradcheck import toy_model_config
from resvit.tensor import default_dtype


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def toy_cfg():
    return toy_model_config()


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    """Five 80x80 subjects (3/1/1 split), three slices each."""
    root = tmp_path_factory.mktemp("phantom")
    return generate_phantom_dataset(root, seed=7, subjects=5, slices=3, height=80,
                                    splits=(3, 1, 1))


def small_train_config(**overrides):
    """Flat training config for the 80x80 phantom: tiny widths, 1+1 epochs."""
    d = dict(modalities=3, image_size=80, base_channels=4, art_blocks=3,
             transformer_positions=[1, 3], downsample_factor=4, transformer_preset="custom",
             transformer_layers=1, embed_dim=8, heads=2, mlp_hidden=16, disc_channels=4,
             phase1_epochs=1, phase2_epochs=1, batch_size=3, checkpoint_every=1)
    d.update(overrides)
    return d


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
