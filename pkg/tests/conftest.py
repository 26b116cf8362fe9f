import numpy as np
import pytest
import torch

from disef.toydata import make_toy_dataset
from disef.vlm_core import DualEncoder

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_manifest():
    return make_toy_dataset(None, 3, train_per_class=24, test_per_class=20)


@pytest.fixture
def toy_model(toy_manifest):
    return DualEncoder.toy(list(toy_manifest.class_names) + [toy_manifest.prompt_template], seed=0)


@pytest.fixture
def toy_model64(toy_manifest):
    return DualEncoder.toy(list(toy_manifest.class_names) + [toy_manifest.prompt_template], seed=0, dtype=torch.float64)


class LinearEmbedder:
    """Embed model whose image "features" are the image values themselves."""

    def encode_images(self, images):
        return torch.as_tensor(images).reshape(len(images), -1).to(torch.float64)
