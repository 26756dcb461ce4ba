import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from smokegen.backbone import build_pretrained_toy

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def toy_stack():
    """Pretrained frozen toy backbone + schedule; treat as read-only."""
    return build_pretrained_toy(seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_mask_bits(rng, size=32, p=0.35):
    return (rng.random((size, size)) < p).astype(np.uint8)


@pytest.fixture()
def gray_image(tmp_path):
    """Writes a small grayscale PNG and returns its path."""

    def make(name: str, arr: np.ndarray) -> Path:
        from PIL import Image

        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr.astype(np.uint8), "L").save(path)
        return path

    return make
