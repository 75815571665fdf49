import numpy as np
import pytest

from afg_lab.classifier import TrainSettings, build_model, default_arch, train
from afg_lab.data import DatasetSplit, ImageExample


def colour_split(n=90, size=8, seed=0):
    """Three classes told apart by their dominant colour channel."""
    rng = np.random.default_rng(seed)
    ex = []
    for i in range(n):
        c = i % 3
        pix = rng.uniform(0.25, 0.45, (size, size, 3)).astype(np.float32)
        pix[:, :, c] += rng.uniform(0.15, 0.3)
        ex.append(ImageExample(np.clip(pix, 0, 1), c, f"c{c}/{i:03d}.png"))
    cut = n * 2 // 3
    return DatasetSplit(ex[:cut], ex[cut:], ["red", "green", "blue"], seed)


@pytest.fixture(scope="session")
def toy_split():
    return colour_split()


@pytest.fixture(scope="session")
def toy_model(toy_split):
    arch = default_arch((8, 8, 3), 3, widths=(4, 6, 6, 8), hidden=16, pool_after=(True, False, True, False))
    return train(build_model(arch, 0), toy_split, TrainSettings(lr=0.02, epochs=20, batch_size=10))
