"""Shared fixtures: small phantom stacks that several suites train or score on."""
import numpy as np
import pytest

from pcagen import dataset as ds
from pcagen import preprocess as prep


def build_stack(n, seed0, res, lesions=True):
    """Preprocessed pixel stack plus model-space masks for n seeded phantoms."""
    cfg = prep.PreprocessConfig(target_resolution=res)
    pcfg = ds.PhantomConfig(height=res, width=res, lesion_present=lesions)
    pixels, masks = [], []
    for i in range(n):
        slc, mm = ds.generate_phantom(seed0 + i, pcfg)
        sample, mm_model = prep.prepare_sample(slc, mm, cfg)
        pixels.append(sample.pixels)
        masks.append(mm_model)
    return np.stack(pixels), masks


@pytest.fixture(scope="session")
def tiny_stack():
    # 16 is the training minimum; 16x16 keeps the conv nets cheap
    return build_stack(16, 4000, 16)


@pytest.fixture(scope="session")
def small_stack():
    return build_stack(24, 4100, 32)
