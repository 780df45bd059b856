import numpy as np
import pytest
import torch

from setcomp.nets import EncoderConfig
from setcomp.render import RenderSpec, synth_glyph_store

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_store():
    # 12 classes x 4 exemplars keeps unit tests fast
    return synth_glyph_store(12, 4, seed=5)


@pytest.fixture(scope="session")
def tiny_encoder_config():
    return EncoderConfig(m=16, channels=(4, 8, 8, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def default_spec():
    return RenderSpec()


@pytest.fixture
def still_spec():
    # no jitter, no noise: renders become exact pixel identities
    return RenderSpec(shift_frac=0.0, scale_range=(1.0, 1.0), rot_deg=0.0, noise_sigma=0.0)
