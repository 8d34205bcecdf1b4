import numpy as np
import pytest
import torch
from scipy import ndimage


def textured_frame(h, w, seed=0, smooth=1.0):
    """Natural-ish test image: smoothed uniform noise in [0, 1]."""
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3))
    img = ndimage.gaussian_filter(img, sigma=(smooth, smooth, 0))
    img -= img.min()
    img /= img.max()
    return img.astype(np.float32)


def textured_clip(t, h, w, seed=0, shift_per_frame=(0, 0)):
    """Clip of circularly shifted copies of one textured frame."""
    base = textured_frame(h, w, seed=seed)
    frames = []
    for i in range(t):
        dy = int(round(shift_per_frame[1] * i))
        dx = int(round(shift_per_frame[0] * i))
        frames.append(np.roll(base, shift=(-dy, -dx), axis=(0, 1)))
    return np.stack(frames)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def tiny_model_config(**kw):
    from dualref.network import ModelConfig

    base = dict(
        channels=8,
        encoder_blocks=1,
        ref_fusion_blocks=1,
        sr_fusion_blocks=1,
        upsampler_blocks=1,
        embed_channels=4,
        scale=4,
        seed=7,
    )
    base.update(kw)
    return ModelConfig(**base)
