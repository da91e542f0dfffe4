import numpy as np
import pytest

from echodetect import BinaryMask, LabelVolume, Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_case(shape=(24, 24, 24), lesion_center=None, lesion_radius=3, seed=0):
    """Small synthetic case: noisy volume, ellipsoidal prostate, one
    optional spherical lesion."""
    g = np.random.default_rng(seed)
    data = g.random(shape).astype(np.float32)
    zz, yy, xx = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
    c = [n / 2 for n in shape]
    prostate = ((zz - c[0]) / (shape[0] * 0.4)) ** 2 + ((yy - c[1]) / (shape[1] * 0.4)) ** 2 + (
        (xx - c[2]) / (shape[2] * 0.4)
    ) ** 2 <= 1.0
    label = np.zeros(shape, dtype=np.uint8)
    if lesion_center is not None:
        dist = (zz - lesion_center[0]) ** 2 + (yy - lesion_center[1]) ** 2 + (xx - lesion_center[2]) ** 2
        label[(dist <= lesion_radius**2) & prostate] = 1
    return (
        Volume3D(data),
        BinaryMask(prostate),
        LabelVolume(label, "strong"),
    )


@pytest.fixture
def small_case():
    return make_case(lesion_center=(12, 12, 12), lesion_radius=3)
