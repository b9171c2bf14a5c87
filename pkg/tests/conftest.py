import numpy as np
import pytest

from racam.models import tiny_vgg_init


def rel_err(a, b) -> float:
    """Max-norm relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max())
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


@pytest.fixture(scope="session")
def small_vgg():
    """Seed-42 tiny VGG with non-zero biases, for shape-level checks on 16x32 inputs."""
    m = tiny_vgg_init(42)
    rng = np.random.default_rng(42)
    for k, v in m.params.items():
        if k.endswith(".bias"):
            m.params[k] = rng.normal(0, 0.05, v.shape).astype(np.float32)
    return m


@pytest.fixture(scope="session")
def small_image():
    rng = np.random.default_rng(42)
    img = rng.random((1, 16, 32)).astype(np.float32)
    img[0, 6:9, 4:28] += 0.4
    return np.clip(img, 0, 1)
