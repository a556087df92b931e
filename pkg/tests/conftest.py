import numpy as np
import pytest

from semfuse import LabeledCloud, RigidTransform


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish proper rotation from the QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng, t_scale=1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(scale=t_scale, size=3))


def random_cloud(rng, n, n_labels=5, extent=1.0) -> LabeledCloud:
    return LabeledCloud(rng.uniform(-extent, extent, size=(n, 3)),
                        rng.uniform(0.0, 1.0, size=(n, 3)),
                        rng.integers(0, n_labels, size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
