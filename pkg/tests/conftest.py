import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from supergseg.scene import Camera, build_covariance
from supergseg.synthetic import SynthSpec, generate_synthetic_scene


def random_gaussians(rng, n, spread=1.0, sigma=0.15, z_center=4.0):
    """A loose cloud in front of a camera looking down +z."""
    mu = rng.normal(0.0, spread, size=(n, 3))
    mu[:, 2] = z_center + rng.normal(0.0, 0.5, size=n)
    scales = sigma * np.exp(rng.normal(0.0, 0.3, size=(n, 3)))
    quats = rng.normal(size=(n, 4))
    cov = build_covariance(scales, quats)
    alpha = rng.uniform(0.2, 0.95, size=n)
    return mu, cov, alpha


def frontal_camera(width=16, height=16, focal=24.0):
    return Camera(fx=focal, fy=focal, cx=(width - 1) / 2, cy=(height - 1) / 2,
                  r=np.eye(3), t=np.zeros(3), width=width, height=height)


@pytest.fixture(scope="session")
def tiny_bundle():
    """Small synthetic scene shared by unit tests (not the acceptance gate)."""
    spec = SynthSpec(objects=3, parts_per_object=2, anchors_per_object=80,
                     image_size=48, train_views=4, heldout_views=2, seed=11)
    return generate_synthetic_scene(spec)
