import numpy as np
import pytest

from modnet_cli.geom import PointCloud
from modnet_cli.model import ModelDims
from modnet_cli.shapes import gen_shape, sample_surface


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dims():
    return ModelDims(encoder_widths=(8, 16), fuse_width=16, weight_hidden=8, decoder_widths=(8,))


@pytest.fixture
def plane_cloud():
    """30 x 30 grid on z = 0 over the unit square, normals +z."""
    u, v = np.meshgrid(np.linspace(0, 1, 30), np.linspace(0, 1, 30))
    points = np.stack([u.ravel(), v.ravel(), np.zeros(u.size)], axis=1)
    normals = np.tile([0.0, 0.0, 1.0], (len(points), 1))
    return PointCloud(points, normals)


@pytest.fixture
def sphere_cloud():
    mesh = gen_shape("sphere", resolution=4)
    return sample_surface(mesh, 1500, np.random.default_rng(7))


@pytest.fixture
def cube_mesh():
    return gen_shape("cube", resolution=4)
