import numpy as np
import pytest

from src.models import CityConfig
from src.simkit import generate_city
from src.twin import TwinMesh


def quad_mesh(quads):
    """Mesh from a list of 4-corner quads, two triangles each."""
    vertices, triangles = [], []
    for quad in quads:
        base = len(vertices)
        vertices.extend(quad)
        triangles.extend([[base, base + 1, base + 2], [base, base + 2, base + 3]])
    return TwinMesh.from_arrays(np.array(vertices, dtype=float), np.array(triangles))


def sample_planes(rng, n_per_plane, planes):
    """Points on (origin, u, v, size) rectangles."""
    points = []
    for origin, u, v, size in planes:
        s = rng.uniform(0.0, size, size=(n_per_plane, 2))
        points.append(np.asarray(origin) + s[:, :1] * np.asarray(u) + s[:, 1:] * np.asarray(v))
    return np.vstack(points)


CORNER_PLANES = [
    ((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), 20.0),  # пол
    ((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), 20.0),  # стена y = 0
    ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), 20.0),  # стена x = 0
]


@pytest.fixture
def corner_scene():
    """Floor and two walls meeting at the origin, normals facing the open octant."""
    return quad_mesh(
        [
            [(0, 0, 0), (20, 0, 0), (20, 20, 0), (0, 20, 0)],
            [(0, 0, 0), (0, 0, 20), (20, 0, 20), (20, 0, 0)],
            [(0, 0, 0), (0, 20, 0), (0, 20, 20), (0, 0, 20)],
        ]
    )


@pytest.fixture
def single_wall():
    """Vertical wall in the plane y = 0, facing -y."""
    return quad_mesh([[(-50, 0, 0), (50, 0, 0), (50, 0, 30), (-50, 0, 30)]])


@pytest.fixture
def small_city():
    city = CityConfig(blocks_x=2, blocks_y=2, block_size=30.0, street_width=20.0, height_min=20.0, height_max=40.0)
    return generate_city(city, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
