import numpy as np
import pytest

from csr3d import build_shape_model, generate_dataset


@pytest.fixture(scope="session")
def small_model():
    return build_shape_model(n_vertices=300, rank_identity=4, rank_expression=3, seed=11)


@pytest.fixture(scope="session")
def small_dataset(small_model):
    return generate_dataset(
        small_model,
        subjects=8,
        expressions_per_subject=2,
        yaw_grid=(-30.0, 0.0, 30.0),
        pitch_grid=(-15.0, 0.0, 15.0),
        seed=3,
    )


def make_sphere(rows=24, cols=48, radius=1.0):
    """UV-sphere tessellation used as an independent normals oracle."""
    verts = [(0.0, 0.0, radius)]
    for i in range(1, rows):
        phi = np.pi * i / rows
        for j in range(cols):
            theta = 2.0 * np.pi * j / cols
            verts.append((
                radius * np.sin(phi) * np.cos(theta),
                radius * np.sin(phi) * np.sin(theta),
                radius * np.cos(phi),
            ))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1
    tris = []
    ring = lambda i, j: 1 + (i - 1) * cols + (j % cols)
    for j in range(cols):
        tris.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, rows - 1):
        for j in range(cols):
            tris.append((ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)))
            tris.append((ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)))
    for j in range(cols):
        tris.append((south, ring(rows - 1, j + 1), ring(rows - 1, j)))
    return np.asarray(verts), np.asarray(tris, dtype=np.int64)
