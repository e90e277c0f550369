import numpy as np
import pytest

from posevalid import build_model, Mesh, SymmetrySpec
from posevalid.datagen import make_toy_mesh


def cube_mesh(side=1.0):
    h = side / 2
    verts = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),   # x = -h, +h
        (0, 4, 5, 1), (2, 3, 7, 6),   # y = -h, +h
        (0, 2, 6, 4), (1, 5, 7, 3),   # z = -h, +h
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return Mesh(verts, np.array(faces))


def hex_prism_mesh():
    """Hexagonal prism with a tapered top: exactly cyclic-6 about z."""
    ang = 2 * np.pi * np.arange(6) / 6
    bot = np.stack([0.5 * np.cos(ang), 0.5 * np.sin(ang), np.full(6, -0.15)], axis=1)
    top = np.stack([0.35 * np.cos(ang), 0.35 * np.sin(ang), np.full(6, 0.15)], axis=1)
    verts = np.concatenate([bot, top, [[0, 0, -0.15]], [[0, 0, 0.15]]])
    cb, ct = 12, 13
    faces = []
    for j in range(6):
        k = (j + 1) % 6
        faces += [[j, k, 6 + j], [k, 6 + k, 6 + j]]        # sides
        faces += [[k, j, cb], [6 + j, 6 + k, ct]]          # caps
    return Mesh(verts, np.array(faces))


@pytest.fixture(scope="session")
def cube_model():
    return build_model(cube_mesh(), SymmetrySpec(), n_samples=10_000, seed=3,
                       model_id="cube")


def _toy_model(kind, n_samples=4096, seed=1):
    mesh, sym = make_toy_mesh(kind)
    return build_model(mesh, sym, n_samples=n_samples, seed=seed, model_id=kind)


@pytest.fixture(scope="session")
def wedge_model():
    return _toy_model("wedge")


@pytest.fixture(scope="session")
def bar2_model():
    return _toy_model("bar2")


@pytest.fixture(scope="session")
def cross4_model():
    return _toy_model("cross4")


@pytest.fixture(scope="session")
def cone_model():
    return _toy_model("cone_rev")


@pytest.fixture(scope="session")
def hex6_model():
    return build_model(hex_prism_mesh(), SymmetrySpec("cyclic", order=6, axis=[0, 0, 1]),
                       n_samples=4096, seed=2, model_id="hex6")
