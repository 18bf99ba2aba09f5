import numpy as np
import pytest
import sympy

from anisoavg.expressions import RADIUS, Y1, Y2
from anisoavg.fields import FlowMap, MatrixFieldSpec, VectorFieldSpec


@pytest.fixture(scope="session")
def rotation():
    return VectorFieldSpec.rotation()


@pytest.fixture(scope="session")
def shear():
    return VectorFieldSpec.shear()


@pytest.fixture(scope="session")
def rot_flow(rotation):
    return FlowMap(rotation, box=4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_points(rng, count=100, r_min=0.2, r_max=3.0):
    r = rng.uniform(r_min, r_max, count)
    t = rng.uniform(0, 2 * np.pi, count)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)


def random_compact_field(rng, terms=3, positive=False, cutoff=2.5):
    """Smooth symmetric field, negligible outside radius ~3.

    A super-Gaussian cutoff times a few Gaussians carrying random symmetric
    (or positive semidefinite) matrices.
    """
    chi = sympy.exp(-((RADIUS / cutoff) ** 8))
    A = sympy.zeros(2, 2)
    for _ in range(terms):
        c = rng.uniform(-1.5, 1.5, 2)
        width = rng.uniform(0.5, 1.0)
        g = sympy.exp(-((Y1 - c[0]) ** 2 + (Y2 - c[1]) ** 2) / (2 * width**2))
        M = rng.normal(size=(2, 2))
        S = M @ M.T if positive else M + M.T
        A += g * sympy.Matrix(S.round(6).tolist())
    return MatrixFieldSpec(chi * A, positive=positive)
