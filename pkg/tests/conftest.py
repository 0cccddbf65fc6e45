import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from animesh.mesh import TriangleMesh, cotangent_weights
from animesh.shapes import cylinder, grid_cube, icosphere

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere():
    return icosphere(2)


@pytest.fixture(scope="session")
def sphere_lap(sphere):
    return cotangent_weights(sphere)


@pytest.fixture(scope="session")
def cube():
    return grid_cube(4)


@pytest.fixture(scope="session")
def small_cylinder():
    return cylinder(16, 12)


@pytest.fixture
def triangle():
    return TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


@pytest.fixture
def square():
    """Unit square split along its diagonal (0, 2)."""
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def twisted_cube(n: int = 6, angle_deg: float = 45.0):
    """Unit cube cut at x = 0 into two clusters; the +x half is rotated about the x axis.

    Returns ``(mesh, rig, driven_frame)`` with fps anchors at the default 0.1 fraction.
    """
    from animesh.deform import MotionParams, axis_angle_quat, drive_mesh
    from animesh.rigging import Rig, fps_sample, handle_points

    mesh = grid_cube(n)
    labels = (mesh.vertices[:, 0] > 1e-9).astype(np.int64)
    rig = Rig(labels, handle_points(mesh, labels, 2), fps_sample(mesh))
    q = np.array([[[1.0, 0, 0, 0], axis_angle_quat([1, 0, 0], np.radians(angle_deg))]])
    motion = MotionParams(np.zeros((1, 2, 3)), q)
    return mesh, rig, drive_mesh(mesh, rig, motion).frames[0]


def rigidity_oracle(mesh, lap, anchors, driven, lambda1, lambda2):
    """Minimize the rigidity loss directly with L-BFGS over vertex positions.

    Rotations are eliminated (the energy is a minimum over them), so by the
    envelope theorem the gradient is the fixed-rotation gradient at the
    optimal rotations.
    """
    from scipy.optimize import minimize

    from animesh.arap import arap_energy, arap_gradient, optimal_rotations

    anchors = np.asarray(anchors)
    c = lambda2 / (3 * len(anchors))

    def f(x):
        V = x.reshape(-1, 3)
        R = optimal_rotations(mesh, V, lap)
        diff = V[anchors] - driven[anchors]
        val = lambda1 * arap_energy(mesh, V, lap, R) + c * np.sum(diff * diff)
        g = lambda1 * arap_gradient(mesh, V, lap, R)
        g[anchors] += 2 * c * diff
        return val, g.ravel()

    res = minimize(f, driven.ravel(), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=20000, maxcor=30, ftol=1e-15, gtol=1e-13))
    return res.fun, res.x.reshape(-1, 3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
