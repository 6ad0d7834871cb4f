import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from degicp.cloud import PointCloud
from degicp.linearize import build_normal_equations, build_rows
from degicp.matching import CorrespondenceSet

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def cube_cloud(n_per_face: int = 400, size: float = 2.0, seed: int = 0) -> PointCloud:
    """Points on the six faces of an axis-aligned cube centred at (0.3, -0.2, 0.1), with analytic normals."""
    rng = np.random.default_rng(seed)
    pts, nrm = [], []
    h = size / 2
    for axis in range(3):
        for sign in (-1.0, 1.0):
            uv = rng.uniform(-h, h, (n_per_face, 2))
            p = np.zeros((n_per_face, 3))
            others = [a for a in range(3) if a != axis]
            p[:, others[0]], p[:, others[1]] = uv[:, 0], uv[:, 1]
            p[:, axis] = sign * h
            n = np.zeros((n_per_face, 3))
            n[:, axis] = sign
            pts.append(p)
            nrm.append(n)
    offset = np.array([0.3, -0.2, 0.1])
    return PointCloud(np.vstack(pts) + offset, np.vstack(nrm))


def random_correspondences(rng, n: int = 60, spread: float = 3.0, noise: float = 0.05) -> CorrespondenceSet:
    p = rng.uniform(-spread, spread, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    q = p + rng.normal(0.0, noise, (n, 3))
    return CorrespondenceSet.from_arrays(p, q, nrm)


def random_system(rng, n: int = 60):
    corr = random_correspondences(rng, n)
    rows = build_rows(corr)
    return corr, rows, build_normal_equations(rows)


def diag_system(sigmas, b):
    """Normal equations with ``A = diag(sigmas)`` directly."""
    from degicp.linearize import NormalEquations
    return NormalEquations(np.diag(np.asarray(sigmas, dtype=float)), np.asarray(b, dtype=float), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def degenerate_system(rng, n_rot: int = 1, n_trans: int = 1, n: int = 40, push: float = 1.0):
    """Normal equations that are exactly singular along random lifted directions.

    Returns ``(ne, V)`` where the columns of ``V`` (6 x (n_rot + n_trans)) are
    the null directions of ``A``. ``b`` gets an extra component of relative
    size ``push`` along them, as a linearization mismatch would produce.
    """
    from degicp.linearize import NormalEquations
    Vr = np.linalg.qr(rng.normal(size=(3, 3)))[0][:, :n_rot]
    Vt = np.linalg.qr(rng.normal(size=(3, 3)))[0][:, :n_trans]
    V = np.zeros((6, n_rot + n_trans))
    V[:3, :n_rot] = Vr
    V[3:, n_rot:] = Vt
    J = rng.normal(size=(n, 6)) * rng.uniform(0.5, 5.0)
    J = J - (J @ V) @ V.T
    A = J.T @ J
    A = 0.5 * (A + A.T)
    b = J.T @ rng.normal(size=n) * 0.05
    b = b + push * np.linalg.norm(b) * (V @ rng.normal(size=V.shape[1]))
    return NormalEquations(A, b, n), V
