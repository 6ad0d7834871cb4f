"""Small dense linear algebra and SE(3) pose arithmetic.

Everything here works on 3- and 6-dimensional quantities. The optimization
vector is ordered ``x = [r, t]``: rotation (radians) first, translation
(meters) second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-8


class NotSymmetric(ValueError):
    """Raised when a matrix handed to :func:`sym_eig` is not symmetric."""


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(v) @ w == cross(v, w)``."""
    x, y, z = (float(c) for c in v)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return 0.5 * np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]])


def asymmetry(M: np.ndarray) -> float:
    """Largest entry of ``|M - M^T|``."""
    M = np.asarray(M, dtype=float)
    return float(np.max(np.abs(M - M.T))) if M.size else 0.0


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray   # descending
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]

    def reconstruct(self) -> np.ndarray:
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T


def sym_eig(M, tol: float = SYMMETRY_TOL) -> SymEig:
    """Eigendecomposition of a small symmetric matrix by cyclic Jacobi sweeps.

    Eigenvalues come back in descending order. Each eigenvector is signed so
    that its largest-magnitude component is positive, which keeps results
    reproducible across calls.
    """
    A = np.array(M, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if asymmetry(A) > tol * scale:
        raise NotSymmetric(f"matrix asymmetry {asymmetry(A):.3e} exceeds {tol:g}")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    norm = np.linalg.norm(A)
    for _ in range(100):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= 1e-12 * norm or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300 or abs(apq) <= 1e-18 * (abs(A[p, p]) + abs(A[q, q])):
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) plane rotation
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = A[q, p] = 0.0
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * Vp - s * Vq
                V[:, q] = s * Vp + c * Vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    for i in range(n):
        j = int(np.argmax(np.abs(V[:, i])))
        if V[j, i] < 0:
            V[:, i] = -V[:, i]
    return SymEig(w, V)


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray


def svd(A) -> SvdResult:
    U, s, Vt = np.linalg.svd(np.asarray(A, dtype=float))
    return SvdResult(U, s, Vt.T)


def pinv_reciprocals(s: np.ndarray, rank_tol: float) -> np.ndarray:
    """Reciprocals of singular values, zero below ``rank_tol * s.max()``."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    if s.size == 0 or s[0] <= 0.0:
        return out
    keep = s > rank_tol * s[0]
    out[keep] = 1.0 / s[keep]
    return out


def svd_solve(A, b, rank_tol: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares solution of ``A x = b`` via the SVD."""
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    res = svd(A)
    inv = pinv_reciprocals(res.singular_values, rank_tol)
    return res.V @ (inv * (res.U.T @ b))


def so3_exp(r) -> np.ndarray:
    """Rodrigues' formula."""
    r = np.asarray(r, dtype=float)
    theta = float(np.linalg.norm(r))
    W = hat(r)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    angle = rotation_angle(R)
    w = vee(0.5 * (R - R.T))   # sin(angle) * axis
    if angle < 1e-8:
        return w
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; take the axis from R + I
        B = 0.5 * (R + np.eye(3))
        j = int(np.argmax(np.diag(B)))
        axis = B[:, j] / np.sqrt(max(B[j, j], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * angle
    return w * (angle / np.sin(angle))


def so3_right_jacobian(r) -> np.ndarray:
    """Right Jacobian of SO(3): ``exp(r + d) ~= exp(r) exp(Jr(r) d)``."""
    r = np.asarray(r, dtype=float)
    theta = float(np.linalg.norm(r))
    W = hat(r)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * W + (W @ W) / 6.0
    t2 = theta * theta
    return (np.eye(3) - (1.0 - np.cos(theta)) / t2 * W
            + (theta - np.sin(theta)) / (t2 * theta) * (W @ W))


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix, in ``[0, pi]``.

    Same value as ``arccos((trace(R) - 1) / 2)`` clamped to ``[-1, 1]``, but
    evaluated with ``atan2`` so that tiny angles keep full precision.
    """
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    s = np.linalg.norm(vee(0.5 * (R - R.T)))
    return float(np.arctan2(s, c))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest proper rotation matrix (polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_vector(cls, rotation_vector=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        return cls(so3_exp(rotation_vector), translation)

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def rotation_vector(self) -> np.ndarray:
        return so3_log(self.rotation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self * other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(max(np.max(np.abs(R.T @ R - np.eye(3))), abs(np.linalg.det(R) - 1.0)))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        if "rotation" in d:
            return cls(d["rotation"], d.get("translation", (0.0, 0.0, 0.0)))
        return cls.from_vector(d.get("rotation_vector", (0.0, 0.0, 0.0)),
                               d.get("translation", (0.0, 0.0, 0.0)))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def apply_increment(T: RigidTransform, x) -> RigidTransform:
    """Left-apply the increment ``x = [r, t]`` in the map frame.

    The new pose is ``[exp(r) | t] * T``; the rotation is re-orthonormalized
    so that round-off does not accumulate over many updates.
    """
    x = np.asarray(x, dtype=float)
    dR = so3_exp(x[:3])
    R = orthonormalize(dR @ T.rotation)
    return RigidTransform(R, dR @ T.translation + x[3:])


def pose_error(T_est: RigidTransform, T_gt: RigidTransform) -> tuple[float, float]:
    """(rotation error in radians, translation error in meters)."""
    rot = rotation_angle(T_est.rotation.T @ T_gt.rotation)
    trans = float(np.linalg.norm(T_est.translation - T_gt.translation))
    return rot, trans
