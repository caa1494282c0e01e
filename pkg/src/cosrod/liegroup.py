"""SO(3)/SE(3) kernels: hat maps, exponentials, logarithms, adjoints.

Twists are ordered [angular; linear] throughout the package. All kernels
broadcast over leading batch axes; poses are (..., 3, 3) rotations paired
with (..., 3) translations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BranchCutError

# Small-angle thresholds, exposed for tests. Below EXP_SERIES_THRESHOLD the
# Rodrigues coefficients use their series limits; below ANGLE_SERIES_THRESHOLD
# the (theta - sin theta)/theta^3 style coefficients cancel catastrophically
# and switch to truncated series.
EXP_SERIES_THRESHOLD = 1.0e-8
ANGLE_SERIES_THRESHOLD = 1.0e-4
# Logarithms are rejected within this angular distance of the pi branch cut.
LOG_BRANCH_GUARD = 1.0e-6

# Term count for the se(3) right-Jacobian series; converges to machine
# precision for arguments up to norm ~1.
SE3_SERIES_TERMS = 14
_FACTORIALS = np.array([float(math.factorial(k)) for k in range(SE3_SERIES_TERMS + 2)])


def hat3(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, hat3(a) @ b = a x b."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee3(m: np.ndarray) -> np.ndarray:
    """Inverse of hat3 for skew-symmetric input."""
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _rodrigues_coeffs(theta: np.ndarray):
    """Stable sin(t)/t and (1-cos t)/t^2 for any t >= 0."""
    small = theta < EXP_SERIES_THRESHOLD
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    # 1 - cos t == 2 sin^2(t/2) avoids cancellation
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(safe / 2.0) ** 2 / safe**2)
    return a, b


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix exp(hat3(phi)), Rodrigues form."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _rodrigues_coeffs(theta)
    ph = hat3(phi)
    eye = np.broadcast_to(np.eye(3), ph.shape)
    return eye + a[..., None, None] * ph + b[..., None, None] * (ph @ ph)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Principal rotation vector of R. Raises BranchCutError near angle pi."""
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta > np.pi - LOG_BRANCH_GUARD:
        raise BranchCutError(
            f"log near branch cut: rotation angle {theta:.9f} within "
            f"{LOG_BRANCH_GUARD:g} of pi"
        )
    w = vee3((R - R.T) / 2.0)  # sin(theta) * axis
    if theta < ANGLE_SERIES_THRESHOLD:
        return w * (1.0 + theta**2 / 6.0)
    return w * (theta / np.sin(theta))


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): d/dt exp(phi(t)) = hat3(J_l dphi) exp(phi)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b = _rodrigues_coeffs(theta)
    small = theta < ANGLE_SERIES_THRESHOLD
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 6.0 - theta**2 / 120.0,
        (safe - np.sin(safe)) / safe**3,
    )
    ph = hat3(phi)
    eye = np.broadcast_to(np.eye(3), ph.shape)
    return eye + b[..., None, None] * ph + c[..., None, None] * (ph @ ph)


def so3_left_jacobian_dot(phi: np.ndarray, dphi: np.ndarray,
                          terms: int = 24) -> np.ndarray:
    """Directional derivative of so3_left_jacobian along dphi.

    Series sum_{k>=1} 1/(k+1)! sum_{a+b=k-1} ph^a dph ph^b; converges to
    machine precision for |phi| <= pi with the default term count.
    """
    ph = hat3(np.asarray(phi, dtype=float))
    dph = hat3(np.asarray(dphi, dtype=float))
    powers = [np.broadcast_to(np.eye(3), ph.shape)]
    for _ in range(terms):
        powers.append(powers[-1] @ ph)
    out = np.zeros_like(ph)
    for k in range(1, terms + 1):
        coeff = 1.0 / float(math.factorial(k + 1))
        acc = np.zeros_like(ph)
        for a in range(k):
            acc = acc + powers[a] @ dph @ powers[k - 1 - a]
        out = out + coeff * acc
    return out


def exp_se3_rp(X: np.ndarray):
    """exp of the se(3) element with twist coordinates X = [ang; lin].

    Returns (R, p) arrays; p = J_l(ang) @ lin.
    """
    X = np.asarray(X, dtype=float)
    ang = X[..., :3]
    lin = X[..., 3:]
    R = exp_so3(ang)
    p = (so3_left_jacobian(ang) @ lin[..., None])[..., 0]
    return R, p


def log_se3_rp(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Twist coordinates of the SE(3) logarithm. Raises near the branch cut."""
    phi = log_so3(R)
    eps = np.linalg.solve(so3_left_jacobian(phi), np.asarray(p, dtype=float))
    return np.concatenate([phi, eps])


def adjoint_rp(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Adjoint Ad_g = [[R, 0], [hat(p) R, R]] mapping body twists to global."""
    R = np.asarray(R, dtype=float)
    p = np.asarray(p, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat3(p) @ R
    return out


def coadjoint_rp(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Coadjoint Ad*_g = [[R, hat(p) R], [0, R]] mapping wrenches; equals
    the transpose-inverse of adjoint_rp."""
    R = np.asarray(R, dtype=float)
    p = np.asarray(p, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., :3, 3:] = hat3(p) @ R
    return out


def adjoint_inv_rp(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Adjoint of the inverse pose, Ad_{g^-1}."""
    R = np.asarray(R, dtype=float)
    p = np.asarray(p, dtype=float)
    Rt = np.swapaxes(R, -1, -2)
    pinv = -(Rt @ p[..., None])[..., 0]
    return adjoint_rp(Rt, pinv)


def ad6(xi: np.ndarray) -> np.ndarray:
    """Lie-algebra adjoint ad_xi = [[hat(ang), 0], [hat(lin), hat(ang)]]."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    ha = hat3(xi[..., :3])
    out[..., :3, :3] = ha
    out[..., 3:, 3:] = ha
    out[..., 3:, :3] = hat3(xi[..., 3:])
    return out


def se3_hat(xi: np.ndarray) -> np.ndarray:
    """4x4 matrix form [[hat(ang), lin], [0, 0]] of a twist."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = hat3(xi[..., :3])
    out[..., :3, 3] = xi[..., 3:]
    return out


def se3_right_jacobian(X: np.ndarray, terms: int = SE3_SERIES_TERMS) -> np.ndarray:
    """Right Jacobian of SE(3): exp(X + dX) ~= exp(X) exp(J_r dX), via the
    series sum (-ad_X)^k / (k+1)!."""
    A = -ad6(X)
    out = np.broadcast_to(np.eye(6), A.shape).copy()
    term = np.broadcast_to(np.eye(6), A.shape)
    for k in range(1, terms + 1):
        term = term @ A
        out = out + term / _FACTORIALS[k + 1]
    return out


def se3_right_jacobian_dot(X: np.ndarray, dX: np.ndarray,
                           terms: int = SE3_SERIES_TERMS) -> np.ndarray:
    """Directional derivative of se3_right_jacobian along dX."""
    A = -ad6(X)
    dA = -ad6(dX)
    powers = [np.broadcast_to(np.eye(6), A.shape)]
    for _ in range(terms):
        powers.append(powers[-1] @ A)
    # cache P_a @ dA once per exponent
    left = [powers[a] @ dA for a in range(terms)]
    out = np.zeros_like(A)
    for k in range(1, terms + 1):
        acc = np.zeros_like(A)
        for a in range(k):
            acc = acc + left[a] @ powers[k - 1 - a]
        out = out + acc / _FACTORIALS[k + 1]
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotation matrix R and translation p."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, H: np.ndarray) -> "Pose":
        H = np.asarray(H, dtype=float)
        R = H[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation block is not orthonormal")
        return cls(R, H[:3, 3])

    def matrix(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.R
        H[:3, 3] = self.p
        return H

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.p)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.p + self.p)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) @ self.R.T) + self.p

    def adjoint(self) -> np.ndarray:
        return adjoint_rp(self.R, self.p)

    def coadjoint(self) -> np.ndarray:
        return coadjoint_rp(self.R, self.p)


def exp_se3(xi: np.ndarray, ds: float = 1.0) -> Pose:
    """Pose reached by following the constant twist xi for arc length ds."""
    R, p = exp_se3_rp(np.asarray(xi, dtype=float) * ds)
    return Pose(R, p)


def log_se3(g: Pose) -> np.ndarray:
    """Twist coordinates of the pose logarithm, inverse of exp_se3(., 1)."""
    return log_se3_rp(g.R, g.p)


def adjoint(g: Pose) -> np.ndarray:
    return adjoint_rp(g.R, g.p)


def coadjoint(g: Pose) -> np.ndarray:
    return coadjoint_rp(g.R, g.p)
