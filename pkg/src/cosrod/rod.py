"""Rod description and product-of-exponentials kinematics.

Arc length is normalized to [0,1] internally. Stored strains are
dimensionless with reference (0,0,0,1,0,0) (straight rod, unit stretch);
the pose map integrates the scaled twist diag(1,1,1,L,L,L) xi_bar so all
poses and velocity twists are physical. Physical strain follows as
(kappa_bar / L, eps_bar).

The configuration map is a midpoint product of exponentials on a fixed
sub-step partition. Jacobians are the exact tangents of that discrete map
(not a separately discretized ODE), so finite differences of the pose map
reproduce them to truncation error of the difference quotient alone.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .liegroup import (
    Pose,
    ad6,
    adjoint_inv_rp,
    adjoint_rp,
    exp_se3_rp,
    exp_so3,
    hat3,
    se3_right_jacobian,
    se3_right_jacobian_dot,
    so3_left_jacobian,
    so3_left_jacobian_dot,
)

REFERENCE_STRAIN = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])

# tolerance for merging coincident grid points
_GRID_MERGE_TOL = 1e-12


@dataclass(frozen=True)
class RodGeometry:
    """Circular cross-section rod; radius r(s) = r0 + k * s * L."""

    length: float
    base_radius: float
    radial_gradient: float = 0.0

    def __post_init__(self):
        if self.length <= 0.0:
            raise ConfigError(f"rod length must be positive, got {self.length}")
        if self.radius(0.0) <= 0.0 or self.radius(1.0) <= 0.0:
            raise ConfigError(
                "cross-section radius must stay positive along the rod: "
                f"r(0)={self.radius(0.0):g}, r(1)={self.radius(1.0):g}"
            )

    def radius(self, s):
        return self.base_radius + self.radial_gradient * np.asarray(s) * self.length


@dataclass(frozen=True)
class Material:
    """Isotropic elastic parameters; damping is a Kelvin-Voigt viscosity (Pa s)."""

    young_modulus: float
    poisson_ratio: float
    density: float
    damping: float = 0.0

    def __post_init__(self):
        if self.young_modulus <= 0.0:
            raise ConfigError("young_modulus must be positive")
        if self.density <= 0.0:
            raise ConfigError("density must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ConfigError(
                f"poisson_ratio must lie in (-1, 0.5), got {self.poisson_ratio}"
            )
        if self.damping < 0.0:
            raise ConfigError("damping must be non-negative")

    @property
    def shear_modulus(self):
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def viscous_ratio(self):
        """Retardation time (s): viscosity / stiffness."""
        return self.damping / self.young_modulus


def _hat_weights(num_sections, s):
    """Linear hat interpolation on a uniform grid: section index and weights."""
    s = np.asarray(s, dtype=float)
    x = s * num_sections
    sec = np.minimum(np.floor(x).astype(int), num_sections - 1)
    w1 = x - sec
    return sec, 1.0 - w1, w1


def strain_basis(n, s):
    """Interpolation matrix of the nodal strain field at s: (6, 6(n+1)).

    Row i carries the hat-function weights of the i-th twist component.
    """
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"arc coordinate must lie in [0,1], got {s}")
    sec, w0, w1 = _hat_weights(n, s)
    out = np.zeros((6, 6 * (n + 1)))
    out[:, 6 * sec:6 * sec + 6] = w0 * np.eye(6)
    out[:, 6 * sec + 6:6 * sec + 12] = w1 * np.eye(6)
    return out


@dataclass
class StrainField:
    """Piecewise-linear strain: xi(s) = xi0 + hat-interpolated nodal twists."""

    n: int
    theta: np.ndarray
    xi0: np.ndarray = field(default_factory=lambda: REFERENCE_STRAIN.copy())

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(self.n + 1, 6)
        self.xi0 = np.asarray(self.xi0, dtype=float).reshape(6)


def eval_strain(strain_field, s):
    """Interpolated twist xi0 + Phi(s) theta; batched over s."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0.0) or np.any(s_arr > 1.0):
        raise ValueError("arc coordinate must lie in [0,1]")
    sec, w0, w1 = _hat_weights(strain_field.n, s_arr)
    th = strain_field.theta
    out = strain_field.xi0 + w0[..., None] * th[sec] + w1[..., None] * th[sec + 1]
    return out


class GeneralizedState:
    """Coordinates q = [phi(3), p0(3), theta(6(n+1))] and their rates."""

    def __init__(self, q, qdot=None):
        self.q = np.asarray(q, dtype=float).copy()
        if self.q.ndim != 1 or self.q.size % 6 != 0 or self.q.size < 18:
            raise ConfigError(
                f"state dimension must be 6(n+2) with n >= 1, got {self.q.size}"
            )
        self.qdot = (
            np.zeros_like(self.q) if qdot is None
            else np.asarray(qdot, dtype=float).copy()
        )
        if self.qdot.shape != self.q.shape:
            raise ConfigError("q and qdot must have matching shapes")

    @property
    def n(self):
        return self.q.size // 6 - 2

    @property
    def phi(self):
        return self.q[0:3]

    @property
    def p0(self):
        return self.q[3:6]

    @property
    def theta(self):
        return self.q[6:].reshape(-1, 6)

    @property
    def theta_dot(self):
        return self.qdot[6:].reshape(-1, 6)

    def base_pose(self):
        return Pose(exp_so3(self.phi), self.p0.copy())

    @classmethod
    def from_parts(cls, phi, p0, theta, phi_dot=None, p0_dot=None, theta_dot=None):
        theta = np.asarray(theta, dtype=float)
        q = np.concatenate([np.asarray(phi, float), np.asarray(p0, float),
                            theta.reshape(-1)])
        qd = np.concatenate([
            np.zeros(3) if phi_dot is None else np.asarray(phi_dot, float),
            np.zeros(3) if p0_dot is None else np.asarray(p0_dot, float),
            np.zeros(theta.size) if theta_dot is None
            else np.asarray(theta_dot, float).reshape(-1),
        ])
        return cls(q, qd)


def _merge_sorted(points):
    pts = np.sort(np.asarray(points, dtype=float))
    keep = np.empty(pts.shape, dtype=bool)
    keep[0] = True
    np.greater(np.diff(pts), _GRID_MERGE_TOL, out=keep[1:])
    return pts[keep]


class ArcGrid:
    """Shared discretization of [0,1]: quadrature, node sets, sub-steps.

    Breakpoints are the union of strain nodes (n sections), contact nodes
    (m sections), constraint locations, and {0,1}. Each breakpoint interval
    carries a Gauss-Legendre rule, and every breakpoint/quadrature point is
    also a sub-step edge so the pose map and all integrals share one
    partition.
    """

    def __init__(self, n, m=None, quad_order=4, extra_points=(), max_substep=None):
        if n < 1:
            raise ConfigError("need at least one strain section")
        self.n = int(n)
        self.m = int(m) if m is not None else int(n)
        if self.m < 1:
            raise ConfigError("need at least one contact section")
        extra = np.asarray(sorted(extra_points), dtype=float)
        if extra.size and (extra.min() < 0.0 or extra.max() > 1.0):
            raise ConfigError("constraint locations must lie in [0,1]")
        if max_substep is None:
            max_substep = 1.0 / (10.0 * self.n)
        if max_substep <= 0.0:
            raise ConfigError("max_substep must be positive")
        self.max_substep = float(max_substep)
        self.quad_order = int(quad_order)

        breaks = _merge_sorted(np.concatenate([
            np.linspace(0.0, 1.0, self.n + 1),
            np.linspace(0.0, 1.0, self.m + 1),
            extra,
            [0.0, 1.0],
        ]))

        gx, gw = np.polynomial.legendre.leggauss(self.quad_order)
        a, b = breaks[:-1], breaks[1:]
        half = 0.5 * (b - a)
        quad_s = ((a + b)[:, None] * 0.5 + half[:, None] * gx).reshape(-1)
        quad_w = (half[:, None] * gw).reshape(-1)
        order = np.argsort(quad_s, kind="stable")
        self.quad_s = quad_s[order]
        self.quad_w = quad_w[order]

        self.eval_s = _merge_sorted(np.concatenate([breaks, self.quad_s]))

        # sub-step every gap between evaluation points to <= max_substep
        gaps = np.diff(self.eval_s)
        counts = np.maximum(np.ceil(gaps / self.max_substep - 1e-12).astype(int), 1)
        edges = [np.array([0.0])]
        for left, gap, cnt in zip(self.eval_s[:-1], gaps, counts):
            edges.append(left + gap * np.arange(1, cnt + 1) / cnt)
        self.edges = np.concatenate(edges)
        self.eval_edge_idx = np.concatenate([[0], np.cumsum(counts)])
        self.mids = 0.5 * (self.edges[:-1] + self.edges[1:])
        self.deltas = np.diff(self.edges)

        # strain-basis weights at sub-step midpoints, grouped by section
        self.mid_sec, self.mid_w0, self.mid_w1 = _hat_weights(self.n, self.mids)
        bounds = np.searchsorted(self.mid_sec, np.arange(self.n + 1))
        self.section_slices = [
            slice(bounds[i], bounds[i + 1]) for i in range(self.n)
        ]

        # strain-basis weights at evaluation and quadrature points
        self.eval_sec, self.eval_w0, self.eval_w1 = _hat_weights(self.n, self.eval_s)
        self.quad_idx = self._locate(self.quad_s)
        self.quad_sec, self.quad_sw0, self.quad_sw1 = _hat_weights(self.n, self.quad_s)
        # contact-basis weights at quadrature points
        self.quad_csec, self.quad_cw0, self.quad_cw1 = _hat_weights(self.m, self.quad_s)

        self.strain_node_idx = self._locate(np.linspace(0.0, 1.0, self.n + 1))
        self.contact_node_idx = self._locate(np.linspace(0.0, 1.0, self.m + 1))

    @property
    def num_eval(self):
        return self.eval_s.size

    @property
    def num_substeps(self):
        return self.deltas.size

    def _locate(self, s):
        idx = np.searchsorted(self.eval_s, np.asarray(s, dtype=float) - 1e-10)
        if np.any(np.abs(self.eval_s[idx] - s) > 1e-9):
            raise ConfigError("requested arc coordinate is not a grid point")
        return idx

    def index_of(self, s):
        """Evaluation index of a single grid point (constraint locations)."""
        return int(self._locate(np.array([s]))[0])


@dataclass
class RodStateCache:
    """Kinematic quantities at the grid's evaluation points (immutable).

    J maps generalized rates [phi_dot, p0_dot, theta_dot] to the physical
    body twist at each point; columns 0:6 are the base (alpha) block.
    xi is the dimensionless interpolated strain field.
    """

    grid: ArcGrid
    length: float
    q: np.ndarray
    qdot: np.ndarray
    R: np.ndarray        # (E,3,3)
    p: np.ndarray        # (E,3)
    xi: np.ndarray       # (E,6)
    J: np.ndarray        # (E,6,6(n+2))
    eta: np.ndarray      # (E,6)
    Jdot: np.ndarray     # (E,6,6(n+2)) or None when rates were skipped

    @property
    def J_alpha(self):
        return self.J[:, :, :6]

    @property
    def J_theta(self):
        return self.J[:, :, 6:]

    def pose(self, eval_index):
        return Pose(self.R[eval_index].copy(), self.p[eval_index].copy())


def _scan_poses(R_steps, p_steps):
    """Inclusive prefix composition of rigid transforms (Hillis-Steele)."""
    R = R_steps.copy()
    p = p_steps.copy()
    k = R.shape[0]
    shift = 1
    while shift < k:
        Rl, pl = R[:-shift], p[:-shift]
        p_new = pl + np.einsum("kij,kj->ki", Rl, p[shift:])
        R_new = Rl @ R[shift:]
        R[shift:] = R_new
        p[shift:] = p_new
        shift *= 2
    return R, p


class RodModel:
    """One rod bound to a grid; produces state caches and poses."""

    def __init__(self, geometry, material, grid, xi0=None):
        self.geometry = geometry
        self.material = material
        self.grid = grid
        self.xi0 = REFERENCE_STRAIN.copy() if xi0 is None else np.asarray(xi0, float)
        L = geometry.length
        self.twist_scale = np.array([1.0, 1.0, 1.0, L, L, L])
        self.n = grid.n
        self.dof = 6 * (self.n + 2)

    def state(self, q, qdot=None):
        st = GeneralizedState(q, qdot)
        if st.n != self.n:
            raise ConfigError(
                f"state has {st.n} strain sections, model expects {self.n}"
            )
        return st

    def strain(self, q, s):
        theta = np.asarray(q, dtype=float)[6:].reshape(self.n + 1, 6)
        return eval_strain(StrainField(self.n, theta, self.xi0), s)

    def kinematics(self, q, qdot=None, with_rates=True):
        """Pose field, Jacobians, and (optionally) their time derivatives.

        The theta-block Jacobian at an edge e is Ad_{g(e)}^-1 times the
        running sum over preceding sub-steps of
        Ad_{g(e_k+1)} J_r(X_k) d(X_k)/d(theta); summing exactly these terms
        makes J the derivative of the discrete pose map itself.
        """
        st = self.state(q, qdot)
        grid = self.grid
        n, K = self.n, grid.num_substeps
        DL = self.twist_scale

        phi, p0, theta = st.phi, st.p0, st.theta
        R0 = exp_so3(phi)

        # sub-step transforms from midpoint strains
        xi_mid = (self.xi0 + grid.mid_w0[:, None] * theta[grid.mid_sec]
                  + grid.mid_w1[:, None] * theta[grid.mid_sec + 1])
        X = xi_mid * (grid.deltas[:, None] * DL)
        R_steps, p_steps = exp_se3_rp(X)
        R_pre, p_pre = _scan_poses(R_steps, p_steps)

        R_edge = np.empty((K + 1, 3, 3))
        p_edge = np.empty((K + 1, 3))
        R_edge[0], p_edge[0] = R0, p0
        R_edge[1:] = R0 @ R_pre
        p_edge[1:] = p0 + p_pre @ R0.T

        Ad_inv_edge = adjoint_inv_rp(R_edge, p_edge)
        Ad_right = adjoint_rp(R_edge[1:], p_edge[1:])
        Jr = se3_right_jacobian(X)
        col_scale = grid.deltas[:, None, None] * DL[None, None, :]
        C = (Ad_right @ Jr) * col_scale

        ei = grid.eval_edge_idx
        Ad_inv_eval = Ad_inv_edge[ei]

        J_theta = self._prefix_columns(C, Ad_inv_eval)

        Jl = so3_left_jacobian(phi)
        J_alpha0 = np.zeros((6, 6))
        J_alpha0[:3, :3] = R0.T @ Jl
        J_alpha0[3:, 3:] = R0.T
        A0 = adjoint_rp(R0, p0) @ J_alpha0
        J_alpha = Ad_inv_eval @ A0

        J = np.concatenate([J_alpha, J_theta], axis=2)
        eta_eval = J @ st.qdot

        xi_eval = (self.xi0 + grid.eval_w0[:, None] * theta[grid.eval_sec]
                   + grid.eval_w1[:, None] * theta[grid.eval_sec + 1])

        Jdot = None
        if with_rates:
            theta_dot = st.theta_dot
            xi_dot_mid = (grid.mid_w0[:, None] * theta_dot[grid.mid_sec]
                          + grid.mid_w1[:, None] * theta_dot[grid.mid_sec + 1])
            Xdot = xi_dot_mid * (grid.deltas[:, None] * DL)

            # base-twist rate and edge velocities
            omega_spatial = Jl @ st.qdot[:3]
            dR0T = -R0.T @ hat3(omega_spatial)
            Jl_dot = so3_left_jacobian_dot(phi, st.qdot[:3])
            J_alpha0_dot = np.zeros((6, 6))
            J_alpha0_dot[:3, :3] = dR0T @ Jl + R0.T @ Jl_dot
            J_alpha0_dot[3:, 3:] = dR0T
            eta_base = J_alpha0 @ st.qdot[:6]
            A0_dot = adjoint_rp(R0, p0) @ (ad6(eta_base) @ J_alpha0 + J_alpha0_dot)

            v_steps = np.einsum("kij,kj->ki", C, xi_dot_mid)
            v_cum = np.concatenate([np.zeros((1, 6)), np.cumsum(v_steps, axis=0)])
            eta_edge = np.einsum(
                "kij,kj->ki", Ad_inv_edge, v_cum + A0 @ st.qdot[:6])

            dJr = se3_right_jacobian_dot(X, Xdot)
            C_dot = (Ad_right @ (ad6(eta_edge[1:]) @ Jr + dJr)) * col_scale
            S_dot = self._prefix_columns(C_dot, Ad_inv_eval)

            ad_eta = ad6(eta_eval)
            Jdot_theta = -ad_eta @ J_theta + S_dot
            Jdot_alpha = -ad_eta @ J_alpha + Ad_inv_eval @ A0_dot
            Jdot = np.concatenate([Jdot_alpha, Jdot_theta], axis=2)

        return RodStateCache(
            grid=grid, length=self.geometry.length, q=st.q, qdot=st.qdot,
            R=R_edge[ei], p=p_edge[ei], xi=xi_eval, J=J, eta=eta_eval, Jdot=Jdot,
        )

    def _prefix_columns(self, C, Ad_inv_eval):
        """Scatter per-sub-step 6x6 contributions to nodal column blocks,
        accumulate along s, and rotate into each evaluation frame."""
        grid = self.grid
        n, K = self.n, grid.num_substeps
        Z = np.zeros((K, 6, 6 * (n + 1)))
        w0, w1 = grid.mid_w0, grid.mid_w1
        for i, sl in enumerate(grid.section_slices):
            Z[sl, :, 6 * i:6 * i + 6] = C[sl] * w0[sl, None, None]
            Z[sl, :, 6 * i + 6:6 * i + 12] = C[sl] * w1[sl, None, None]
        seg = np.add.reduceat(Z, grid.eval_edge_idx[:-1], axis=0)
        S = np.empty((grid.num_eval, 6, 6 * (n + 1)))
        S[0] = 0.0
        np.cumsum(seg, axis=0, out=S[1:])
        return Ad_inv_eval @ S

    def poses(self, q):
        """Pose field only (no Jacobians), on the same partition."""
        cache = self.kinematics(q, None, with_rates=False)
        return cache.R, cache.p


def reconstruct_pose(state, s, sub_step=None, xi0=None, length=1.0):
    """Pose at arc coordinate s by uniform midpoint sub-stepping of [0, s].

    Standalone variant used for convergence studies; simulation code goes
    through RodModel.kinematics, whose partition the Jacobians match.
    """
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"arc coordinate must lie in [0,1], got {s}")
    if sub_step is None:
        sub_step = 1.0 / (10.0 * state.n)
    if sub_step <= 0.0:
        raise ValueError("sub_step must be positive")
    xi0 = REFERENCE_STRAIN if xi0 is None else np.asarray(xi0, dtype=float)
    scale = np.array([1.0, 1.0, 1.0, length, length, length])

    R = exp_so3(state.phi)
    p = state.p0.copy()
    if s == 0.0:
        return Pose(R, p)
    k = max(int(np.ceil(s / sub_step - 1e-12)), 1)
    edges = np.linspace(0.0, s, k + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    fld = StrainField(state.n, state.theta, xi0)
    X = eval_strain(fld, mids) * scale * (edges[1] - edges[0])
    R_steps, p_steps = exp_se3_rp(X)
    R_pre, p_pre = _scan_poses(R_steps, p_steps)
    return Pose(R @ R_pre[-1], p + R @ p_pre[-1])
