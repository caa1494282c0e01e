"""Galerkin assembly of the discrete dynamics, contact, and constraint blocks.

All arc integrals run over the normalized coordinate and carry the factor L.
The stiffness integrand is expressed in physical strain, so the stored
dimensionless strain deviation theta is bridged by D = diag(1/L I, I):
K = L * int Phi^T D^T K_sec D Phi ds. K acts on the theta coordinates only;
the six base coordinates are rigid modes.

Contact forces live in per-node contact frames. The weak rows weight nodal
gap/velocity values with the Gram matrix of the contact hat functions; the
generalized force pulls each nodal wrench back through Ad^T and distributes
it with B_J[i] = L * int Psi_i J ds.
"""

from dataclasses import dataclass

import numpy as np

from .contact import ad_contact_body, interpolated_frame, normal_gap, slip_velocity
from .errors import ConfigError
from .liegroup import Pose, ad6, adjoint_inv_rp, log_se3_rp, se3_right_jacobian
from .smoothing import contact_node_law

GRAVITY = np.array([0.0, 0.0, -9.81])


def section_properties(geom, material, s):
    """Mass and stiffness line densities of a circular section, batched.

    Returns (Mdens, Kdens) with shape s.shape + (6, 6).
    """
    s = np.asarray(s, dtype=float)
    r = np.asarray(geom.radius(s), dtype=float)
    area = np.pi * r**2
    inertia = 0.25 * np.pi * r**4
    polar = 2.0 * inertia
    E = material.young_modulus
    G = material.shear_modulus
    gamma = material.poisson_ratio
    shear_area = (6.0 + 6.0 * gamma) / (7.0 + 6.0 * gamma) * area

    rho = material.density
    Mdiag = np.stack([rho * polar, rho * inertia, rho * inertia,
                      rho * area, rho * area, rho * area], axis=-1)
    Kdiag = np.stack([G * polar, E * inertia, E * inertia,
                      E * area, G * shear_area, G * shear_area], axis=-1)
    eye = np.eye(6)
    return Mdiag[..., None] * eye, Kdiag[..., None] * eye


def contact_gram(m):
    """Gram matrix of the m+1 contact hat functions on [0,1] (tridiagonal)."""
    h = 1.0 / m
    M = np.zeros((m + 1, m + 1))
    idx = np.arange(m + 1)
    M[idx, idx] = 2.0 * h / 3.0
    M[0, 0] = M[m, m] = h / 3.0
    M[idx[:-1], idx[:-1] + 1] = h / 6.0
    M[idx[:-1] + 1, idx[:-1]] = h / 6.0
    return M


@dataclass
class FixedConstraint:
    """Pose constraint at a grid point; target may be updated per step."""

    s: float
    target: Pose


@dataclass
class BallConstraint:
    """Position-only constraint: the section keeps rotational freedom."""

    s: float
    target: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).reshape(3)


class RodDynamics:
    """Per-rod assembly bound to one model; holds the constant pieces.

    parts lists (geometry, material) constituents whose section densities
    add (a core running along the centerline). Defaults to the rod itself.
    """

    def __init__(self, model, parts=None):
        self.model = model
        grid = model.grid
        L = model.geometry.length
        if parts is None:
            parts = [(model.geometry, model.material)]
        self.parts = parts

        sq = grid.quad_s
        self.Mdens = np.zeros((sq.size, 6, 6))
        Kdens = np.zeros((sq.size, 6, 6))
        K_end = np.zeros((2, 6, 6))
        for geom, mat in parts:
            Mq, Kq = section_properties(geom, mat, sq)
            self.Mdens += Mq
            Kdens += Kq
            for col, s_end in enumerate((0.0, 1.0)):
                K_end[col] += section_properties(geom, mat, s_end)[1]

        # strain bridge: stored twists are dimensionless, stiffness physical
        D_bridge = np.diag([1.0 / L] * 3 + [1.0] * 3)
        Kbar = D_bridge @ Kdens @ D_bridge
        self.K_theta = self._theta_gram(Kbar)
        self.K = np.zeros((model.dof, model.dof))
        self.K[6:, 6:] = self.K_theta
        self.K_end = K_end @ D_bridge   # (2,6,6): end-node boundary rows

        self.M_psi = contact_gram(grid.m)
        self.node_weights = L * self.M_psi.sum(axis=1)
        # viscous_ratio of the primary material scales Kelvin-Voigt damping
        self.viscous_ratio = parts[0][1].viscous_ratio

    def _theta_gram(self, Wq):
        """L * int Phi^T W(s) Phi ds on the quadrature grid."""
        grid = self.model.grid
        L = self.model.geometry.length
        n = grid.n
        K = np.zeros((6 * (n + 1), 6 * (n + 1)))
        wq = L * grid.quad_w
        sec, w0, w1 = grid.quad_sec, grid.quad_sw0, grid.quad_sw1
        for q in range(grid.quad_s.size):
            i = sec[q]
            blk = wq[q] * Wq[q]
            K[6 * i:6 * i + 6, 6 * i:6 * i + 6] += w0[q] * w0[q] * blk
            K[6 * i:6 * i + 6, 6 * i + 6:6 * i + 12] += w0[q] * w1[q] * blk
            K[6 * i + 6:6 * i + 12, 6 * i:6 * i + 6] += w1[q] * w0[q] * blk
            K[6 * i + 6:6 * i + 12, 6 * i + 6:6 * i + 12] += w1[q] * w1[q] * blk
        return 0.5 * (K + K.T)

    def line_density(self, s):
        """Mass per unit length at arc points s, summed over the parts."""
        s = np.asarray(s, dtype=float)
        total = np.zeros(s.shape)
        for geom, mat in self.parts:
            total += mat.density * np.pi * np.asarray(geom.radius(s), float) ** 2
        return total

    def mass_matrix(self, cache):
        grid = self.model.grid
        L = self.model.geometry.length
        Jq = cache.J[grid.quad_idx]
        A = (L * grid.quad_w)[:, None, None] * (self.Mdens @ Jq)
        M = np.tensordot(Jq, A, axes=([0, 1], [0, 1]))
        return 0.5 * (M + M.T)

    def coriolis_matrix(self, cache):
        if cache.Jdot is None:
            raise ConfigError("cache was built without rates; Coriolis needs Jdot")
        grid = self.model.grid
        L = self.model.geometry.length
        qi = grid.quad_idx
        Jq = cache.J[qi]
        MJ = self.Mdens @ Jq
        ad_T = np.transpose(ad6(cache.eta[qi]), (0, 2, 1))
        B = self.Mdens @ cache.Jdot[qi] - ad_T @ MJ
        B *= (L * grid.quad_w)[:, None, None]
        return np.tensordot(Jq, B, axes=([0, 1], [0, 1]))

    def load_vector(self, cache, gravity=GRAVITY, lam_e=None,
                    end_wrenches=None):
        """P = L*int J^T (Lam_e + Mdens Ad_g^-1 Grav) ds + end terms.

        end_wrenches = (Lam_0, Lam_1): dead wrenches applied at the two
        ends (body frames), entering through the point values of J.
        """
        grid = self.model.grid
        L = self.model.geometry.length
        qi = grid.quad_idx
        Jq = cache.J[qi]
        grav_twist = np.concatenate([np.zeros(3), np.asarray(gravity, float)])
        Ad_inv = adjoint_inv_rp(cache.R[qi], cache.p[qi])
        dens = self.Mdens @ (Ad_inv @ grav_twist)[..., None]
        dens = dens[..., 0]
        if lam_e is not None:
            dens = dens + np.asarray(lam_e, dtype=float)
        P = np.einsum("qia,qi,q->a", Jq, dens, L * grid.quad_w)
        if end_wrenches is not None:
            lam0, lam1 = end_wrenches
            if lam0 is not None:
                P = P + cache.J[0].T @ np.asarray(lam0, float)
            if lam1 is not None:
                P = P + cache.J[-1].T @ np.asarray(lam1, float)
        return P

    def gravity_potential(self, cache, gravity=GRAVITY):
        grid = self.model.grid
        L = self.model.geometry.length
        line_mass = self.Mdens[:, 3, 3]
        height = cache.p[grid.quad_idx] @ np.asarray(gravity, float)
        return -L * np.sum(grid.quad_w * line_mass * height)

    def elastic_energy(self, q):
        theta = np.asarray(q, float)[6:]
        return 0.5 * theta @ self.K_theta @ theta

    def kinetic_energy(self, cache):
        M = self.mass_matrix(cache)
        return 0.5 * cache.qdot @ M @ cache.qdot

    def basis_force_maps(self, cache):
        """B_J[i] = L * int Psi_i J ds for every contact node: (m+1, 6, dof)."""
        grid = self.model.grid
        L = self.model.geometry.length
        Jq = cache.J[grid.quad_idx]
        m = grid.m
        BJ = np.zeros((m + 1, 6, self.model.dof))
        w = L * grid.quad_w
        for q in range(grid.quad_s.size):
            i = grid.quad_csec[q]
            BJ[i] += (w[q] * grid.quad_cw0[q]) * Jq[q]
            BJ[i + 1] += (w[q] * grid.quad_cw1[q]) * Jq[q]
        return BJ


@dataclass
class ContactBlock:
    """Everything the solver needs from one rod's contact pairing.

    Per node i (slack u_i = [u_n, u_t1, u_t2]):
      g[i]       = [gap delta_n, tangential velocity v_t]
      forces[i]  = smoothed [Lambda_n, Lambda_t]
      H[:, 3i:3i+3] maps forces[i] into generalized forces of this rod
      D[i]       = d g_i / d qdot rows (frozen contact frames), the delta_n
                   row still lacking the step-size factor h
    Slave couplings (rod-rod pairs) carry the same pieces against the
    other rod's coordinates, plus the lumped reaction map.
    """

    pairs: list
    g: np.ndarray           # (N, 3)
    forces: np.ndarray      # (N, 3)
    values: np.ndarray      # (N, 3): [gap(u), slip(u)] law branches
    dforce_du: np.ndarray   # (N, 3, 3)
    dvalue_du: np.ndarray   # (N, 3, 3)
    H: np.ndarray           # (dof, 3N)
    D: np.ndarray           # (N, 3, dof)
    weight: np.ndarray      # (3N, 3N): L * (M_psi kron I3)
    slave: dict             # node -> (rod_index, D_slave (3, dof_j), H_slave (dof_j, 3))


def assemble_contact(rd, cache, pairs, u, mu, sm, corner_slope=1.0,
                     slave_caches=None):
    """Contact rows and force maps for one rod against frozen pairs."""
    grid = rd.model.grid
    m = grid.m
    if len(pairs) != m + 1:
        raise ConfigError(
            f"expected one contact pair per node ({m + 1}), got {len(pairs)}"
        )
    u = np.asarray(u, dtype=float).reshape(m + 1, 3)
    N = m + 1
    BJ = rd.basis_force_maps(cache)

    g = np.zeros((N, 3))
    forces = np.zeros((N, 3))
    values = np.zeros((N, 3))
    dforce = np.zeros((N, 3, 3))
    dvalue = np.zeros((N, 3, 3))
    H = np.zeros((rd.model.dof, 3 * N))
    D = np.zeros((N, 3, rd.model.dof))
    slave = {}

    for i, pair in enumerate(pairs):
        if pair.node != i:
            raise ConfigError("contact pairs must cover nodes 0..m in order")
        idx = pair.eval_idx
        body = cache.pose(idx)
        Ad_cb = ad_contact_body(pair, body)

        g[i, 0] = normal_gap(pair)
        if pair.slave_rod is None:
            g[i, 1:] = slip_velocity(pair, cache.eta[idx], body)
        else:
            j, s_star = pair.slave_rod
            sl_pose, sl_eta, sl_J = interpolated_frame(slave_caches[j], s_star)
            Ad_cd = ad_contact_body(pair, sl_pose)
            g[i, 1:] = (Ad_cb @ cache.eta[idx] - Ad_cd @ sl_eta)[4:6]

        law = contact_node_law(u[i], mu, sm, corner_slope=corner_slope)
        forces[i] = law.force
        values[i] = np.concatenate([[law.gap], law.slip])
        dforce[i] = law.dforce_du
        dvalue[i, 0] = law.dgap_du
        dvalue[i, 1:] = law.dslip_du

        H[:, 3 * i:3 * i + 3] = BJ[i].T @ Ad_cb.T[:, 3:6]
        D[i] = (Ad_cb @ cache.J[idx])[3:6]

        if pair.slave_rod is not None:
            # lumped reaction on the other rod at the recorded arc point
            D_sl = -(Ad_cd @ sl_J)[3:6]
            H_sl = -rd.node_weights[i] * (sl_J.T @ Ad_cd.T[:, 3:6])
            slave[i] = (j, D_sl, H_sl)

    weight = np.kron(rd.model.geometry.length * rd.M_psi, np.eye(3))
    return ContactBlock(
        pairs=pairs, g=g, forces=forces, values=values,
        dforce_du=dforce, dvalue_du=dvalue, H=H, D=D, weight=weight,
        slave=slave,
    )


@dataclass
class FixedBlock:
    residual: np.ndarray    # (6,)
    H: np.ndarray           # (dof, 6): generalized force map
    rows: np.ndarray        # (6, dof): d residual / dq
    at_start: bool
    at_end: bool


@dataclass
class BallBlock:
    residual: np.ndarray    # (3,)
    H: np.ndarray           # (dof, 3)
    rows: np.ndarray        # (3, dof)
    at_start: bool
    at_end: bool


def assemble_fixed(rd, cache, con):
    """Pose constraint: residual log(g_f^-1 g(s)), force map J(s)^T."""
    idx = rd.model.grid.index_of(con.s)
    R_i, p_i = cache.R[idx], cache.p[idx]
    tgt = con.target
    R_rel = tgt.R.T @ R_i
    p_rel = tgt.R.T @ (p_i - tgt.p)
    tau = log_se3_rp(R_rel, p_rel)
    J_i = cache.J[idx]
    # right-perturbation chain: d log(A exp(d)) = J_r(tau)^-1 d
    rows = np.linalg.solve(se3_right_jacobian(tau[None])[0], J_i)
    return FixedBlock(residual=tau, H=J_i.T, rows=rows,
                      at_start=con.s == 0.0, at_end=con.s == 1.0)


def assemble_ball(rd, cache, con):
    """Point constraint p_a - p(s); the wrench is a global force at p."""
    idx = rd.model.grid.index_of(con.s)
    R_i, p_i = cache.R[idx], cache.p[idx]
    J_lin = cache.J[idx][3:6]
    RJ = R_i @ J_lin
    return BallBlock(residual=con.target - p_i, H=RJ.T, rows=-RJ,
                     at_start=con.s == 0.0, at_end=con.s == 1.0)


def boundary_rows(rd, q, end_wrenches=None):
    """Strong end conditions replacing the end strain nodes' weak rows.

    K(0)(xi(0) - xi_rest) = -Lam_0 and K(1)(xi(1) - xi_rest) = Lam_1,
    expressed on the stored strain deviation via the length bridge.
    Multiplier wrenches acting at the ends must be added by the caller.
    """
    n = rd.model.n
    theta = np.asarray(q, float)[6:].reshape(n + 1, 6)
    lam0 = lam1 = np.zeros(6)
    if end_wrenches is not None:
        lam0 = np.zeros(6) if end_wrenches[0] is None else np.asarray(
            end_wrenches[0], float)
        lam1 = np.zeros(6) if end_wrenches[1] is None else np.asarray(
            end_wrenches[1], float)
    r0 = rd.K_end[0] @ theta[0] + lam0
    r1 = rd.K_end[1] @ theta[n] - lam1
    return r0, r1
