"""Implicit time stepping of rods with contact and bilateral constraints.

One backward-Euler step eliminates q_k = q_{k-1} + h qdot_k and solves for
z = [qdot per rod, contact slacks u per rod, constraint multipliers] the
stacked system

  M (qdot_k - qdot_{k-1}) + h (C qdot_k + K q_k + nu K qdot_k
      - P - H_c f(u) - H_f lam_f - H_a lam_a) = 0   (weak rows)
  strong end rows replacing the two end strain nodes' weak rows
  W_psi (g(q_k, qdot_k) - values(u)) = 0            (contact rows)
  constraint residuals                              (multiplier rows)

Contact pair assignments (which obstacle a node presses against) freeze at
the predicted configuration for the whole step; the pair geometry itself is
re-evaluated every Newton iteration.

Jacobian modes: "analytic" freezes the contact/constraint geometry and is
exact in the slack and multiplier columns, "hybrid" replaces the rate
columns with finite differences, "fd" differences everything (reference).
"""

from dataclasses import dataclass

import numpy as np

from .assembly import (
    GRAVITY,
    BallConstraint,
    FixedConstraint,
    RodDynamics,
    assemble_ball,
    assemble_contact,
    assemble_fixed,
    boundary_rows,
)
from .contact import (
    RodSurrogate,
    ad_contact_body,
    generate_contact_nodes,
    normal_gap,
    refresh_contact_nodes,
)
from .errors import ConfigError, SolverError
from .liegroup import Pose, exp_so3, log_so3, so3_left_jacobian
from .rod import GeneralizedState
from .smoothing import make_step

# reporting threshold between sticking and sliding nodes (m/s)
STICK_SPEED = 1e-8

# chart re-centering trigger on the base rotation vector
RECENTER_ANGLE = np.pi + 0.1


@dataclass
class NewtonConfig:
    tol: float = 1e-9
    max_iter: int = 40
    jacobian: str = "analytic"   # analytic | hybrid | fd
    fd_eps: float = 1e-7
    backtrack: float = 0.5
    max_backtracks: int = 10
    min_decrease: float = 1e-4
    max_bisections: int = 4      # halvings of h when a step fails to converge

    def __post_init__(self):
        if self.jacobian not in ("analytic", "hybrid", "fd"):
            raise ConfigError(f"unknown jacobian mode {self.jacobian!r}")


def _constant(value):
    return lambda t: value


class System:
    """A scene: rods, obstacles, attachments, and the shared contact law."""

    def __init__(self, smoothing=None, mu=0.0, gravity=GRAVITY,
                 corner_slope=1.0, rod_contact=True):
        self.smoothing = make_step("sigmoid") if smoothing is None else smoothing
        self.mu = float(mu)
        self.gravity = np.asarray(gravity, dtype=float).reshape(3)
        self.corner_slope = float(corner_slope)
        self.rod_contact = bool(rod_contact)
        self.models = []
        self.dynamics = []
        self.fixed = []      # per rod: [(s, t -> Pose, until or None)]
        self.balls = []      # per rod: [(s, t -> point, until or None)]
        self.end_loads = []  # per rod: t -> (lam0, lam1) or None
        self.obstacles = []

    def add_rod(self, model, parts=None):
        self.models.append(model)
        self.dynamics.append(RodDynamics(model, parts))
        self.fixed.append([])
        self.balls.append([])
        self.end_loads.append(None)
        return len(self.models) - 1

    def add_obstacle(self, obstacle):
        self.obstacles.append(obstacle)

    def fix(self, rod, s, target, until=None):
        """Clamp the section at s to a pose; target may be a schedule t -> Pose.

        An until time releases the clamp: steps ending after it carry no
        multiplier rows for this constraint.
        """
        self.models[rod].grid.index_of(s)
        motion = target if callable(target) else _constant(target)
        self.fixed[rod].append((float(s), motion,
                                None if until is None else float(until)))

    def pin(self, rod, s, point, until=None):
        """Ball joint at s; point may be a schedule t -> (3,)."""
        self.models[rod].grid.index_of(s)
        if callable(point):
            motion = point
        else:
            motion = _constant(np.asarray(point, dtype=float).reshape(3))
        self.balls[rod].append((float(s), motion,
                                None if until is None else float(until)))

    def load_ends(self, rod, wrenches):
        """Dead end wrenches (lam0, lam1) in the end body frames; may be t -> (2,6)."""
        self.end_loads[rod] = wrenches if callable(wrenches) else _constant(wrenches)

    def end_wrenches_at(self, rod, t):
        load = self.end_loads[rod]
        if load is None:
            return np.zeros(6), np.zeros(6)
        lam0, lam1 = load(t)
        lam0 = np.zeros(6) if lam0 is None else np.asarray(lam0, float)
        lam1 = np.zeros(6) if lam1 is None else np.asarray(lam1, float)
        return lam0, lam1

    def rod_contact_active(self, i):
        if self.obstacles:
            return True
        return self.rod_contact and i < len(self.models) - 1

    def contact_active(self):
        return any(self.rod_contact_active(i) for i in range(len(self.models)))

    def candidate_obstacles(self, i, caches):
        """Stable candidate list for rod i; surrogates pair i against j > i."""
        cands = list(self.obstacles)
        if self.rod_contact:
            for j in range(i + 1, len(self.models)):
                cands.append(RodSurrogate(j, caches[j], self.models[j].geometry))
        return cands

    def energy(self, states, gravity=None):
        """Kinetic + elastic + gravity potential over all rods."""
        g = self.gravity if gravity is None else np.asarray(gravity, float)
        total = 0.0
        for model, dyn, st in zip(self.models, self.dynamics, states):
            cache = model.kinematics(st.q, st.qdot, with_rates=False)
            total += dyn.kinetic_energy(cache)
            total += dyn.elastic_energy(st.q)
            total += dyn.gravity_potential(cache, gravity=g)
        return total


class _Layout:
    """Slices of the stacked unknown vector (square with the residual rows).

    Built per solve time t: released constraints (until < t) get no rows.
    fixed_idx/balls_idx keep the original constraint indices of the active
    rows so warm starts and records stay keyed to the scene's lists.
    """

    @staticmethod
    def _active(cons, t):
        return [(k, c) for k, c in enumerate(cons)
                if t is None or c[2] is None or t <= c[2] + 1e-12]

    def __init__(self, system, with_contact, t=None):
        off = 0
        self.qdot = []
        for model in system.models:
            self.qdot.append(slice(off, off + model.dof))
            off += model.dof
        self.u = []
        for i, model in enumerate(system.models):
            if with_contact and system.rod_contact_active(i):
                size = 3 * (model.grid.m + 1)
                self.u.append(slice(off, off + size))
                off += size
            else:
                self.u.append(None)
        self.fixed, self.fixed_idx, self.fixed_cons = [], [], []
        for cons in system.fixed:
            act = self._active(cons, t)
            rows = []
            for _ in act:
                rows.append(slice(off, off + 6))
                off += 6
            self.fixed.append(rows)
            self.fixed_idx.append([k for k, _ in act])
            self.fixed_cons.append([c for _, c in act])
        self.balls, self.balls_idx, self.balls_cons = [], [], []
        for cons in system.balls:
            act = self._active(cons, t)
            rows = []
            for _ in act:
                rows.append(slice(off, off + 3))
                off += 3
            self.balls.append(rows)
            self.balls_idx.append([k for k, _ in act])
            self.balls_cons.append([c for _, c in act])
        self.size = off


def _block_diag3(blocks):
    N = blocks.shape[0]
    out = np.zeros((3 * N, 3 * N))
    for i in range(N):
        out[3 * i:3 * i + 3, 3 * i:3 * i + 3] = blocks[i]
    return out


class _StepProblem:
    """Residual and Jacobian of one implicit step at a fixed previous state."""

    def __init__(self, system, prev, h, t_k, layout, assignments, fd_eps=1e-7):
        self.system = system
        self.prev = prev
        self.h = h
        self.t_k = t_k
        self.layout = layout
        self.assignments = assignments
        self.fd_eps = fd_eps

    def commit(self, z):
        """Turn a solution vector into the updated per-rod states."""
        states = []
        for prev, sl in zip(self.prev, self.layout.qdot):
            qd = z[sl]
            states.append(recenter_chart(GeneralizedState(prev.q + self.h * qd, qd)))
        return states

    def evaluate(self, z, jac_mode=None):
        sys = self.system
        lay = self.layout
        h = self.h
        R = len(sys.models)

        qdots = [z[sl] for sl in lay.qdot]
        caches = [
            model.kinematics(prev.q + h * qd, qd)
            for model, prev, qd in zip(sys.models, self.prev, qdots)
        ]

        blocks = []
        for i in range(R):
            if lay.u[i] is None:
                blocks.append(None)
                continue
            cands = sys.candidate_obstacles(i, caches)
            pairs = refresh_contact_nodes(
                caches[i], sys.models[i].geometry, cands, self.assignments[i])
            blocks.append(assemble_contact(
                sys.dynamics[i], caches[i], pairs, z[lay.u[i]], sys.mu,
                sys.smoothing, corner_slope=sys.corner_slope,
                slave_caches=caches))

        fixed_blocks = [
            [assemble_fixed(sys.dynamics[i], caches[i],
                            FixedConstraint(s, motion(self.t_k)))
             for s, motion, _ in lay.fixed_cons[i]]
            for i in range(R)
        ]
        ball_blocks = [
            [assemble_ball(sys.dynamics[i], caches[i],
                           BallConstraint(s, motion(self.t_k)))
             for s, motion, _ in lay.balls_cons[i]]
            for i in range(R)
        ]

        r = np.zeros(lay.size)
        for i in range(R):
            dyn, cache, prev = sys.dynamics[i], caches[i], self.prev[i]
            q_k = cache.q
            M = dyn.mass_matrix(cache)
            C = dyn.coriolis_matrix(cache)
            lam0, lam1 = sys.end_wrenches_at(i, self.t_k)
            P = dyn.load_vector(cache, gravity=sys.gravity,
                                end_wrenches=(lam0, lam1))
            r_dyn = M @ (qdots[i] - prev.qdot) + h * (
                C @ qdots[i] + dyn.K @ q_k
                + dyn.viscous_ratio * (dyn.K @ qdots[i]) - P)
            if blocks[i] is not None:
                r_dyn -= h * (blocks[i].H @ blocks[i].forces.ravel())
            for blk, sl in zip(fixed_blocks[i], lay.fixed[i]):
                r_dyn -= h * (blk.H @ z[sl])
            for blk, sl in zip(ball_blocks[i], lay.balls[i]):
                r_dyn -= h * (blk.H @ z[sl])
            # reactions of this rod's pairs on their slave rods
            for cb in blocks:
                if cb is None:
                    continue
                for node, (j, _, H_sl) in cb.slave.items():
                    if j == i:
                        r_dyn -= h * (H_sl @ cb.forces[node])
            # strong end rows; end-attached multipliers enter the end wrench
            lam0_t, lam1_t = lam0.copy(), lam1.copy()
            for blk, sl in zip(fixed_blocks[i], lay.fixed[i]):
                if blk.at_start:
                    lam0_t += z[sl]
                if blk.at_end:
                    lam1_t += z[sl]
            for blk, sl in zip(ball_blocks[i], lay.balls[i]):
                wrench = np.zeros(6)
                if blk.at_start:
                    wrench[3:] = cache.R[0].T @ z[sl]
                    lam0_t += wrench
                if blk.at_end:
                    wrench[3:] = cache.R[-1].T @ z[sl]
                    lam1_t += wrench
            r0, r1 = boundary_rows(dyn, q_k, end_wrenches=(lam0_t, lam1_t))
            r_dyn[6:12] = r0
            r_dyn[-6:] = r1
            r[lay.qdot[i]] = r_dyn

            if blocks[i] is not None:
                cb = blocks[i]
                r[lay.u[i]] = cb.weight @ (cb.g - cb.values).ravel()
            for blk, sl in zip(fixed_blocks[i], lay.fixed[i]):
                r[sl] = blk.residual
            for blk, sl in zip(ball_blocks[i], lay.balls[i]):
                r[sl] = blk.residual

        info = {
            "caches": caches, "contact": blocks,
            "fixed": fixed_blocks, "balls": ball_blocks,
        }
        if jac_mode is None:
            return r, None, info
        if jac_mode == "fd":
            return r, self._fd_jacobian(z, r), info

        J = self._analytic_jacobian(z, caches, blocks, fixed_blocks, ball_blocks)
        if jac_mode == "hybrid":
            cols = [k for sl in self.layout.qdot for k in range(sl.start, sl.stop)]
            J[:, cols] = self._fd_jacobian(z, r, cols)[:, cols]
        return r, J, info

    def _analytic_jacobian(self, z, caches, blocks, fixed_blocks, ball_blocks):
        sys = self.system
        lay = self.layout
        h = self.h
        J = np.zeros((lay.size, lay.size))
        for i in range(len(sys.models)):
            dyn, cache = sys.dynamics[i], caches[i]
            qsl = lay.qdot[i]
            M = dyn.mass_matrix(cache)
            C = dyn.coriolis_matrix(cache)
            J[qsl, qsl] = (M + h * C + h * dyn.viscous_ratio * dyn.K
                           + h * h * dyn.K)
            if blocks[i] is not None:
                cb = blocks[i]
                usl = lay.u[i]
                J[qsl, usl] = -h * (cb.H @ _block_diag3(cb.dforce_du))
                N = len(cb.pairs)
                Dmat = np.zeros((3 * N, qsl.stop - qsl.start))
                for k in range(N):
                    Dmat[3 * k] = h * cb.D[k, 0]
                    Dmat[3 * k + 1:3 * k + 3] = cb.D[k, 1:3]
                for node, (j, D_sl, H_sl) in cb.slave.items():
                    J[lay.qdot[j], usl.start + 3 * node:usl.start + 3 * node + 3] \
                        -= h * (H_sl @ cb.dforce_du[node])
                    Ds = np.zeros((3 * N, D_sl.shape[1]))
                    Ds[3 * node] = h * D_sl[0]
                    Ds[3 * node + 1:3 * node + 3] = D_sl[1:3]
                    J[usl, lay.qdot[j]] += cb.weight @ Ds
                J[usl, qsl] += cb.weight @ Dmat
                J[usl, usl] += -cb.weight @ _block_diag3(cb.dvalue_du)
            for blk, sl in zip(fixed_blocks[i], lay.fixed[i]):
                J[qsl, sl] = -h * blk.H
                J[sl, qsl] = h * blk.rows
            for blk, sl in zip(ball_blocks[i], lay.balls[i]):
                J[qsl, sl] = -h * blk.H
                J[sl, qsl] = h * blk.rows
            # strong end rows overwrite the two end strain nodes' weak rows
            rows0 = slice(qsl.start + 6, qsl.start + 12)
            rows1 = slice(qsl.stop - 6, qsl.stop)
            J[rows0, :] = 0.0
            J[rows1, :] = 0.0
            J[rows0, rows0] = h * dyn.K_end[0]
            J[rows1, rows1] = h * dyn.K_end[1]
            for blk, sl in zip(fixed_blocks[i], lay.fixed[i]):
                if blk.at_start:
                    J[rows0, sl] = np.eye(6)
                if blk.at_end:
                    J[rows1, sl] = -np.eye(6)
            for blk, sl in zip(ball_blocks[i], lay.balls[i]):
                if blk.at_start:
                    J[slice(qsl.start + 9, qsl.start + 12), sl] = cache.R[0].T
                if blk.at_end:
                    J[slice(qsl.stop - 3, qsl.stop), sl] = -cache.R[-1].T
        return J

    def _fd_jacobian(self, z, r0, cols=None):
        size = z.size
        J = np.zeros((r0.size, size))
        for k in (range(size) if cols is None else cols):
            eps = self.fd_eps * (1.0 + abs(z[k]))
            zp = z.copy()
            zp[k] += eps
            rp = self.evaluate(zp, None)[0]
            zm = z.copy()
            zm[k] -= eps
            rm = self.evaluate(zm, None)[0]
            J[:, k] = (rp - rm) / (2.0 * eps)
        return J


def _scaled_norm(r, scale):
    return float(np.max(np.abs(r) / scale))


def _newton(evaluate, z0, cfg, context="", rescue=None):
    z = z0.copy()
    r, J, info = evaluate(z, cfg.jacobian)
    if not np.all(np.isfinite(r)):
        raise SolverError(f"residual not finite at the initial iterate {context}")
    scale = np.maximum(np.abs(J).max(axis=1), 1e-12)

    def merit(rv):
        # smooth line-search objective; convergence is tested in the
        # scaled max norm, which would veto steps that trade a hair of
        # the worst row for large gains elsewhere
        return float(np.linalg.norm(rv / scale))

    norm = _scaled_norm(r, scale)
    m = merit(r)
    best = (norm, z.copy())
    for it in range(cfg.max_iter):
        if norm < cfg.tol:
            return z, info, it, norm
        # equilibrate with the current row magnitudes for the solve; the
        # merit keeps the entry scale so line-search decisions stay
        # comparable across iterations
        row = np.maximum(np.abs(J).max(axis=1), 1e-12)
        Js = J / row[:, None]
        try:
            delta = np.linalg.solve(Js, -(r / row))
        except np.linalg.LinAlgError:
            cond = float(np.linalg.cond(Js))
            raise SolverError(
                f"singular step linearization {context} "
                f"(condition estimate {cond:.2e})",
                best=best[1], residual_norm=best[0], iterations=it) from None
        if not np.all(np.isfinite(delta)):
            raise SolverError(
                f"Newton direction not finite {context}",
                best=best[1], residual_norm=best[0], iterations=it)
        alpha = 1.0
        cand = None
        improved = False
        for _ in range(cfg.max_backtracks + 1):
            r_try = evaluate(z + alpha * delta, None)[0]
            if np.all(np.isfinite(r_try)):
                m_try = merit(r_try)
                if cand is None or m_try < cand[0]:
                    cand = (m_try, alpha * delta)
                if m_try <= (1.0 - cfg.min_decrease * alpha) * m:
                    improved = True
                    break
            alpha *= cfg.backtrack
        if not improved:
            # the plain direction can stall where a smoothed contact law
            # loses slope (the sigmoid knee); blend toward steepest
            # descent with Levenberg damping until something descends
            rs = r / row
            grad = Js.T @ rs
            diag = np.maximum(np.einsum("ij,ij->j", Js, Js), 1e-12)
            lam = 1e-4
            for _ in range(9):
                try:
                    delta2 = np.linalg.solve(Js.T @ Js + lam * np.diag(diag),
                                             -grad)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                if np.all(np.isfinite(delta2)):
                    r_try = evaluate(z + delta2, None)[0]
                    if np.all(np.isfinite(r_try)):
                        m_try = merit(r_try)
                        if cand is None or m_try < cand[0]:
                            cand = (m_try, delta2)
                        if m_try <= (1.0 - cfg.min_decrease) * m:
                            improved = True
                            break
                lam *= 10.0
        if not improved and rescue is not None:
            # last resort: let the caller re-seat slack variables stuck on
            # the wrong side of a non-monotone branch
            for zp in rescue(z, info):
                r_try = evaluate(zp, None)[0]
                if np.all(np.isfinite(r_try)):
                    m_try = merit(r_try)
                    if cand is None or m_try < cand[0]:
                        cand = (m_try, zp - z)
        if cand is None:
            raise SolverError(
                f"residual not finite along the Newton direction {context}",
                best=best[1], residual_norm=best[0], iterations=it)
        z = z + cand[1]
        r, J, info = evaluate(z, cfg.jacobian)
        norm = _scaled_norm(r, scale)
        m = merit(r)
        if norm < best[0]:
            best = (norm, z.copy())
    if norm < cfg.tol:
        return z, info, cfg.max_iter, norm
    raise SolverError(
        f"no convergence after {cfg.max_iter} iterations {context} "
        f"(scaled residual {best[0]:.3e})",
        best=best[1], residual_norm=best[0], iterations=cfg.max_iter)


def recenter_chart(state):
    """Principal-branch base rotation vector; the pose field is unchanged."""
    phi = state.q[:3]
    angle = np.linalg.norm(phi)
    if angle <= RECENTER_ANGLE:
        return state
    phi_new = log_so3(exp_so3(phi))
    q = state.q.copy()
    qd = state.qdot.copy()
    q[:3] = phi_new
    # spatial angular velocity Jl(phi) phi_dot is chart-independent
    qd[:3] = np.linalg.solve(so3_left_jacobian(phi_new),
                             so3_left_jacobian(phi) @ state.qdot[:3])
    return GeneralizedState(q, qd)


@dataclass
class ContactReport:
    s: np.ndarray            # (N,) node arc coordinates
    gap: np.ndarray          # (N,) normal separation
    force: np.ndarray        # (N, 3) contact-frame nodal force intensities
    slip_speed: np.ndarray   # (N,)
    mode: list               # "stick" | "slide" per node


@dataclass
class StepRecord:
    t: float
    states: list
    contact: list            # per rod: ContactReport or None
    boundary: list           # per rod: (2, 6) internal end wrenches
    iterations: int
    residual_norm: float
    multipliers: list = None  # per rod: {"fixed": [(6,)...], "ball": [(3,)...]}


def _contact_report(cb):
    s = np.array([pair.s for pair in cb.pairs])
    slip = np.linalg.norm(cb.g[:, 1:], axis=1)
    mode = ["stick" if v < STICK_SPEED else "slide" for v in slip]
    return ContactReport(s=s, gap=cb.g[:, 0].copy(), force=cb.forces.copy(),
                         slip_speed=slip, mode=mode)


def _boundary_wrenches(system, states):
    out = []
    for dyn, st in zip(system.dynamics, states):
        theta = st.theta
        out.append(np.stack([dyn.K_end[0] @ theta[0], dyn.K_end[1] @ theta[-1]]))
    return out


def _record_multipliers(system, lay, z):
    """Per rod, one multiplier per scene constraint; released ones are zero."""
    out = []
    for i in range(len(system.models)):
        fixed = [np.zeros(6) for _ in system.fixed[i]]
        for sl, k in zip(lay.fixed[i], lay.fixed_idx[i]):
            fixed[k] = z[sl].copy()
        ball = [np.zeros(3) for _ in system.balls[i]]
        for sl, k in zip(lay.balls[i], lay.balls_idx[i]):
            ball[k] = z[sl].copy()
        out.append({"fixed": fixed, "ball": ball})
    return out


def step(system, states, t, h, config=None, warm=None, step_index=0, _depth=0):
    """Advance the scene from t to t + h; returns (states, record, warm).

    A step whose Newton solve fails is retried as two half steps (up to
    max_bisections deep): impact events can land too many contact nodes
    at once for a single solve, and halving resolves them sequentially.
    The returned record still spans the full step; iterations reports the
    worst sub-solve.
    """
    cfg = NewtonConfig() if config is None else config
    lay = _Layout(system, system.contact_active(), t=t + h)
    z0 = np.zeros(lay.size)
    for st, sl in zip(states, lay.qdot):
        z0[sl] = st.qdot

    warm = warm or {}
    assignments = [None] * len(system.models)
    floors = {}
    if any(sl is not None for sl in lay.u):
        pred = [
            model.kinematics(st.q + h * st.qdot, st.qdot)
            for model, st in zip(system.models, states)
        ]
        for i, usl in enumerate(lay.u):
            if usl is None:
                continue
            cands = system.candidate_obstacles(i, pred)
            pairs = generate_contact_nodes(pred[i], system.models[i].geometry,
                                           cands)
            assignments[i] = [cands.index(p.obstacle) for p in pairs]
            u0 = np.zeros((len(pairs), 3))
            gaps = np.array([normal_gap(p) for p in pairs])
            u0[:, 0] = -gaps
            prev_u = warm.get("u", {}).get(i)
            prev_asn = warm.get("assignment", {}).get(i)
            if prev_u is not None:
                keep = [k for k in range(len(pairs))
                        if prev_asn is not None and prev_asn[k] == assignments[i][k]]
                u0[keep] = prev_u.reshape(-1, 3)[keep]
            # branch guard. The smoothed complementarity admits spurious
            # low-force roots across its knee, so the slack must start on
            # the branch the step will actually end on. The predictor gap
            # alone misclassifies grazing apexes (gravity reverses the
            # velocity within the step), so correct it to second order
            # with the normal gravity acceleration before deciding:
            # nodes ending separated restart at u = -gap (exact free
            # root for every kind), nodes ending in contact get floored
            # at the momentum-arrest scale rho*A*closing/h.
            closing = np.array([
                -(ad_contact_body(p, pred[i].pose(p.eval_idx))
                  @ pred[i].eta[p.eval_idx])[3]
                for p in pairs
            ])
            n_dot_g = np.array([p.master.R[:, 0] @ system.gravity
                                for p in pairs])
            gap2 = gaps + h * h * n_dot_g
            closing2 = np.maximum(0.0, closing - h * n_dot_g)
            rho_a = system.dynamics[i].line_density(
                np.array([p.s for p in pairs]))
            sep = gap2 > 0.0
            u0[sep, 0] = -gap2[sep]
            u0[~sep, 0] = np.maximum(u0[~sep, 0],
                                     (rho_a * closing2 / h)[~sep])
            z0[usl] = u0.ravel()
            floors[i] = rho_a * closing2 / h
    for i, rows in enumerate(lay.fixed):
        for sl, k in zip(rows, lay.fixed_idx[i]):
            lam = warm.get("fixed", {}).get((i, k))
            if lam is not None:
                z0[sl] = lam
    for i, rows in enumerate(lay.balls):
        for sl, k in zip(rows, lay.balls_idx[i]):
            lam = warm.get("ball", {}).get((i, k))
            if lam is not None:
                z0[sl] = lam

    problem = _StepProblem(system, states, h, t + h, lay, assignments,
                           fd_eps=cfg.fd_eps)

    rescue = None
    if floors and getattr(system.smoothing, "kind", "") == "sigmoid":
        # the sigmoid slack branch -D(-u) u is non-monotone on u > 0 (it
        # dips to -0.278/c at c u ~ 1.28 and creeps back to zero), so a
        # node loading up or unloading can trap Newton in the dip where
        # the branch slope vanishes. When the iteration stalls, re-seat
        # such entries on the branch consistent with the current gap:
        # penetrating nodes past the dip at the momentum-arrest scale,
        # separated nodes on the exact free root u = -gap.
        c = system.smoothing.sharpness

        def rescue(z, info):
            zp = z.copy()
            moved = False
            for i, usl in enumerate(lay.u):
                if usl is None or info["contact"][i] is None:
                    continue
                g = info["contact"][i].g[:, 0]
                u = zp[usl].reshape(-1, 3).copy()
                x = c * u[:, 0]
                pen = (g <= 0.0) & (x < 8.0)
                opn = (g > 0.0) & (x > 0.0) & (x < 8.0)
                if pen.any():
                    u[pen, 0] = np.maximum(8.0 / c, floors[i][pen])
                if opn.any():
                    u[opn, 0] = -g[opn]
                if pen.any() or opn.any():
                    moved = True
                    zp[usl] = u.ravel()
            return [zp] if moved else []

    try:
        z, info, iters, norm = _newton(problem.evaluate, z0, cfg,
                                       context=f"at step {step_index}",
                                       rescue=rescue)
    except SolverError as err:
        if _depth >= cfg.max_bisections:
            if err.best is not None:
                err.best = problem.commit(err.best)
            err.step_index = step_index
            raise
        half = 0.5 * h
        states1, rec1, warm1 = step(system, states, t, half, config=cfg,
                                    warm=warm, step_index=step_index,
                                    _depth=_depth + 1)
        states2, rec2, warm2 = step(system, states1, t + half, half,
                                    config=cfg, warm=warm1,
                                    step_index=step_index, _depth=_depth + 1)
        rec2.iterations = max(rec1.iterations, rec2.iterations)
        return states2, rec2, warm2

    new_states = problem.commit(z)
    contact = [
        _contact_report(cb) if cb is not None else None
        for cb in info["contact"]
    ]
    record = StepRecord(
        t=t + h, states=new_states, contact=contact,
        boundary=_boundary_wrenches(system, new_states),
        iterations=iters, residual_norm=norm,
        multipliers=_record_multipliers(system, lay, z),
    )
    warm_out = {
        "u": {i: z[sl].copy() for i, sl in enumerate(lay.u) if sl is not None},
        "assignment": {i: a for i, a in enumerate(assignments) if a is not None},
        "fixed": {(i, k): z[sl].copy()
                  for i, rows in enumerate(lay.fixed)
                  for sl, k in zip(rows, lay.fixed_idx[i])},
        "ball": {(i, k): z[sl].copy()
                 for i, rows in enumerate(lay.balls)
                 for sl, k in zip(rows, lay.balls_idx[i])},
    }
    return new_states, record, warm_out


def _initial_record(system, states):
    contact = []
    for i, (model, st) in enumerate(zip(system.models, states)):
        if not system.rod_contact_active(i):
            contact.append(None)
            continue
        caches = [m.kinematics(s.q, s.qdot) for m, s in zip(system.models, states)]
        cands = system.candidate_obstacles(i, caches)
        pairs = generate_contact_nodes(caches[i], model.geometry, cands)
        if not pairs:
            contact.append(None)
            continue
        s = np.array([p.s for p in pairs])
        gap = np.array([normal_gap(p) for p in pairs])
        contact.append(ContactReport(
            s=s, gap=gap, force=np.zeros((s.size, 3)),
            slip_speed=np.zeros(s.size), mode=["stick"] * s.size))
    return StepRecord(
        t=0.0, states=list(states), contact=contact,
        boundary=_boundary_wrenches(system, states),
        iterations=0, residual_norm=0.0,
        multipliers=[
            {"fixed": [np.zeros(6) for _ in system.fixed[i]],
             "ball": [np.zeros(3) for _ in system.balls[i]]}
            for i in range(len(system.models))
        ],
    )


def iter_steps(system, states, duration, h, config=None, t0=0.0):
    """Yield the initial record, then one record per committed step.

    Raises SolverError with step_index set when a step fails; records
    yielded so far form the partial trajectory.
    """
    if h <= 0.0:
        raise ConfigError("step size must be positive")
    if duration < 0.0:
        raise ConfigError("duration must be non-negative")
    first = _initial_record(system, states)
    first.t = t0
    yield first
    n_steps = int(round(duration / h))
    warm = None
    for k in range(1, n_steps + 1):
        t = t0 + (k - 1) * h
        states, record, warm = step(system, states, t, h, config=config,
                                    warm=warm, step_index=k)
        yield record


def simulate(system, states, duration, h, config=None, t0=0.0):
    """Run the fixed-step loop and return all records (initial state first)."""
    return list(iter_steps(system, states, duration, h, config=config, t0=t0))


class _StaticProblem:
    """Stationarity residual: unknowns are [q per rod, multipliers]."""

    def __init__(self, system, t, layout, load_scale=1.0, fd_eps=1e-7):
        self.system = system
        self.t = t
        self.layout = layout
        self.load_scale = load_scale
        self.fd_eps = fd_eps

    def evaluate(self, z, jac_mode=None):
        sys = self.system
        lay = self.layout
        scale = self.load_scale
        r = np.zeros(lay.size)
        for i in range(len(sys.models)):
            dyn = sys.dynamics[i]
            q = z[lay.qdot[i]]
            cache = sys.models[i].kinematics(q, with_rates=False)
            lam0, lam1 = sys.end_wrenches_at(i, self.t)
            lam0, lam1 = scale * lam0, scale * lam1
            P = dyn.load_vector(cache, gravity=scale * sys.gravity,
                                end_wrenches=(lam0, lam1))
            r_dyn = dyn.K @ q - P
            fixed_blocks = [
                assemble_fixed(dyn, cache, FixedConstraint(s, motion(self.t)))
                for s, motion, _ in lay.fixed_cons[i]
            ]
            ball_blocks = [
                assemble_ball(dyn, cache, BallConstraint(s, motion(self.t)))
                for s, motion, _ in lay.balls_cons[i]
            ]
            lam0_t, lam1_t = lam0.copy(), lam1.copy()
            for blk, sl in zip(fixed_blocks, lay.fixed[i]):
                r_dyn -= blk.H @ z[sl]
                if blk.at_start:
                    lam0_t += z[sl]
                if blk.at_end:
                    lam1_t += z[sl]
            for blk, sl in zip(ball_blocks, lay.balls[i]):
                r_dyn -= blk.H @ z[sl]
                wrench = np.zeros(6)
                if blk.at_start:
                    wrench[3:] = cache.R[0].T @ z[sl]
                    lam0_t += wrench
                if blk.at_end:
                    wrench[3:] = cache.R[-1].T @ z[sl]
                    lam1_t += wrench
            r0, r1 = boundary_rows(dyn, q, end_wrenches=(lam0_t, lam1_t))
            r_dyn[6:12] = r0
            r_dyn[-6:] = r1
            r[lay.qdot[i]] = r_dyn
            for blk, sl in zip(fixed_blocks, lay.fixed[i]):
                r[sl] = blk.residual
            for blk, sl in zip(ball_blocks, lay.balls[i]):
                r[sl] = blk.residual
        if jac_mode is None:
            return r, None, None
        size = z.size
        J = np.zeros((size, size))
        for k in range(size):
            eps = self.fd_eps * (1.0 + abs(z[k]))
            zp = z.copy()
            zp[k] += eps
            zm = z.copy()
            zm[k] -= eps
            J[:, k] = (self.evaluate(zp)[0] - self.evaluate(zm)[0]) / (2 * eps)
        return r, J, None


def solve_static(system, states, t=0.0, config=None):
    """Static equilibrium under the scene's loads and attachments.

    Contact is not part of the static problem. Falls back to ramping the
    loads when the cold Newton solve fails. Returns (states, multipliers)
    with multipliers a dict {"fixed": {(rod, k): wrench}, "ball": ...}.
    """
    cfg = NewtonConfig(jacobian="fd", max_iter=60) if config is None else config
    lay = _Layout(system, with_contact=False, t=t)
    z = np.zeros(lay.size)
    for st, sl in zip(states, lay.qdot):
        z[sl] = st.q

    try:
        problem = _StaticProblem(system, t, lay, fd_eps=cfg.fd_eps)
        z, _, _, _ = _newton(problem.evaluate, z, cfg, context="in statics")
    except SolverError:
        z = np.zeros(lay.size)
        for st, sl in zip(states, lay.qdot):
            z[sl] = st.q
        for load_scale in (0.25, 0.5, 0.75, 1.0):
            problem = _StaticProblem(system, t, lay, load_scale=load_scale,
                                     fd_eps=cfg.fd_eps)
            z, _, _, _ = _newton(problem.evaluate, z, cfg,
                                 context=f"in statics at load {load_scale:g}")

    out = [GeneralizedState(z[sl]) for sl in lay.qdot]
    multipliers = {
        "fixed": {(i, k): z[sl].copy()
                  for i, rows in enumerate(lay.fixed)
                  for sl, k in zip(rows, lay.fixed_idx[i])},
        "ball": {(i, k): z[sl].copy()
                 for i, rows in enumerate(lay.balls)
                 for sl, k in zip(rows, lay.balls_idx[i])},
    }
    return out, multipliers
