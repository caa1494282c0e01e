"""Contact geometry: rod surface frames, obstacles, gaps, and node pairing.

The contact frame at a surface coordinate (s, beta) is built from the two
surface tangents: tau1 along the rod (stretch + curvature sweep + radius
taper) and tau2 around the cross-section circle. Its first axis n = tau1 x
tau2 (normalized) points from the surface into the rod body, so the
normal gap is positive when the bodies are separated and a positive normal
force pushes the rod off the obstacle.

Obstacles expose a signed distance (positive in free space) and a closest
surface point with outward normal; candidate contact pairs are generated
at every contact node against the nearest obstacle, regardless of gap
sign, and activation is left to the solver's slack variables.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateFrameError
from .liegroup import Pose, adjoint_rp

_BETA_SAMPLES = 64
_FRAME_TOL = 1e-10


@dataclass(frozen=True)
class SurfaceCoord:
    """Arc coordinate s in [0,1] and cross-section angle beta, wrapped."""

    s: float
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ConfigError(f"arc coordinate must lie in [0,1], got {self.s}")
        object.__setattr__(self, "beta", float(self.beta) % (2.0 * np.pi))


def cross_section_offset(geom, s, beta):
    """Body-frame offset from the centerline to the surface point."""
    r = geom.radius(s)
    return np.array([0.0, r * np.cos(beta), r * np.sin(beta)])


def surface_point(cache, coord, geom):
    """Global surface position p(s) + R(s) d(s, beta)."""
    i = cache.grid.index_of(coord.s)
    return cache.p[i] + cache.R[i] @ cross_section_offset(geom, coord.s, coord.beta)


def _frame_axes(xi, length, geom, s, beta):
    """Body-frame surface tangents and inward normal at (s, beta)."""
    r = geom.radius(s)
    dr_ds = geom.radial_gradient * length
    cb, sb = np.cos(beta), np.sin(beta)
    d = np.array([0.0, r * cb, r * sb])
    dd_ds = np.array([0.0, dr_ds * cb, dr_ds * sb])
    dd_db = np.array([0.0, -r * sb, r * cb])
    # arc-rate of the surface point in the body frame (per normalized s)
    tau1 = length * xi[3:] + np.cross(xi[:3], d) + dd_ds
    n = np.cross(tau1, dd_db)
    nn = np.linalg.norm(n)
    if nn < _FRAME_TOL:
        raise DegenerateFrameError(
            f"surface tangents are parallel at s={s:g}, beta={beta:g}"
        )
    n /= nn
    e1 = tau1 / np.linalg.norm(tau1)
    e2 = np.cross(n, e1)
    return d, n, e1, e2


def contact_frame(cache, coord, geom):
    """Pose of the contact frame: columns [n e1 e2] at the surface point."""
    i = cache.grid.index_of(coord.s)
    d, n, e1, e2 = _frame_axes(
        cache.xi[i], cache.length, geom, coord.s, coord.beta)
    R = cache.R[i]
    return Pose(R @ np.column_stack([n, e1, e2]), cache.p[i] + R @ d)


@dataclass
class ContactPair:
    """One contact node paired with its nearest obstacle point.

    The slave frame shares the master's orientation; only the relative
    position enters the gap. slave_rod is set when the obstacle is another
    rod's surrogate: (rod index, arc coordinate of the reaction point).
    """

    node: int
    s: float
    eval_idx: int
    beta: float
    master: Pose
    slave: Pose
    obstacle: object
    offset: np.ndarray                  # body-frame surface offset d
    slave_twist: np.ndarray = field(default_factory=lambda: np.zeros(6))
    slave_rod: tuple = None

    @property
    def relative_position(self):
        return self.master.R.T @ (self.slave.p - self.master.p)


def normal_gap(pair):
    """Separation along the inward normal; negative when penetrating."""
    return -pair.relative_position[0]


def ad_contact_body(pair, body_pose):
    """Adjoint of g_cb mapping body twists at the node into the contact frame."""
    rel = body_pose.p - pair.master.p
    R_cb = pair.master.R.T @ body_pose.R
    p_cb = pair.master.R.T @ rel
    return adjoint_rp(R_cb, p_cb)


def interpolated_frame(cache, s):
    """Pose, twist, and Jacobian at an off-grid arc point (linear blend).

    Blending nodal twists across nearby frames is first-order consistent;
    used only on the slave side of rod-rod pairs where the reaction is
    lumped anyway.
    """
    s_grid = cache.grid.eval_s
    j = int(np.clip(np.searchsorted(s_grid, s) - 1, 0, s_grid.size - 2))
    t = (s - s_grid[j]) / (s_grid[j + 1] - s_grid[j])
    eta = (1.0 - t) * cache.eta[j] + t * cache.eta[j + 1]
    J = (1.0 - t) * cache.J[j] + t * cache.J[j + 1]
    p = (1.0 - t) * cache.p[j] + t * cache.p[j + 1]
    R = cache.R[j] if t < 0.5 else cache.R[j + 1]
    return Pose(R, p), eta, J


def slip_velocity(pair, eta_master, body_pose, eta_slave=None):
    """Tangential relative velocity at the contact point (2-vector)."""
    eta_c = ad_contact_body(pair, body_pose) @ eta_master
    if eta_slave is None:
        eta_slave = pair.slave_twist
    if np.any(eta_slave):
        rel = pair.master.R.T @ (pair.slave.p - pair.master.p)
        R_cd = pair.master.R.T @ pair.slave.R
        eta_c = eta_c - adjoint_rp(R_cd, rel) @ eta_slave
    return eta_c[4:6]


class PlaneObstacle:
    """Half-space solid; the outward normal points into free space."""

    kind = "plane"

    def __init__(self, point, normal):
        self.point = np.asarray(point, dtype=float)
        n = np.asarray(normal, dtype=float)
        nn = np.linalg.norm(n)
        if nn == 0.0:
            raise ConfigError("plane normal must be nonzero")
        self.normal = n / nn

    def sdf(self, p):
        return (np.asarray(p, dtype=float) - self.point) @ self.normal

    def project(self, p):
        d = float(self.sdf(p))
        return np.asarray(p, float) - d * self.normal, self.normal.copy(), d


def _segment_closest(a, b, p):
    ab = b - a
    denom = ab @ ab
    t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return a + t * ab, t


class CapsuleObstacle:
    """Solid cylinder with hemispherical caps along a segment."""

    kind = "capsule"

    def __init__(self, end_a, end_b, radius):
        self.end_a = np.asarray(end_a, dtype=float)
        self.end_b = np.asarray(end_b, dtype=float)
        if radius <= 0.0:
            raise ConfigError("capsule radius must be positive")
        self.radius = float(radius)

    def sdf(self, p):
        p = np.asarray(p, dtype=float)
        ab = self.end_b - self.end_a
        denom = float(ab @ ab)
        rel = p - self.end_a
        t = np.clip(rel @ ab / denom, 0.0, 1.0) if denom > 0.0 else 0.0
        closest = self.end_a + np.multiply.outer(t, ab)
        return np.linalg.norm(p - closest, axis=-1) - self.radius

    def project(self, p):
        p = np.asarray(p, dtype=float)
        c, _ = _segment_closest(self.end_a, self.end_b, p)
        w = p - c
        dist = np.linalg.norm(w)
        if dist < 1e-12:
            # on the axis: any radial direction is admissible
            seed = np.array([0.0, 0.0, 1.0])
            axis = self.end_b - self.end_a
            if np.linalg.norm(np.cross(axis, seed)) < 1e-9:
                seed = np.array([0.0, 1.0, 0.0])
            w = np.cross(axis, seed)
            w /= np.linalg.norm(w)
            dist = 0.0
        else:
            w = w / dist
        return c + self.radius * w, w, dist - self.radius


class TubeObstacle:
    """Curved bore: a torus-arc wall the rod can travel inside.

    The solid is the annular wall swept along a circular arc of radius
    major_radius; the free channel inside has bore_radius. Azimuth is
    clamped to the arc span, which rounds the rim at both openings.
    """

    kind = "tube"

    def __init__(self, center, normal, start_dir, arc_angle, major_radius,
                 bore_radius, wall_thickness):
        self.center = np.asarray(center, dtype=float)
        nz = np.asarray(normal, dtype=float)
        self.axis = nz / np.linalg.norm(nz)
        sd = np.asarray(start_dir, dtype=float)
        sd = sd - (sd @ self.axis) * self.axis
        if np.linalg.norm(sd) < 1e-12:
            raise ConfigError("tube start_dir must not be parallel to normal")
        self.u = sd / np.linalg.norm(sd)
        self.v = np.cross(self.axis, self.u)
        if not 0.0 < arc_angle <= 2.0 * np.pi:
            raise ConfigError("tube arc_angle must lie in (0, 2*pi]")
        self.arc_angle = float(arc_angle)
        if major_radius <= 0.0 or bore_radius <= 0.0 or wall_thickness <= 0.0:
            raise ConfigError("tube radii and wall thickness must be positive")
        if bore_radius >= major_radius:
            raise ConfigError("tube bore must be smaller than its bend radius")
        self.major_radius = float(major_radius)
        self.bore_radius = float(bore_radius)
        self.wall_thickness = float(wall_thickness)

    def _arc_point(self, p):
        rel = np.asarray(p, dtype=float) - self.center
        x = rel @ self.u
        y = rel @ self.v
        ang = np.mod(np.arctan2(y, x), 2.0 * np.pi)
        # clamp to the nearer arc end when outside the span
        over = ang > self.arc_angle
        gap_end = ang - self.arc_angle
        gap_start = 2.0 * np.pi - ang
        ang = np.where(over & (gap_start < gap_end), 0.0,
                       np.where(over, self.arc_angle, ang))
        arc = (self.center
               + self.major_radius * (np.multiply.outer(np.cos(ang), self.u)
                                      + np.multiply.outer(np.sin(ang), self.v)))
        return arc, ang

    def sdf(self, p):
        arc, _ = self._arc_point(p)
        dist = np.linalg.norm(np.asarray(p, float) - arc, axis=-1)
        mid = self.bore_radius + 0.5 * self.wall_thickness
        return np.abs(dist - mid) - 0.5 * self.wall_thickness

    def project(self, p):
        p = np.asarray(p, dtype=float)
        arc, _ = self._arc_point(p)
        w = p - arc
        dist = float(np.linalg.norm(w))
        if dist < 1e-12:
            w = self.axis.copy()
            dist = 0.0
        else:
            w = w / dist
        mid = self.bore_radius + 0.5 * self.wall_thickness
        if dist < mid:
            # inner wall: outward (free-space) direction is back toward the arc
            return arc + self.bore_radius * w, -w, self.bore_radius - dist
        outer = self.bore_radius + self.wall_thickness
        return arc + outer * w, w, dist - outer


class RodSurrogate:
    """Per-section capsule view of another rod, for rod-rod contact.

    Sections are chords between consecutive contact-node positions with the
    local cross-section radius. project() records the arc coordinate of the
    hit so the reaction can be applied to the surrogate's rod.
    """

    kind = "rod"

    def __init__(self, rod_index, cache, geom):
        self.rod_index = rod_index
        self.cache = cache
        self.geom = geom
        idx = cache.grid.contact_node_idx
        self.node_s = cache.grid.eval_s[idx]
        self.node_p = cache.p[idx]
        mid_s = 0.5 * (self.node_s[:-1] + self.node_s[1:])
        self.seg_radius = np.asarray(geom.radius(mid_s), dtype=float)

    def _closest(self, p):
        a = self.node_p[:-1]
        ab = self.node_p[1:] - a
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0)
        t = np.clip(t, 0.0, 1.0)
        pts = a + t[:, None] * ab
        d = np.linalg.norm(p - pts, axis=1) - self.seg_radius
        k = int(np.argmin(d))
        return k, t[k], pts[k], d[k]

    def sdf(self, p):
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self._closest(p)[3]
        return np.array([self._closest(row)[3] for row in p])

    def project(self, p):
        p = np.asarray(p, dtype=float)
        k, t, axis_pt, d = self._closest(p)
        w = p - axis_pt
        dist = np.linalg.norm(w)
        w = w / dist if dist > 1e-12 else np.array([0.0, 0.0, 1.0])
        surf = axis_pt + self.seg_radius[k] * w
        s_star = self.node_s[k] + t * (self.node_s[k + 1] - self.node_s[k])
        self.last_hit = s_star
        return surf, w, d

    def slave_state(self, s_star):
        """Pose and body twist of the slave material point at s_star."""
        pose, eta, _ = interpolated_frame(self.cache, s_star)
        return pose, eta


def _beta_on_plane(R, normal):
    """Closed-form minimizing angle: surface point most opposed to the normal."""
    nb = R.T @ normal
    return float(np.arctan2(-nb[2], -nb[1]))


def _beta_sampled(obstacle, R, p, radius):
    beta = np.linspace(0.0, 2.0 * np.pi, _BETA_SAMPLES, endpoint=False)
    ring = p + (R[:, 1][None, :] * np.cos(beta)[:, None]
                + R[:, 2][None, :] * np.sin(beta)[:, None]) * radius
    vals = np.asarray(obstacle.sdf(ring), dtype=float)
    k = int(np.argmin(vals))
    # two parabolic refinements through the discrete minimum
    h = 2.0 * np.pi / _BETA_SAMPLES
    b = beta[k]
    for _ in range(2):
        pts = b + np.array([-h, 0.0, h])
        ring3 = p + (np.cos(pts)[:, None] * R[:, 1][None, :]
                     + np.sin(pts)[:, None] * R[:, 2][None, :]) * radius
        f = np.asarray(obstacle.sdf(ring3), dtype=float)
        denom = f[0] - 2.0 * f[1] + f[2]
        if denom > 0.0:
            b = b + 0.5 * h * (f[0] - f[2]) / denom
        h *= 0.25
    return float(b)


def _beta_toward_point(R, p, target):
    """Angle of the cross-section point nearest a fixed external point."""
    w = R.T @ (target - p)
    if np.hypot(w[1], w[2]) < 1e-12:
        return 0.0
    return float(np.arctan2(w[2], w[1]))


def select_beta(obstacle, R, p, radius):
    """Cross-section angle minimizing the obstacle distance at one node."""
    if obstacle.kind == "plane":
        return _beta_on_plane(R, obstacle.normal)
    if obstacle.kind == "capsule":
        # fixed point: aim at the segment point closest to the current guess
        target, _ = _segment_closest(obstacle.end_a, obstacle.end_b, p)
        beta = _beta_toward_point(R, p, target)
        for _ in range(3):
            ring_pt = p + R @ cross_section_offset_radius(radius, beta)
            target, _ = _segment_closest(obstacle.end_a, obstacle.end_b, ring_pt)
            beta = _beta_toward_point(R, p, target)
        return beta
    return _beta_sampled(obstacle, R, p, radius)


def cross_section_offset_radius(radius, beta):
    return np.array([0.0, radius * np.cos(beta), radius * np.sin(beta)])


def pair_node(cache, geom, node, obstacle):
    """Build the contact pair of one node against one obstacle."""
    grid = cache.grid
    idx = int(grid.contact_node_idx[node])
    s = float(grid.eval_s[idx])
    R, p = cache.R[idx], cache.p[idx]
    beta = select_beta(obstacle, R, p, float(geom.radius(s)))
    d, n, e1, e2 = _frame_axes(cache.xi[idx], cache.length, geom, s, beta)
    p_c = p + R @ d
    surf, _, sd = obstacle.project(p_c)
    master = Pose(R @ np.column_stack([n, e1, e2]), p_c)
    slave = Pose(master.R.copy(), surf)
    pair = ContactPair(
        node=node, s=s, eval_idx=idx, beta=beta % (2 * np.pi),
        master=master, slave=slave, obstacle=obstacle, offset=d,
    )
    if isinstance(obstacle, RodSurrogate):
        s_star = obstacle.last_hit
        slave_body, eta_b = obstacle.slave_state(s_star)
        # express the slave twist in the slave contact frame
        rel = slave.R.T @ (slave_body.p - slave.p)
        R_ds = slave.R.T @ slave_body.R
        pair.slave_twist = adjoint_rp(R_ds, rel) @ eta_b
        pair.slave_rod = (obstacle.rod_index, float(s_star))
    return pair, float(sd)


def generate_contact_nodes(cache, geom, obstacles):
    """Candidate pairs at every contact node against the nearest obstacle."""
    if not obstacles:
        return []
    pairs = []
    for node in range(cache.grid.contact_node_idx.size):
        best = None
        for obstacle in obstacles:
            pair, sd = pair_node(cache, geom, node, obstacle)
            if best is None or sd < best[0]:
                best = (sd, pair)
        pairs.append(best[1])
    return pairs


def refresh_contact_nodes(cache, geom, obstacles, assignment):
    """Re-evaluate pair geometry with a frozen node-to-obstacle assignment."""
    return [
        pair_node(cache, geom, node, obstacles[k])[0]
        for node, k in enumerate(assignment)
    ]
