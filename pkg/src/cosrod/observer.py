"""Static strain estimation from marker measurements.

The estimate is the stationary point of the elastic + gravity potential
subject to the marker constraints, obtained by Newton iteration on the
same stacked KKT system the static solver uses (zero inertia, no
contact). Position-only markers use the articulated 3-row constraint
form, full-pose markers the fixed 6-row form.

Redundant-but-consistent marker sets (e.g. every strain node observed)
make the KKT matrix rank-deficient with a multiplier-only null space;
those steps fall back to the minimum-norm least-squares solution. A
null vector with weight in the configuration block means the markers
do not pin the shape, which raises RankDeficiencyError naming the
free modes.
"""

from dataclasses import dataclass, field

import numpy as np

from .assembly import GRAVITY
from .errors import ConfigError, RankDeficiencyError, SolverError
from .liegroup import Pose
from .stepper import NewtonConfig, System, _Layout, _scaled_norm, _StaticProblem

RANK_RTOL = 1e-10
NULL_Q_TOL = 1e-6
RAMP = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class Marker:
    """One observed point of the rod: position-only or full pose."""

    s: float
    target: object
    kind: str = "position"

    def __post_init__(self):
        if self.kind not in ("position", "pose"):
            raise ConfigError(f"unknown marker kind {self.kind!r}")
        if self.kind == "pose":
            if not isinstance(self.target, Pose):
                raise ConfigError("pose markers need a Pose target")
        else:
            p = np.asarray(self.target, dtype=float).reshape(3)
            object.__setattr__(self, "target", p)


class MarkerSet:
    """Validated, arc-ordered marker list."""

    def __init__(self, markers):
        markers = list(markers)
        if not markers:
            raise ConfigError(
                "marker set is empty; rows must carry columns "
                "s x y z [qw qx qy qz]")
        s = np.array([m.s for m in markers], dtype=float)
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise ConfigError("marker arc coordinates must lie in [0, 1]")
        if np.any(np.diff(s) <= 0.0):
            raise ConfigError("marker arc coordinates must strictly increase")
        self.markers = markers

    def __len__(self):
        return len(self.markers)

    def __iter__(self):
        return iter(self.markers)

    @property
    def arcs(self):
        return np.array([m.s for m in self.markers])

    @classmethod
    def from_points(cls, s, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(Marker(float(si), p) for si, p in zip(s, points))

    @classmethod
    def from_poses(cls, s, poses):
        return cls(Marker(float(si), g, kind="pose")
                   for si, g in zip(s, poses))


def _quat_to_rot(q):
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ConfigError("marker quaternion has near-zero norm")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def read_markers(path):
    """Parse a marker table: rows (s, x, y, z[, qw, qx, qy, qz]).

    '#' starts a comment; position rows have 4 columns, full-pose rows 8
    (scalar-first unit quaternion). A file mixes only one row width.
    """
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) not in (4, 8):
                raise ConfigError(
                    f"{path}:{lineno}: expected 4 columns (s x y z) or 8 "
                    f"(s x y z qw qx qy qz), got {len(parts)}")
            try:
                rows.append((lineno, [float(p) for p in parts]))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ConfigError(
            f"{path}: no marker rows; expected columns s x y z [qw qx qy qz]")
    widths = {len(r) for _, r in rows}
    if len(widths) > 1:
        raise ConfigError(f"{path}: mixed position and pose rows")
    markers = []
    for lineno, r in rows:
        try:
            if len(r) == 4:
                markers.append(Marker(r[0], r[1:4]))
            else:
                markers.append(Marker(
                    r[0], Pose(_quat_to_rot(r[4:8]), np.array(r[1:4])),
                    kind="pose"))
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return MarkerSet(markers)


@dataclass
class ObserverEstimate:
    """Estimated configuration with the marker reaction forces."""

    q: np.ndarray
    multipliers: list = field(default_factory=list)
    residual_norm: float = 0.0
    iterations: int = 0

    def marker_force(self, k):
        """Reaction on the rod at marker k: (3,) point force or (6,) wrench."""
        return self.multipliers[k]


def _describe_null_modes(null_q, n):
    names = []
    for v in null_q:
        v = v / np.linalg.norm(v)
        parts = {"base rotation": np.linalg.norm(v[0:3]),
                 "base translation": np.linalg.norm(v[3:6])}
        theta = v[6:].reshape(n + 1, 6)
        node = int(np.argmax(np.linalg.norm(theta, axis=1)))
        parts[f"strain node {node}"] = np.linalg.norm(theta[node])
        label = max(parts, key=parts.get)
        names.append(f"{label} ({parts[label]:.2f} of the mode)")
    return names


def _min_norm_step(J, r, scale, qslice, n, classify=False):
    """Scaled minimum-norm Newton step.

    With classify=True a KKT null vector carrying configuration weight
    raises RankDeficiencyError: the markers leave the shape free. The
    check only makes sense at the initial iterate; later iterates can
    pass through fold points where the Hessian alone goes singular.
    """
    Js = J / scale[:, None]
    U, sv, Vt = np.linalg.svd(Js)
    rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    if classify and rank < sv.size:
        null = Vt[rank:]
        weight = np.linalg.norm(null[:, qslice], axis=1)
        bad = null[weight > NULL_Q_TOL]
        if len(bad):
            modes = _describe_null_modes(bad[:, qslice], n)
            raise RankDeficiencyError(
                "markers do not pin the configuration; free modes: "
                + "; ".join(modes),
                free_modes=[v[qslice].copy() for v in bad])
    inv = np.where(sv > RANK_RTOL * sv[0], 1.0 / np.where(sv > 0, sv, 1.0),
                   0.0)
    return -(Vt.T @ (inv * (U.T @ (r / scale))))


def _newton_kkt(problem, z0, cfg, qslice, n, context="", classify=True):
    """Damped Newton with minimum-norm steps on a rank-deficient KKT."""
    z = z0.copy()
    r, J, _ = problem.evaluate(z, "fd")
    if not np.all(np.isfinite(r)):
        raise SolverError(f"residual not finite at the initial iterate {context}")
    scale = np.maximum(np.abs(J).max(axis=1), 1e-12)
    norm = _scaled_norm(r, scale)
    best = (norm, z.copy())
    # the observability check must run even when the initial iterate
    # already satisfies the equations
    dz = _min_norm_step(J, r, scale, qslice, n, classify=classify)
    it = 0
    for it in range(cfg.max_iter):
        if norm < cfg.tol:
            return z, it, norm
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            z_try = z + alpha * dz
            r_try = problem.evaluate(z_try)[0]
            if np.all(np.isfinite(r_try)):
                n_try = _scaled_norm(r_try, scale)
                if n_try <= (1.0 - cfg.min_decrease * alpha) * norm:
                    z, r, norm = z_try, r_try, n_try
                    accepted = True
                    break
                if n_try < best[0]:
                    best = (n_try, z_try.copy())
            alpha *= cfg.backtrack
        if not accepted:
            z_try = best[1]
            r_try = problem.evaluate(z_try)[0]
            n_try = _scaled_norm(r_try, scale)
            if n_try >= norm:
                break
            z, r, norm = z_try, r_try, n_try
        if norm < best[0]:
            best = (norm, z.copy())
        J = problem.evaluate(z, "fd")[1]
        dz = _min_norm_step(J, r, scale, qslice, n)
    if norm < cfg.tol:
        return z, it + 1, norm
    raise SolverError(
        f"observer Newton did not converge {context}: "
        f"scaled residual {best[0]:.3e} after {cfg.max_iter} iterations",
        best=best[1], residual_norm=best[0], iterations=cfg.max_iter)


def estimate(model, markers, gravity=GRAVITY, parts=None, config=None,
             q0=None):
    """Reconstruct the static configuration pinned by the markers.

    Returns an ObserverEstimate; the multipliers are the marker reaction
    forces (world 3-forces for position markers, body wrenches for pose
    markers), in marker order.
    """
    if not isinstance(markers, MarkerSet):
        markers = MarkerSet(markers)
    cfg = NewtonConfig(jacobian="fd", max_iter=60) if config is None else config

    system = System(gravity=gravity)
    system.add_rod(model, parts=parts)
    slots = []
    for mk in markers:
        if mk.kind == "pose":
            slots.append(("fixed", len(system.fixed[0])))
            system.fix(0, mk.s, mk.target)
        else:
            slots.append(("ball", len(system.balls[0])))
            system.pin(0, mk.s, mk.target)

    lay = _Layout(system, with_contact=False)
    z = np.zeros(lay.size)
    if q0 is not None:
        z[lay.qdot[0]] = np.asarray(q0, dtype=float)
    qslice = lay.qdot[0]

    try:
        problem = _StaticProblem(system, 0.0, lay, fd_eps=cfg.fd_eps)
        z, iters, norm = _newton_kkt(problem, z, cfg, qslice, model.n)
    except RankDeficiencyError:
        raise
    except SolverError:
        iters, norm = 0, np.inf
        for load in RAMP:
            problem = _StaticProblem(system, 0.0, lay, load_scale=load,
                                     fd_eps=cfg.fd_eps)
            z, it_k, norm = _newton_kkt(problem, z, cfg, qslice, model.n,
                                        context=f"at load scale {load:g}",
                                        classify=False)
            iters += it_k

    mult = []
    for kind, k in slots:
        sl = lay.fixed[0][k] if kind == "fixed" else lay.balls[0][k]
        mult.append(z[sl].copy())
    return ObserverEstimate(q=z[qslice].copy(), multipliers=mult,
                            residual_norm=float(norm), iterations=iters)
