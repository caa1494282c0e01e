"""Smoothed step functions and the slack-variable contact force laws.

The unilateral contact conditions (non-negative force, non-negative gap,
zero product) are rewritten through a single slack variable u per scalar
constraint: force = D(u) u fires on the positive branch, gap = -D(-u) u on
the negative branch. D is a (possibly exact) unit step; smoothing D makes
the coupled residual C^1 so Newton converges through contact transitions.

The tangential law reuses the same step through f(x) = D(x) x.  With
s = a / |u_t| (a = mu * normal force) the gains

    W(s)  = -s + f(s - 1)        force   = W  u_t
    W*(s) = f(1 - s)             slip    = W* u_t

reproduce stick (force = -u_t, slip = 0) for |u_t| < a and sliding
(force = -a u_t/|u_t|, slip = (|u_t| - a) u_t/|u_t|) for |u_t| > a in the
exact-step limit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


class SmoothedStep:
    """Base interface: a monotone step D with D(-inf)=0, D(+inf)=1."""

    kind = "base"

    def step(self, x):
        raise NotImplementedError

    def step_deriv(self, x):
        raise NotImplementedError

    def positive_part(self, x):
        """f(x) = D(x) x, a smoothed max(x, 0)."""
        return self.step(x) * x

    def positive_part_deriv(self, x):
        return self.step(x) + self.step_deriv(x) * x


class HeavisideStep(SmoothedStep):
    """Exact step, D(0) = 1/2. Derivative is zero almost everywhere."""

    kind = "heaviside"

    def step(self, x):
        return 0.5 * (np.sign(x) + 1.0)

    def step_deriv(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


class SigmoidStep(SmoothedStep):
    """Logistic step 1 / (1 + exp(-c x)); c controls the transition width."""

    kind = "sigmoid"

    def __init__(self, sharpness=100.0):
        if sharpness <= 0.0:
            raise ConfigError(f"sigmoid sharpness must be positive, got {sharpness}")
        self.sharpness = float(sharpness)

    def step(self, x):
        # clip the exponent; beyond +-40 the logistic saturates in float64
        z = np.clip(self.sharpness * np.asarray(x, dtype=float), -40.0, 40.0)
        return 1.0 / (1.0 + np.exp(-z))

    def step_deriv(self, x):
        d = self.step(x)
        return self.sharpness * d * (1.0 - d)


class TrigStep(SmoothedStep):
    """Cosine ramp (1 - cos(w x)) / 2 on [0, pi/w], exact 0/1 outside.

    Compact support makes the complementarity product D(u) D(-u) u^2
    vanish identically: the force and slack branches never overlap.
    The ramp is C^1 (zero slope at both ends).
    """

    kind = "trig"

    def __init__(self, frequency=100.0):
        if frequency <= 0.0:
            raise ConfigError(f"trig frequency must be positive, got {frequency}")
        self.frequency = float(frequency)

    def step(self, x):
        x = np.asarray(x, dtype=float)
        w = self.frequency
        inside = 0.5 * (1.0 - np.cos(w * np.clip(x, 0.0, np.pi / w)))
        return np.where(x <= 0.0, 0.0, np.where(x >= np.pi / w, 1.0, inside))

    def step_deriv(self, x):
        x = np.asarray(x, dtype=float)
        w = self.frequency
        inside = 0.5 * w * np.sin(w * x)
        return np.where((x <= 0.0) | (x >= np.pi / w), 0.0, inside)


_STEP_KINDS = {
    "heaviside": lambda param: HeavisideStep(),
    "sigmoid": lambda param: SigmoidStep(param) if param is not None else SigmoidStep(),
    "trig": lambda param: TrigStep(param) if param is not None else TrigStep(),
}


def make_step(kind, param=None):
    """Build a step function by name ('heaviside', 'sigmoid', 'trig')."""
    try:
        factory = _STEP_KINDS[kind]
    except KeyError:
        raise ConfigError(
            f"unknown smoothing kind {kind!r}, expected one of {sorted(_STEP_KINDS)}"
        ) from None
    if kind == "heaviside" and param is not None:
        raise ConfigError("heaviside smoothing takes no parameter")
    return factory(param)


def normal_force(u_n, sm):
    """Force branch D(u) u and its derivative w.r.t. u."""
    return sm.positive_part(u_n), sm.positive_part_deriv(u_n)


def normal_slack(u_n, sm):
    """Slack branch -D(-u) u (the separation gap) and its derivative."""
    d = sm.step(-u_n)
    return -d * u_n, -d + sm.step_deriv(-u_n) * u_n


@dataclass
class FrictionLaw:
    """Tangential force/slip at one contact node with analytic partials.

    u_t is the 2-component tangential slack, a = mu * Lambda_n >= 0 the
    friction cone radius. Partials w.r.t. a let callers chain through the
    normal slack u_n. force_gain/slip_gain are the scalar multipliers of
    u_t (the rank-1 curvature terms excluded), used where the law enters
    a residual as gain * slack.
    """

    force: np.ndarray       # Lambda_t, shape (2,)
    slip: np.ndarray        # W* u_t, shape (2,)
    dforce_dut: np.ndarray  # (2, 2)
    dforce_da: np.ndarray   # (2,)
    dslip_dut: np.ndarray   # (2, 2)
    dslip_da: np.ndarray    # (2,)
    force_gain: float = 0.0
    slip_gain: float = 0.0


def friction_law(u_t, a, sm, corner_slope=1.0, corner_tol=1e-12):
    """Evaluate the tangential law at one node.

    At the stick corner u_t = 0 with a > 0 the force gain is the exact-step
    limit W = -1; corner_slope scales the Jacobian block -corner_slope*I
    placed there (the value 1 matches the one-sided limit and keeps the
    Newton direction dissipative).
    """
    u_t = np.asarray(u_t, dtype=float)
    eye = np.eye(2)
    zero2 = np.zeros(2)
    nt = float(np.linalg.norm(u_t))

    if nt < corner_tol:
        if a > corner_tol:
            # stick corner: force = -u_t -> 0, slip = 0
            return FrictionLaw(
                force=np.zeros(2), slip=np.zeros(2),
                dforce_dut=-corner_slope * eye, dforce_da=zero2.copy(),
                dslip_dut=np.zeros((2, 2)), dslip_da=zero2.copy(),
                force_gain=-1.0, slip_gain=0.0,
            )
        # free corner: no cone, u_t passes straight through as slip
        wstar0 = float(sm.positive_part(1.0))
        return FrictionLaw(
            force=np.zeros(2), slip=np.zeros(2),
            dforce_dut=np.zeros((2, 2)), dforce_da=zero2.copy(),
            dslip_dut=wstar0 * eye, dslip_da=zero2.copy(),
            force_gain=0.0, slip_gain=wstar0,
        )

    s = a / nt
    f_slide = float(sm.positive_part(s - 1.0))
    fp_slide = float(sm.positive_part_deriv(s - 1.0))
    f_stick = float(sm.positive_part(1.0 - s))
    fp_stick = float(sm.positive_part_deriv(1.0 - s))

    W = -s + f_slide
    Wstar = f_stick
    dW_ds = -1.0 + fp_slide
    dWstar_ds = -fp_stick

    ds_dut = -(a / nt**3) * u_t       # gradient of a/|u_t|
    ds_da = 1.0 / nt

    return FrictionLaw(
        force=W * u_t,
        slip=Wstar * u_t,
        dforce_dut=W * eye + dW_ds * np.outer(u_t, ds_dut),
        dforce_da=dW_ds * ds_da * u_t,
        dslip_dut=Wstar * eye + dWstar_ds * np.outer(u_t, ds_dut),
        dslip_da=dWstar_ds * ds_da * u_t,
        force_gain=W, slip_gain=Wstar,
    )


@dataclass
class ContactNodeLaw:
    """Full smoothed law at one node, slack ordered [u_n, u_t1, u_t2].

    force stacks [Lambda_n, Lambda_t]; gap/slip are the complementary
    branches. gap_gain and slip_gain are the residual multipliers such
    that gap = gap_gain * u_n and slip = slip_gain * u_t up to the
    friction curvature terms carried in the derivative blocks.
    """

    force: np.ndarray       # (3,)
    gap: float
    slip: np.ndarray        # (2,)
    gap_gain: float
    slip_gain: float
    dforce_du: np.ndarray   # (3, 3)
    dgap_du: np.ndarray     # (3,)
    dslip_du: np.ndarray    # (2, 3)


def contact_node_law(u, mu, sm, corner_slope=1.0):
    """Normal and tangential branches at one contact node.

    The friction cone radius a = mu * Lambda_n couples the tangential
    blocks to u_n; the returned derivatives carry that chain.
    """
    u = np.asarray(u, dtype=float)
    u_n = float(u[0])
    force_n, dforce_n = normal_force(u_n, sm)
    gap, dgap = normal_slack(u_n, sm)
    # the cone radius clamps at zero: smoothed normal forces can dip
    # slightly negative, but the tangential law is only defined for a >= 0
    # (its a -> 0+ limit is plain free slip)
    a = mu * force_n
    da_dun = mu * dforce_n
    if a < 0.0:
        a = 0.0
        da_dun = 0.0
    fl = friction_law(u[1:3], a, sm, corner_slope=corner_slope)

    dforce_du = np.zeros((3, 3))
    dforce_du[0, 0] = dforce_n
    dforce_du[1:, 0] = fl.dforce_da * da_dun
    dforce_du[1:, 1:] = fl.dforce_dut

    dslip_du = np.zeros((2, 3))
    dslip_du[:, 0] = fl.dslip_da * da_dun
    dslip_du[:, 1:] = fl.dslip_dut

    return ContactNodeLaw(
        force=np.concatenate([[force_n], fl.force]),
        gap=float(gap), slip=fl.slip,
        gap_gain=float(-sm.step(-u_n)), slip_gain=fl.slip_gain,
        dforce_du=dforce_du, dgap_du=np.array([float(dgap), 0.0, 0.0]),
        dslip_du=dslip_du,
    )


def contact_wrench(force):
    """Embed [Lambda_n, Lambda_t1, Lambda_t2] as a pure-force body wrench."""
    force = np.asarray(force, dtype=float)
    return np.concatenate([np.zeros(force.shape[:-1] + (3,)), force], axis=-1)
