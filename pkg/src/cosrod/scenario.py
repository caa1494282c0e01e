"""Declarative scenario files for the command line front end.

A scenario is a YAML mapping of nested key/value tables describing the
scene: rods, obstacles, attachments and their motion schedules, the
contact law, and the time plan. load_scenario resolves every default
eagerly, so the resolved mapping can be re-emitted verbatim as a
reproducibility manifest and loaded again for a byte-identical rerun.
All quantities are SI; angles are radians.
"""

import warnings

import numpy as np
import yaml

from .contact import CapsuleObstacle, PlaneObstacle, TubeObstacle
from .errors import ConfigError
from .liegroup import Pose, exp_so3
from .rod import ArcGrid, GeneralizedState, Material, RodGeometry, RodModel
from .smoothing import make_step
from .stepper import NewtonConfig, System

_REQUIRED = object()


def _fail(where, message):
    raise ConfigError(f"{where}: {message}")


def _table(value, where):
    if value is None:
        return {}
    if not isinstance(value, dict):
        _fail(where, "expected a key/value table")
    return value


def _check_keys(tab, allowed, where):
    unknown = sorted(set(tab) - set(allowed))
    if unknown:
        _fail(where, f"unknown keys {unknown}; allowed: {sorted(allowed)}")


def _get(tab, key, where, default=_REQUIRED):
    if key in tab:
        return tab[key]
    if default is _REQUIRED:
        _fail(where, f"missing required key {key!r}")
    return default


def _num(tab, key, where, default=_REQUIRED):
    value = _get(tab, key, where, default)
    if value is None:
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        _fail(f"{where}.{key}", f"expected a number, got {value!r}")


def _int(tab, key, where, default=_REQUIRED):
    value = _get(tab, key, where, default)
    if value is None:
        return None
    try:
        out = int(value)
    except (TypeError, ValueError):
        _fail(f"{where}.{key}", f"expected an integer, got {value!r}")
    if out != float(value):
        _fail(f"{where}.{key}", f"expected an integer, got {value!r}")
    return out


def _vec3(tab, key, where, default=_REQUIRED):
    value = _get(tab, key, where, default)
    if value is None:
        return None
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError):
        _fail(f"{where}.{key}", f"expected three numbers, got {value!r}")
    if len(out) != 3:
        _fail(f"{where}.{key}", f"expected three numbers, got {len(out)}")
    return out


def _vec6(tab, key, where, default=_REQUIRED):
    value = _get(tab, key, where, default)
    if value is None:
        return None
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError):
        _fail(f"{where}.{key}", f"expected six numbers, got {value!r}")
    if len(out) != 6:
        _fail(f"{where}.{key}", f"expected six numbers, got {len(out)}")
    return out


def _resolve_geometry(tab, where):
    tab = _table(tab, where)
    _check_keys(tab, ("length", "base_radius", "tip_radius",
                      "base_diameter", "tip_diameter"), where)
    length = _num(tab, "length", where)
    if length is None or length <= 0.0:
        _fail(where, "length must be positive")
    if "base_radius" in tab and "base_diameter" in tab:
        _fail(where, "give base_radius or base_diameter, not both")
    if "base_radius" in tab:
        base = _num(tab, "base_radius", where)
    elif "base_diameter" in tab:
        base = _num(tab, "base_diameter", where) / 2.0
    else:
        _fail(where, "missing base_radius or base_diameter")
    if "tip_radius" in tab and "tip_diameter" in tab:
        _fail(where, "give tip_radius or tip_diameter, not both")
    if "tip_radius" in tab:
        tip = _num(tab, "tip_radius", where)
    elif "tip_diameter" in tab:
        tip = _num(tab, "tip_diameter", where) / 2.0
    else:
        tip = base
    if base <= 0.0 or tip <= 0.0:
        _fail(where, "radii must be positive")
    return {"length": length, "base_radius": base, "tip_radius": tip}


def _resolve_material(tab, where):
    tab = _table(tab, where)
    _check_keys(tab, ("young_modulus", "poisson_ratio", "density", "damping"),
                where)
    return {
        "young_modulus": _num(tab, "young_modulus", where),
        "poisson_ratio": _num(tab, "poisson_ratio", where),
        "density": _num(tab, "density", where),
        "damping": _num(tab, "damping", where, 0.0),
    }


def _resolve_motion(tab, where, t_end):
    tab = _table(tab, where)
    kind = _get(tab, "kind", where, "static")
    if kind == "static":
        _check_keys(tab, ("kind",), where)
        return {"kind": "static"}
    if kind == "translate":
        _check_keys(tab, ("kind", "velocity", "until"), where)
        return {
            "kind": "translate",
            "velocity": _vec3(tab, "velocity", where),
            "until": _num(tab, "until", where, t_end),
        }
    if kind == "spin":
        _check_keys(tab, ("kind", "axis", "rate", "center", "until"), where)
        axis = np.asarray(_vec3(tab, "axis", where), dtype=float)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            _fail(where, "spin axis must be nonzero")
        return {
            "kind": "spin",
            "axis": list(axis / norm),
            "rate": _num(tab, "rate", where),
            "center": _vec3(tab, "center", where, None),
            "until": _num(tab, "until", where, t_end),
        }
    _fail(f"{where}.kind",
          f"unknown motion {kind!r}; expected static, translate, or spin")


def _resolve_constraint(tab, where, t_end):
    tab = _table(tab, where)
    ctype = _get(tab, "type", where)
    s = _num(tab, "s", where)
    if s is None or not 0.0 <= s <= 1.0:
        _fail(where, "constraint arc coordinate s must lie in [0, 1]")
    if ctype == "fixed":
        _check_keys(tab, ("type", "s", "motion", "until"), where)
        return {"type": "fixed", "s": s,
                "until": _num(tab, "until", where, None),
                "motion": _resolve_motion(tab.get("motion"), f"{where}.motion",
                                          t_end)}
    if ctype == "ball":
        _check_keys(tab, ("type", "s", "point", "until"), where)
        return {"type": "ball", "s": s,
                "until": _num(tab, "until", where, None),
                "point": _vec3(tab, "point", where, None)}
    _fail(f"{where}.type", f"unknown constraint type {ctype!r}")


def _resolve_rod(tab, index, t_end):
    where = f"rods[{index}]"
    tab = _table(tab, where)
    _check_keys(tab, ("geometry", "material", "core", "discretization",
                      "base_pose", "constraints", "end_loads"), where)
    out = {
        "geometry": _resolve_geometry(tab.get("geometry"), f"{where}.geometry"),
        "material": _resolve_material(tab.get("material"), f"{where}.material"),
    }
    if "core" in tab:
        core = _table(tab["core"], f"{where}.core")
        _check_keys(core, ("geometry", "material"), f"{where}.core")
        out["core"] = {
            "geometry": _resolve_geometry(core.get("geometry"),
                                          f"{where}.core.geometry"),
            "material": _resolve_material(core.get("material"),
                                          f"{where}.core.material"),
        }

    disc = _table(tab.get("discretization"), f"{where}.discretization")
    _check_keys(disc, ("n", "m", "quad_order", "max_substep"),
                f"{where}.discretization")
    n = _int(disc, "n", f"{where}.discretization")
    m = _int(disc, "m", f"{where}.discretization", n)
    if n < 2 * m:
        warnings.warn(
            f"{where}: strain field has n={n} < 2*m={2 * m} sections; the "
            "contact field converges best with n at least twice m",
            stacklevel=2)
    out["discretization"] = {
        "n": n, "m": m,
        "quad_order": _int(disc, "quad_order", f"{where}.discretization", 4),
        "max_substep": _num(disc, "max_substep", f"{where}.discretization",
                            None),
    }

    base = _table(tab.get("base_pose"), f"{where}.base_pose")
    _check_keys(base, ("position", "axis", "angle"), f"{where}.base_pose")
    out["base_pose"] = {
        "position": _vec3(base, "position", f"{where}.base_pose",
                          [0.0, 0.0, 0.0]),
        "axis": _vec3(base, "axis", f"{where}.base_pose", [0.0, 0.0, 1.0]),
        "angle": _num(base, "angle", f"{where}.base_pose", 0.0),
    }

    cons = tab.get("constraints") or []
    if not isinstance(cons, list):
        _fail(f"{where}.constraints", "expected a list")
    out["constraints"] = [
        _resolve_constraint(c, f"{where}.constraints[{k}]", t_end)
        for k, c in enumerate(cons)
    ]

    loads = _table(tab.get("end_loads"), f"{where}.end_loads")
    _check_keys(loads, ("base", "tip"), f"{where}.end_loads")
    out["end_loads"] = {
        "base": _vec6(loads, "base", f"{where}.end_loads", None),
        "tip": _vec6(loads, "tip", f"{where}.end_loads", None),
    }
    return out


_OBSTACLE_KEYS = {
    "plane": ("type", "point", "normal"),
    "capsule": ("type", "end_a", "end_b", "radius"),
    "tube": ("type", "center", "normal", "start_dir", "arc_angle",
             "major_radius", "bore_radius", "wall_thickness"),
}


def _resolve_obstacle(tab, index):
    where = f"obstacles[{index}]"
    tab = _table(tab, where)
    otype = _get(tab, "type", where)
    if otype not in _OBSTACLE_KEYS:
        _fail(f"{where}.type",
              f"unknown obstacle type {otype!r}; expected one of "
              f"{sorted(_OBSTACLE_KEYS)}")
    _check_keys(tab, _OBSTACLE_KEYS[otype], where)
    if otype == "plane":
        return {"type": "plane",
                "point": _vec3(tab, "point", where),
                "normal": _vec3(tab, "normal", where)}
    if otype == "capsule":
        return {"type": "capsule",
                "end_a": _vec3(tab, "end_a", where),
                "end_b": _vec3(tab, "end_b", where),
                "radius": _num(tab, "radius", where)}
    return {"type": "tube",
            "center": _vec3(tab, "center", where),
            "normal": _vec3(tab, "normal", where),
            "start_dir": _vec3(tab, "start_dir", where),
            "arc_angle": _num(tab, "arc_angle", where),
            "major_radius": _num(tab, "major_radius", where),
            "bore_radius": _num(tab, "bore_radius", where),
            "wall_thickness": _num(tab, "wall_thickness", where)}


_SMOOTHING_DEFAULT_PARAM = {"heaviside": None, "sigmoid": 100.0, "trig": 100.0}


def resolve(raw, where="scenario"):
    """Expand every default in a raw scenario mapping; validates keys."""
    raw = _table(raw, where)
    _check_keys(raw, ("name", "gravity", "time", "friction", "smoothing",
                      "solver", "rods", "obstacles", "outputs", "rod_contact",
                      "seed"), where)
    out = {"name": str(_get(raw, "name", where))}

    gravity = raw.get("gravity", [0.0, 0.0, -9.81])
    if gravity in ("off", False, None):
        gravity = [0.0, 0.0, 0.0]
    out["gravity"] = _vec3({"gravity": gravity}, "gravity", where)

    time = _table(_get(raw, "time", where), f"{where}.time")
    _check_keys(time, ("h", "t_end"), f"{where}.time")
    h = _num(time, "h", f"{where}.time")
    t_end = _num(time, "t_end", f"{where}.time")
    if h is None or h <= 0.0:
        _fail(f"{where}.time", "step size h must be positive")
    if t_end is None or t_end < 0.0:
        _fail(f"{where}.time", "t_end must be non-negative")
    out["time"] = {"h": h, "t_end": t_end}

    fric = _table(raw.get("friction"), f"{where}.friction")
    _check_keys(fric, ("mu",), f"{where}.friction")
    mu = _num(fric, "mu", f"{where}.friction", 0.0)
    if mu < 0.0:
        _fail(f"{where}.friction", "mu must be non-negative")
    out["friction"] = {"mu": mu}

    sm = _table(raw.get("smoothing"), f"{where}.smoothing")
    _check_keys(sm, ("kind", "param"), f"{where}.smoothing")
    kind = _get(sm, "kind", f"{where}.smoothing", "sigmoid")
    if kind not in _SMOOTHING_DEFAULT_PARAM:
        _fail(f"{where}.smoothing",
              f"unknown kind {kind!r}; expected one of "
              f"{sorted(_SMOOTHING_DEFAULT_PARAM)}")
    param = _num(sm, "param", f"{where}.smoothing",
                 _SMOOTHING_DEFAULT_PARAM[kind])
    if kind == "heaviside" and param is not None:
        _fail(f"{where}.smoothing", "heaviside smoothing takes no parameter")
    out["smoothing"] = {"kind": kind, "param": param}

    sol = _table(raw.get("solver"), f"{where}.solver")
    _check_keys(sol, ("tol", "max_iter", "jacobian", "fd_eps"),
                f"{where}.solver")
    jacobian = _get(sol, "jacobian", f"{where}.solver", "analytic")
    if jacobian not in ("analytic", "hybrid", "fd"):
        _fail(f"{where}.solver",
              f"unknown jacobian mode {jacobian!r}; expected analytic, "
              "hybrid, or fd")
    out["solver"] = {
        "tol": _num(sol, "tol", f"{where}.solver", 1e-9),
        "max_iter": _int(sol, "max_iter", f"{where}.solver", 40),
        "jacobian": jacobian,
        "fd_eps": _num(sol, "fd_eps", f"{where}.solver", 1e-7),
    }

    rods = _get(raw, "rods", where)
    if not isinstance(rods, list) or not rods:
        _fail(f"{where}.rods", "expected a non-empty list of rod tables")
    out["rods"] = [_resolve_rod(r, k, t_end) for k, r in enumerate(rods)]

    obstacles = raw.get("obstacles") or []
    if not isinstance(obstacles, list):
        _fail(f"{where}.obstacles", "expected a list")
    out["obstacles"] = [_resolve_obstacle(o, k) for k, o in enumerate(obstacles)]

    outputs = _table(raw.get("outputs"), f"{where}.outputs")
    _check_keys(outputs, ("every",), f"{where}.outputs")
    every = _int(outputs, "every", f"{where}.outputs", 1)
    if every < 1:
        _fail(f"{where}.outputs", "every must be at least 1")
    out["outputs"] = {"every": every}

    out["rod_contact"] = bool(raw.get("rod_contact", True))
    out["seed"] = _int(raw, "seed", where, 0)
    return out


def load_scenario(path, mu=None, smoothing=None):
    """Read, resolve, and optionally override a scenario file.

    mu overrides friction.mu; smoothing is a "kind" or "kind=param"
    string overriding the contact law.
    """
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        if mark is not None:
            raise ConfigError(
                f"{path}:{mark.line + 1}:{mark.column + 1}: "
                f"{exc.problem or exc.context}") from None
        raise ConfigError(f"{path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    if raw is None:
        raise ConfigError(f"{path}: scenario file is empty")
    if mu is not None:
        raw = dict(raw)
        fric = dict(_table(raw.get("friction"), "friction"))
        fric["mu"] = mu
        raw["friction"] = fric
    if smoothing is not None:
        raw = dict(raw)
        kind, sep, param = str(smoothing).partition("=")
        tab = {"kind": kind}
        if sep:
            tab["param"] = param
        raw["smoothing"] = tab
    try:
        return resolve(raw, where=str(path))
    except ConfigError:
        raise


def solver_config(resolved):
    sol = resolved["solver"]
    return NewtonConfig(tol=sol["tol"], max_iter=sol["max_iter"],
                        jacobian=sol["jacobian"], fd_eps=sol["fd_eps"])


def _build_obstacle(tab):
    if tab["type"] == "plane":
        return PlaneObstacle(tab["point"], tab["normal"])
    if tab["type"] == "capsule":
        return CapsuleObstacle(tab["end_a"], tab["end_b"], tab["radius"])
    return TubeObstacle(tab["center"], tab["normal"], tab["start_dir"],
                        tab["arc_angle"], tab["major_radius"],
                        tab["bore_radius"], tab["wall_thickness"])


def _schedule(motion, pose0):
    if motion["kind"] == "static":
        return pose0
    if motion["kind"] == "translate":
        v = np.asarray(motion["velocity"], dtype=float)
        until = motion["until"]

        def translate(t):
            return Pose(pose0.R, pose0.p + min(t, until) * v)

        return translate
    axis = np.asarray(motion["axis"], dtype=float)
    rate = motion["rate"]
    until = motion["until"]
    center = (pose0.p.copy() if motion["center"] is None
              else np.asarray(motion["center"], dtype=float))

    def spin(t):
        R = exp_so3(axis * (rate * min(t, until)))
        return Pose(R @ pose0.R, center + R @ (pose0.p - center))

    return spin


def build_system(resolved):
    """Instantiate the scene: returns (system, initial states)."""
    sm = make_step(resolved["smoothing"]["kind"], resolved["smoothing"]["param"])
    system = System(smoothing=sm, mu=resolved["friction"]["mu"],
                    gravity=resolved["gravity"],
                    rod_contact=resolved["rod_contact"])
    states = []
    for rtab in resolved["rods"]:
        g = rtab["geometry"]
        geo = RodGeometry(
            length=g["length"], base_radius=g["base_radius"],
            radial_gradient=(g["tip_radius"] - g["base_radius"]) / g["length"])
        m = rtab["material"]
        mat = Material(young_modulus=m["young_modulus"],
                       poisson_ratio=m["poisson_ratio"],
                       density=m["density"], damping=m["damping"])
        disc = rtab["discretization"]
        extra = sorted({c["s"] for c in rtab["constraints"]})
        grid = ArcGrid(disc["n"], disc["m"], quad_order=disc["quad_order"],
                       extra_points=extra, max_substep=disc["max_substep"])
        model = RodModel(geo, mat, grid)
        parts = None
        if "core" in rtab:
            cg = rtab["core"]["geometry"]
            cm = rtab["core"]["material"]
            core_geo = RodGeometry(
                length=cg["length"], base_radius=cg["base_radius"],
                radial_gradient=(cg["tip_radius"] - cg["base_radius"])
                / cg["length"])
            core_mat = Material(young_modulus=cm["young_modulus"],
                                poisson_ratio=cm["poisson_ratio"],
                                density=cm["density"], damping=cm["damping"])
            parts = [(geo, mat), (core_geo, core_mat)]
        rod = system.add_rod(model, parts=parts)

        base = rtab["base_pose"]
        phi = np.asarray(base["axis"], dtype=float)
        norm = np.linalg.norm(phi)
        phi = phi / norm * base["angle"] if norm > 0.0 else np.zeros(3)
        q0 = np.zeros(model.dof)
        q0[:3] = phi
        q0[3:6] = base["position"]
        kin = model.kinematics(q0, with_rates=False)
        for c in rtab["constraints"]:
            pose0 = kin.pose(grid.index_of(c["s"]))
            if c["type"] == "fixed":
                system.fix(rod, c["s"], _schedule(c["motion"], pose0),
                           until=c["until"])
            else:
                point = (pose0.p.copy() if c["point"] is None
                         else np.asarray(c["point"], dtype=float))
                system.pin(rod, c["s"], point, until=c["until"])
        loads = rtab["end_loads"]
        if loads["base"] is not None or loads["tip"] is not None:
            lam0 = np.zeros(6) if loads["base"] is None else np.asarray(
                loads["base"], dtype=float)
            lam1 = np.zeros(6) if loads["tip"] is None else np.asarray(
                loads["tip"], dtype=float)
            system.load_ends(rod, (lam0, lam1))
        states.append(GeneralizedState(q0))

    for ob in resolved["obstacles"]:
        system.add_obstacle(_build_obstacle(ob))
    return system, states


def dump_manifest(resolved, stream):
    """Emit the resolved scenario as diff-friendly, rerunnable YAML."""
    yaml.safe_dump(resolved, stream, sort_keys=True, default_flow_style=False)
