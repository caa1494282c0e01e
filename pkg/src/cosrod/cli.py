"""Command line front end.

Verbs: run one scenario, sweep the strain discretization against a fixed
contact grid, estimate a static configuration from markers, or validate
a scenario file. Every run writes a resolved manifest next to its CSV
outputs so the exact configuration can be rerun byte-identically.
Exit codes: 0 success, 2 configuration error, 3 solver failure (partial
outputs are still flushed).
"""

import json
import sys
import warnings
from pathlib import Path

import click
import numpy as np

from .errors import ConfigError, SolverError
from .observer import estimate, read_markers
from .scenario import build_system, dump_manifest, load_scenario, solver_config
from .stepper import iter_steps

CONFIG_EXIT = 2
SOLVER_EXIT = 3


def _fmt(x):
    return format(float(x), ".17g")


def _load(path, mu, smoothing):
    """Resolve a scenario, forwarding schema warnings to stderr."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        resolved = load_scenario(path, mu=mu, smoothing=smoothing)
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    return resolved


def _tip_row(system, record):
    cells = []
    for model, st in zip(system.models, record.states):
        kin = model.kinematics(st.q, st.qdot)
        idx = model.grid.index_of(1.0)
        pose = kin.pose(idx)
        speed = np.linalg.norm(pose.R @ kin.eta[idx][3:])
        cells.extend([pose.p[0], pose.p[1], pose.p[2], speed])
    return cells


def _constraint_cells(record):
    cells = []
    for rod in record.multipliers:
        for lam in rod["fixed"]:
            cells.append(np.linalg.norm(lam[3:]))
            cells.append(np.linalg.norm(lam[:3]))
        for lam in rod["ball"]:
            cells.append(np.linalg.norm(lam))
    return cells


def _trajectory_header(system):
    cols = ["step", "t_s", "iterations", "residual"]
    for i, _ in enumerate(system.models):
        cols += [f"r{i}_tip_x_m", f"r{i}_tip_y_m", f"r{i}_tip_z_m",
                 f"r{i}_tip_speed_m_per_s"]
    for i, _ in enumerate(system.models):
        for k in range(len(system.fixed[i])):
            cols += [f"r{i}_fix{k}_force_N", f"r{i}_fix{k}_torque_N_m"]
        for k in range(len(system.balls[i])):
            cols += [f"r{i}_ball{k}_force_N"]
    return cols


class _RunWriter:
    """Accumulates decimated trajectory and contact rows plus statistics."""

    def __init__(self, system, every):
        self.system = system
        self.every = every
        self.traj = [",".join(_trajectory_header(system))]
        self.nodes = ["step,t_s,rod,s,gap_m,normal_N_per_m,"
                      "tangent1_N_per_m,tangent2_N_per_m,state"]
        self.steps = 0
        self.t_final = 0.0
        self.max_iters = 0
        self.sum_iters = 0
        self.max_residual = 0.0
        self.peak_normal = 0.0
        self.peak_fixed = 0.0
        self.last = None
        self._last_kept = -1

    def take(self, k, record):
        self.last = record
        self.t_final = record.t
        if k > 0:
            self.steps = k
            self.max_iters = max(self.max_iters, record.iterations)
            self.sum_iters += record.iterations
            self.max_residual = max(self.max_residual, record.residual_norm)
        for rod in record.multipliers:
            for lam in rod["fixed"]:
                self.peak_fixed = max(self.peak_fixed,
                                      float(np.linalg.norm(lam[3:])))
        for rep in record.contact:
            if rep is not None and rep.force.size:
                self.peak_normal = max(self.peak_normal,
                                       float(rep.force[:, 0].max()))
        if k % self.every == 0:
            self._emit(k, record)
            self._last_kept = k

    def finish(self):
        if self.last is not None and self._last_kept != self.steps:
            self._emit(self.steps, self.last)

    def _emit(self, k, record):
        cells = [str(k), _fmt(record.t), str(record.iterations),
                 _fmt(record.residual_norm)]
        cells += [_fmt(v) for v in _tip_row(self.system, record)]
        cells += [_fmt(v) for v in _constraint_cells(record)]
        self.traj.append(",".join(cells))
        for i, rep in enumerate(record.contact):
            if rep is None:
                continue
            for j in range(rep.s.size):
                self.nodes.append(",".join([
                    str(k), _fmt(record.t), str(i), _fmt(rep.s[j]),
                    _fmt(rep.gap[j]), _fmt(rep.force[j, 0]),
                    _fmt(rep.force[j, 1]), _fmt(rep.force[j, 2]),
                    rep.mode[j]]))

    def summary(self, resolved, error):
        per_rod = []
        if self.last is not None:
            for model, st in zip(self.system.models, self.last.states):
                kin = model.kinematics(st.q, st.qdot)
                idx = model.grid.index_of(1.0)
                pose = kin.pose(idx)
                per_rod.append({
                    "tip_m": [float(v) for v in pose.p],
                    "tip_speed_m_per_s":
                        float(np.linalg.norm(pose.R @ kin.eta[idx][3:])),
                })
        mean = self.sum_iters / self.steps if self.steps else 0.0
        return {
            "scenario": resolved["name"],
            "completed": error is None,
            "error": None if error is None else {
                "message": str(error),
                "step_index": getattr(error, "step_index", None),
            },
            "steps_committed": self.steps,
            "t_final_s": float(self.t_final),
            "newton": {
                "max_iterations": self.max_iters,
                "mean_iterations": mean,
                "max_residual": float(self.max_residual),
            },
            "rods": per_rod,
            "peak_contact_normal_N_per_m": float(self.peak_normal),
            "peak_fixed_force_N": float(self.peak_fixed),
        }


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")


def run_scenario(resolved, out_dir):
    """Simulate one resolved scenario into out_dir; returns the exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.yaml", "w") as fh:
        dump_manifest(resolved, fh)
    system, states = build_system(resolved)
    writer = _RunWriter(system, resolved["outputs"]["every"])
    error = None
    try:
        for k, record in enumerate(iter_steps(
                system, states, resolved["time"]["t_end"],
                resolved["time"]["h"], config=solver_config(resolved))):
            writer.take(k, record)
    except SolverError as err:
        error = err
    writer.finish()
    _write(out / "trajectory.csv", writer.traj)
    _write(out / "contact_nodes.csv", writer.nodes)
    with open(out / "summary.json", "w") as fh:
        json.dump(writer.summary(resolved, error), fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    if error is not None:
        click.echo(f"error: {error}", err=True)
        return SOLVER_EXIT
    return 0


def final_contact_profile(resolved):
    """Run a scenario and bin the last step's normal load onto the m-grid.

    Returns (s nodes of the contact grid, per-node normal intensity,
    summary dict). Intensities sum when a node touches several obstacles.
    """
    system, states = build_system(resolved)
    last = None
    for record in iter_steps(system, states, resolved["time"]["t_end"],
                             resolved["time"]["h"],
                             config=solver_config(resolved)):
        last = record
    m = resolved["rods"][0]["discretization"]["m"]
    s_nodes = np.linspace(0.0, 1.0, m + 1)
    profile = np.zeros(m + 1)
    rep = last.contact[0]
    if rep is not None:
        for j in range(rep.s.size):
            idx = int(round(rep.s[j] * m))
            profile[idx] += rep.force[j, 0]
    return s_nodes, profile, {
        "steps": int(round(resolved["time"]["t_end"] / resolved["time"]["h"])),
        "max_iterations": last.iterations,
    }


def run_sweep(resolved, n_list, out_dir):
    """Strain-grid sweep at fixed contact grid; returns the exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.yaml", "w") as fh:
        dump_manifest(resolved, fh)
    m = resolved["rods"][0]["discretization"]["m"]
    s_nodes = np.linspace(0.0, 1.0, m + 1)
    header = "n," + ",".join(f"normal_N_per_m_at_s_{_fmt(s)}" for s in s_nodes)
    rows = [header]
    profiles = []
    error = None
    for n in n_list:
        member = json.loads(json.dumps(resolved))
        for rod in member["rods"]:
            rod["discretization"]["n"] = int(n)
        member["name"] = f"{resolved['name']}_n{n}"
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _, profile, _ = final_contact_profile(member)
        except SolverError as err:
            error = (int(n), err)
            break
        profiles.append((int(n), profile))
        rows.append(",".join([str(int(n))] + [_fmt(v) for v in profile]))
    _write(out / "sweep.csv", rows)

    pairs = []
    for (na, fa), (nb, fb) in zip(profiles, profiles[1:]):
        denom = float(np.linalg.norm(fb))
        l2 = float(np.linalg.norm(fa - fb)) / denom if denom > 0 else 0.0
        pairs.append({"n_coarse": na, "n_fine": nb, "l2_relative": l2})
    converged = bool(pairs) and pairs[-1]["l2_relative"] < 0.05
    report = {
        "scenario": resolved["name"],
        "m": m,
        "n_values": [n for n, _ in profiles],
        "pairs": pairs,
        "converged": converged,
        "error": None if error is None else {
            "n": error[0], "message": str(error[1]),
            "step_index": getattr(error[1], "step_index", None),
        },
    }
    with open(out / "sweep_summary.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if error is not None:
        click.echo(f"error: sweep member n={error[0]}: {error[1]}", err=True)
        return SOLVER_EXIT
    return 0


def run_observe(marker_path, rod_path, out_dir):
    """Estimate a static configuration from a marker file; exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _load(rod_path, None, None)
    markers = read_markers(marker_path)
    system, _ = build_system(resolved)
    model = system.models[0]
    parts = system.dynamics[0].parts

    error = None
    try:
        est = estimate(model, markers, gravity=resolved["gravity"],
                       parts=parts)
        q = est.q
        diag = {"converged": True, "iterations": est.iterations,
                "residual_norm": float(est.residual_norm)}
        multipliers = est.multipliers
    except SolverError as err:
        error = err
        q = (err.best[:model.dof] if err.best is not None
             else np.zeros(model.dof))
        diag = {"converged": False, "iterations": err.iterations,
                "residual_norm": float(err.residual_norm),
                "message": str(err)}
        multipliers = None

    L = model.geometry.length
    lines = ["node,s,kappa_x_1_per_m,kappa_y_1_per_m,kappa_z_1_per_m,"
             "stretch,shear_y,shear_z"]
    for k in range(model.n + 1):
        s = k / model.n
        xi = model.strain(q, s)
        lines.append(",".join(
            [str(k), _fmt(s)] + [_fmt(v / L) for v in xi[:3]]
            + [_fmt(v) for v in xi[3:]]))
    _write(out / "strain.csv", lines)

    lines = ["marker,s,kind,force_x_N,force_y_N,force_z_N,"
             "torque_x_N_m,torque_y_N_m,torque_z_N_m"]
    for k, mk in enumerate(markers):
        if multipliers is None:
            force, torque = np.zeros(3), np.zeros(3)
        elif mk.kind == "pose":
            torque, force = multipliers[k][:3], multipliers[k][3:]
        else:
            torque, force = np.zeros(3), multipliers[k]
        lines.append(",".join(
            [str(k), _fmt(mk.s), mk.kind]
            + [_fmt(v) for v in force] + [_fmt(v) for v in torque]))
    _write(out / "marker_forces.csv", lines)

    diag["markers"] = len(markers)
    diag["dof"] = model.dof
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(diag, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if error is not None:
        click.echo(f"error: {error}", err=True)
        return SOLVER_EXIT
    return 0


@click.group()
def main():
    """Soft rod simulation scenarios and marker-based strain estimation."""


def _exit(code):
    sys.exit(code)


@main.command("run")
@click.option("--scenario", "-s", required=True,
              type=click.Path(), help="Scenario YAML file.")
@click.option("--out", "-o", required=True, type=click.Path(),
              help="Output directory.")
@click.option("--seed", type=int, default=None,
              help="Seed recorded in the manifest; physics is deterministic.")
@click.option("--smoothing", default=None,
              help="Override the contact law: kind or kind=param.")
@click.option("--mu", type=float, default=None,
              help="Override the friction coefficient.")
def cmd_run(scenario, out, seed, smoothing, mu):
    """Simulate a scenario and write trajectory, contact, and summary files."""
    try:
        resolved = _load(scenario, mu, smoothing)
        if seed is not None:
            resolved["seed"] = seed
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        _exit(CONFIG_EXIT)
    _exit(run_scenario(resolved, out))


@main.command("sweep")
@click.option("--scenario", "-s", required=True, type=click.Path(),
              help="Base scenario YAML file.")
@click.option("--out", "-o", required=True, type=click.Path(),
              help="Output directory.")
@click.option("--n", "n_values", required=True,
              help="Comma-separated strain section counts, e.g. 8,16,32.")
@click.option("--smoothing", default=None,
              help="Override the contact law: kind or kind=param.")
@click.option("--mu", type=float, default=None,
              help="Override the friction coefficient.")
def cmd_sweep(scenario, out, n_values, smoothing, mu):
    """Compare final contact-load profiles while refining the strain grid."""
    try:
        resolved = _load(scenario, mu, smoothing)
        try:
            n_list = [int(v) for v in n_values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(
                f"--n expects comma-separated integers, got {n_values!r}")
        if not n_list:
            raise ConfigError("--n lists no section counts")
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        _exit(CONFIG_EXIT)
    _exit(run_sweep(resolved, n_list, out))


@main.command("observe")
@click.option("--markers", "-k", required=True, type=click.Path(),
              help="Marker table: rows s x y z [qw qx qy qz].")
@click.option("--rod", "-r", required=True, type=click.Path(),
              help="Scenario YAML file providing the rod and gravity.")
@click.option("--out", "-o", required=True, type=click.Path(),
              help="Output directory.")
def cmd_observe(markers, rod, out):
    """Reconstruct the static strain field pinned by a marker table."""
    try:
        _exit(run_observe(markers, rod, out))
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        _exit(CONFIG_EXIT)


@main.command("validate")
@click.option("--scenario", "-s", required=True, type=click.Path(),
              help="Scenario YAML file.")
def cmd_validate(scenario):
    """Check a scenario file against the schema and print its shape."""
    try:
        resolved = _load(scenario, None, None)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        _exit(CONFIG_EXIT)
    rods = resolved["rods"]
    click.echo(f"{resolved['name']}: {len(rods)} rod(s), "
               f"{len(resolved['obstacles'])} obstacle(s), "
               f"h={resolved['time']['h']:g} t_end={resolved['time']['t_end']:g} "
               f"mu={resolved['friction']['mu']:g} "
               f"smoothing={resolved['smoothing']['kind']}")
    _exit(0)


if __name__ == "__main__":
    main()
