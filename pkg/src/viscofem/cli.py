"""Command line entry point: scenario configuration, orchestration, and
file output.

Scenarios
---------
convergence : manufactured-solution sweep over (h, k, p); writes the
              error table CSV and prints observed rates.
conserve    : held-then-released cube; writes the energy ledger CSV.
seal        : radial shaft seal frequency sweep; writes min/max contact
              pressure per probe station.
single      : one manufactured run at the configured (h, k, p); writes
              the energy ledger, prints end-time errors, optional VTK.

The config file is INI-style sections of typed key = value entries; see
configs/example.cfg for the normative, fully commented reference. Exit
codes: 0 success, 2 config error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import facet_data, recover_nodal_stress, stress_from_gradients, von_mises
from .dynamics import (
    LinearSolver,
    OperatorSet,
    SolverError,
    State,
    TimeGrid,
    simulate,
    static_solve,
)
from .fespace import Constraints, DirichletBC, FeSpace, SlipBC
from .material import MaterialModel
from .mesh import build_annulus_mesh
from .verify import (
    ConserveConfig,
    conservation_experiment,
    convergence_study,
    error_norms,
)
from .vtkio import write_vtk


class ConfigError(ValueError):
    pass


# -- typed config access ----------------------------------------------------


class Section:
    def __init__(self, name, data):
        self.name = name
        self.data = dict(data)

    def _raw(self, key, default):
        if key in self.data:
            return self.data[key]
        if default is _REQUIRED:
            raise ConfigError(f"missing key '{key}' in section [{self.name}]")
        return default

    def get_float(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, (int, float)):
            return raw
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(
                f"key '{key}' in [{self.name}] must be a number, got {raw!r}"
            ) from None

    def get_int(self, key, default=None):
        val = self.get_float(key, default)
        if val is None:
            return None
        if val != int(val):
            raise ConfigError(f"key '{key}' in [{self.name}] must be an integer")
        return int(val)

    def get_bool(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"key '{key}' in [{self.name}] must be a boolean")

    def get_str(self, key, default=None):
        raw = self._raw(key, default)
        return raw if raw is None else str(raw).strip()

    def get_floats(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, (tuple, list)):
            return raw
        try:
            return tuple(float(tok) for tok in str(raw).replace(",", " ").split())
        except ValueError:
            raise ConfigError(
                f"key '{key}' in [{self.name}] must be a list of numbers"
            ) from None

    def get_ints(self, key, default=None):
        vals = self.get_floats(key, default)
        if vals is None:
            return None
        if any(v != int(v) for v in vals):
            raise ConfigError(f"key '{key}' in [{self.name}] must be integers")
        return tuple(int(v) for v in vals)


_REQUIRED = object()


@dataclass
class RunConfig:
    scenario: str
    sections: dict

    def section(self, name):
        return Section(name, self.sections.get(name, {}))


def parse_config(path):
    """Parse the INI-style run configuration."""
    import configparser

    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {name: dict(parser[name]) for name in parser.sections()}
    run = Section("run", sections.get("run", {}))
    scenario = run.get_str("scenario", None)
    if scenario not in (None, "convergence", "conserve", "seal", "single"):
        raise ConfigError(f"unknown scenario {scenario!r} in [run]")
    return RunConfig(scenario, sections)


def material_from_config(cfg: RunConfig) -> MaterialModel:
    sec = cfg.section("material")
    rho = sec.get_float("rho", _REQUIRED)
    mu = sec.get_float("mu")
    lam = sec.get_float("lam")
    E = sec.get_float("e")
    nu = sec.get_float("nu")
    arms = []
    arms_raw = sec.get_str("arms", "")
    if arms_raw:
        for tok in arms_raw.replace(",", " ").split():
            try:
                kappa, tau = tok.split(":")
                arms.append((float(kappa), float(tau)))
            except ValueError:
                raise ConfigError(
                    f"arm entry {tok!r} must look like kappa:tau"
                ) from None
    if mu is not None and lam is not None:
        return MaterialModel(rho, mu, lam, tuple(arms))
    if E is not None and nu is not None:
        return MaterialModel.from_engineering(rho, E, nu, tuple(arms))
    raise ConfigError("[material] needs either mu & lam or E & nu")


def solver_from_config(cfg: RunConfig) -> LinearSolver:
    sec = cfg.section("solver")
    return LinearSolver(
        method=sec.get_str("method", "auto"),
        rtol=sec.get_float("tolerance", 1e-12),
        cap_factor=sec.get_float("cap_factor", 10),
        direct_threshold=sec.get_int("direct_threshold", 3000),
    )


# -- contact pressure -------------------------------------------------------


def compute_contact_pressure(state: State, space: FeSpace, slip_label,
                             material: MaterialModel):
    """Nodal contact pressure on a slip surface, compression positive.

    The stress sigma = sigma_E(u0) + sum_m kappa_m dev(u_ve_m) is
    evaluated from element gradients at facet quadrature points; the
    quadrature average of -n.sigma.n per facet is area-averaged onto the
    surface nodes.

    Returns (node_indices, pressures).
    """
    try:
        facets = space.mesh.facets_with_label(slip_label)
    except KeyError as exc:
        raise ValueError(str(exc)) from None
    if len(facets) == 0:
        raise ValueError(f"no facets labelled {slip_label!r}")
    fd = facet_data(space, degree=2 * space.p, labels=slip_label)
    sigma = stress_from_gradients(
        fd.gradient(state.u0),
        [fd.gradient(u) for u in state.uve],
        material.mu,
        material.lam,
        [arm.kappa for arm in material.arms],
    )
    traction_n = np.einsum("fqab,fa,fb->fq", sigma, fd.normals, fd.normals)
    areas = fd.warea.sum(axis=1)
    facet_mean = -(fd.warea * traction_n).sum(axis=1) / areas

    acc_val = np.zeros(space.n_scalar_dofs)
    acc_area = np.zeros(space.n_scalar_dofs)
    for i, f in enumerate(fd.facets):
        nds = space.facet_scalar_dofs(int(f))
        acc_val[nds] += areas[i] * facet_mean[i]
        acc_area[nds] += areas[i]
    nodes = np.nonzero(acc_area > 0)[0]
    return nodes, acc_val[nodes] / acc_area[nodes]


# -- seal scenario ----------------------------------------------------------


@dataclass
class SealSweepConfig:
    frequencies: tuple = (1.0, 15.0)
    expansion: float = 0.01  # cylindrical expansion, fraction of r_in
    amplitude: float = 0.001  # orbit amplitude, fraction of r_in
    stations: tuple = (0.02, 0.25, 0.5)  # axial fractions of the length
    cycles: int = 3
    measure_cycles: int = 1
    steps_per_cycle: int = 40
    eccentricity: float = 1.0

    def __post_init__(self):
        if any(w <= 0 for w in self.frequencies):
            raise ConfigError("seal frequencies must be positive")
        if self.measure_cycles > self.cycles:
            raise ConfigError("measure_cycles must not exceed cycles")


def seal_normal_value(r_in, expansion, amplitude, omega, eccentricity=1.0):
    """Prescribed displacement along the stored inner-surface normal.

    The physical radial displacement is dR + orbit projection; the stored
    outward normal points toward the axis, so the prescribed frame value
    is its negative.
    """
    dr = expansion * r_in
    amp = amplitude * r_in

    def u_n(x, t):
        theta = np.arctan2(x[:, 1], x[:, 0])
        phase = 2.0 * np.pi * omega * t
        radial = dr + amp * (
            np.cos(theta) * np.cos(phase) + eccentricity * np.sin(theta) * np.sin(phase)
        )
        return -radial

    return u_n


def run_seal_frequency(space, ops, material, r_in, sweep: SealSweepConfig,
                       omega, solver, probe_nodes):
    """Simulate one frequency; returns per-probe (min, max) pressure over
    the measured final cycles."""
    u_n = seal_normal_value(
        r_in, sweep.expansion, sweep.amplitude, omega, sweep.eccentricity
    )
    con = Constraints(
        space, {"outer": DirichletBC((0.0, 0.0, 0.0)), "inner": SlipBC(u_n)}
    )
    u0 = static_solve(ops, con, solver=solver, t=0.0)
    state0 = State(0.0, np.zeros(space.n_dofs), u0,
                   tuple(np.zeros(space.n_dofs) for _ in material.arms))
    n_steps = sweep.cycles * sweep.steps_per_cycle
    grid = TimeGrid.uniform(0.0, sweep.cycles / omega, n_steps)
    measure_from = n_steps - sweep.measure_cycles * sweep.steps_per_cycle
    records = []
    count = [0]

    def probe(state):
        count[0] += 1
        if count[0] >= measure_from:
            nodes, p = compute_contact_pressure(state, space, "inner", material)
            lookup = dict(zip(nodes.tolist(), p))
            records.append([lookup[nd] for nd in probe_nodes])

    res = simulate(ops, con, grid, state0=state0, solver=solver, callback=probe)
    arr = np.array(records)
    return arr.min(axis=0), arr.max(axis=0), res.final


def seal_probe_nodes(space, stations, length):
    """Inner-surface node nearest (theta=0, z=frac*length) per station."""
    inner_nodes = space.label_nodes("inner")
    coords = space.dof_coords[inner_nodes]
    theta = np.abs(np.arctan2(coords[:, 1], coords[:, 0]))
    nodes = []
    for frac in stations:
        score = theta + np.abs(coords[:, 2] - frac * length) / max(length, 1e-30)
        nodes.append(int(inner_nodes[np.argmin(score)]))
    return nodes


def _seal_frequency_worker(args):
    geom, p, material, solver, sweep, omega = args
    r_in, r_out, length, divisions = geom
    mesh = build_annulus_mesh(r_in, r_out, length, divisions)
    space = FeSpace(mesh, p)
    ops = OperatorSet(space, material)
    probes = seal_probe_nodes(space, sweep.stations, length)
    return run_seal_frequency(
        space, ops, material, r_in, sweep, omega, solver, probes
    )


def seal_sweep(sweep: SealSweepConfig, cfg: RunConfig, out_dir: Path,
               threads=1):
    """Frequency sweep; writes omega,station,p_min,p_max rows."""
    geo = cfg.section("geometry")
    r_in = geo.get_float("r_inner", 0.006)
    r_out = geo.get_float("r_outer", 0.01)
    length = geo.get_float("length", 0.02)
    divisions = geo.get_ints("divisions", (4, 24, 5))
    p = cfg.section("discretization").get_int("p", 2)
    material = material_from_config(cfg)
    solver = solver_from_config(cfg)
    geom = (r_in, r_out, length, divisions)

    if threads > 1:
        import multiprocessing

        with multiprocessing.Pool(threads) as pool:
            results = pool.map(
                _seal_frequency_worker,
                [(geom, p, material, solver, sweep, w) for w in sweep.frequencies],
            )
        space = None
    else:
        mesh = build_annulus_mesh(r_in, r_out, length, divisions)
        space = FeSpace(mesh, p)
        ops = OperatorSet(space, material)
        probes = seal_probe_nodes(space, sweep.stations, length)
        results = [
            run_seal_frequency(
                space, ops, material, r_in, sweep, omega, solver, probes
            )
            for omega in sweep.frequencies
        ]
    rows = []
    for omega, (pmin, pmax, _) in zip(sweep.frequencies, results):
        for station, lo, hi in zip(sweep.stations, pmin, pmax):
            rows.append((omega, station, lo, hi))
    if cfg.section("output").get_int("vtk_stride", 0) and space is not None:
        for omega, (_, _, final) in zip(sweep.frequencies, results):
            vectors, scalars = _vtk_fields(space, final, material)
            nodes, p_vals = compute_contact_pressure(final, space, "inner", material)
            pressure = np.zeros(space.n_scalar_dofs)
            pressure[nodes] = p_vals
            scalars["contact_pressure"] = pressure[: space.mesh.n_vertices]
            write_vtk(
                space.mesh, out_dir / f"seal_omega_{omega:g}.vtk", vectors, scalars
            )
    path = out_dir / "seal_pressure.csv"
    with open(path, "w") as fh:
        fh.write("omega,station,p_min,p_max\n")
        for omega, station, lo, hi in rows:
            fh.write(
                f"{float(omega)!r},{float(station)!r},{float(lo)!r},{float(hi)!r}\n"
            )
    return path, rows


# -- scenario runners -------------------------------------------------------


def _vtk_fields(space, state, material):
    nv = space.mesh.n_vertices
    sigma = recover_nodal_stress(space, material, state.u0, state.uve)[:nv]
    return (
        {
            "displacement": state.u0.reshape(-1, 3)[:nv],
            "velocity": state.u1.reshape(-1, 3)[:nv],
        },
        {"von_mises": von_mises(sigma)},
    )


def run_convergence(cfg: RunConfig, out_dir: Path, threads=1, long_run=False):
    sec = cfg.section("convergence")
    if long_run:
        # full-resolution sweep: cubic elements, meshes down to h=1/5, and
        # timesteps down to 1/128 (roughly an hour of compute)
        default_h = tuple(1.0 / n for n in range(1, 6))
        default_k = tuple(0.5**i for i in range(8))
        default_p = (3,)
    else:
        default_h, default_k, default_p = (0.5, 0.25), (0.25, 0.125), (1,)
    hs = sec.get_floats("h", default_h)
    ks = sec.get_floats("k", default_k)
    ps = sec.get_ints("p", default_p)
    reference = sec.get_str("reference", "exact")
    end_time = cfg.section("time").get_float("t", 1.0)
    material = material_from_config(cfg)
    solver = solver_from_config(cfg)
    cases = [(h, k, p) for p in ps for h in hs for k in ks]
    table = convergence_study(
        material, cases, end_time=end_time, solver=solver, reference=reference,
        threads=threads,
    )
    path = out_dir / "convergence.csv"
    table.to_csv(path)
    print(f"wrote {path}")
    for axis in ("h", "k"):
        vals = {getattr(r, axis) for r in table.ok_rows()}
        if len(vals) > 1:
            for col in ("energy_error", "l2_error"):
                rates = table.rates(axis, col)
                pretty = ", ".join(
                    f"{r:.2f}{' (saturated)' if s else ''}" for r, s in rates
                )
                print(f"observed {col} rates vs {axis}: {pretty}")
    failures = [r for r in table.rows if r.failure]
    for r in failures:
        print(f"row h={r.h} k={r.k} p={r.p} failed: {r.failure}", file=sys.stderr)
    if failures:
        raise SolverError(f"{len(failures)} sweep rows failed")
    return 0


def run_conserve(cfg: RunConfig, out_dir: Path, threads=1, long_run=False):
    sec = cfg.section("conserve")
    geo = cfg.section("geometry")
    time_sec = cfg.section("time")
    config = ConserveConfig(
        n=geo.get_int("n", 5),
        p=cfg.section("discretization").get_int("p", 2),
        k=time_sec.get_float("k", 0.01),
        end_time=time_sec.get_float("t", 0.5),
        release_time=sec.get_float("release_time", 0.1),
        hold_span=sec.get_float("hold_span", 0.4),
        displacement=sec.get_floats("displacement", (0.0, 0.0, 0.2)),
        material=material_from_config(cfg),
        solver=solver_from_config(cfg),
    )
    result = conservation_experiment(config)
    if cfg.section("output").get_bool("csv", True):
        path = out_dir / "energy_ledger.csv"
        result.to_csv(path)
        print(f"wrote {path}")
    first = result.ledger[0]
    last = result.ledger[-1]
    total0 = first.total + first.dissipated
    drift = max(
        abs(rec.total + rec.dissipated - total0) / total0 for rec in result.ledger
    )
    print(f"initial energy {total0!r}, worst relative drift {drift:.3e}")
    print(
        f"final split: kinetic {last.kinetic:.6g} elastic {last.elastic:.6g} "
        f"viscoelastic {last.viscoelastic_total:.6g} dissipated {last.dissipated:.6g}"
    )
    return 0


def run_seal(cfg: RunConfig, out_dir: Path, threads=1, long_run=False):
    sec = cfg.section("seal")
    sweep = SealSweepConfig(
        frequencies=sec.get_floats("frequencies", (1.0, 15.0)),
        expansion=sec.get_float("expansion", 0.01),
        amplitude=sec.get_float("amplitude", 0.001),
        stations=sec.get_floats("stations", (0.02, 0.25, 0.5)),
        cycles=sec.get_int("cycles", 3),
        measure_cycles=sec.get_int("measure_cycles", 1),
        steps_per_cycle=sec.get_int("steps_per_cycle", 40),
        eccentricity=sec.get_float("eccentricity", 1.0),
    )
    path, rows = seal_sweep(sweep, cfg, out_dir, threads)
    print(f"wrote {path}")
    for omega, station, lo, hi in rows:
        print(f"omega={omega:g} station={station:g}: p in [{lo:.6g}, {hi:.6g}]")
    return 0


def run_single(cfg: RunConfig, out_dir: Path, threads=1, long_run=False):
    from .verify import ManufacturedSolution, unit_cube_problem

    geo = cfg.section("geometry")
    time_sec = cfg.section("time")
    n = geo.get_int("n", 4)
    p = cfg.section("discretization").get_int("p", 1)
    k = time_sec.get_float("k", 0.125)
    end_time = time_sec.get_float("t", 1.0)
    material = material_from_config(cfg)
    solver = solver_from_config(cfg)
    n_steps = int(round(end_time / k))
    if abs(n_steps * k - end_time) > 1e-10:
        raise ConfigError("timestep k must divide the end time T")
    ops, con = unit_cube_problem(material, n, p)
    exact = ManufacturedSolution(material)
    result = simulate(
        ops, con, TimeGrid.uniform(0.0, end_time, n_steps),
        loads=exact.loads(), solver=solver,
    )
    e_err, l2_err = error_norms(result.final, exact, ops)
    print(f"end-time energy error {e_err!r}")
    print(f"end-time L2 error {l2_err!r}")
    out = cfg.section("output")
    if out.get_bool("csv", True):
        path = out_dir / "energy_ledger.csv"
        with open(path, "w") as fh:
            fh.write("t,kinetic,elastic,viscoelastic_total,dissipated,total\n")
            for rec in result.ledger:
                fh.write(
                    f"{float(rec.t)!r},{float(rec.kinetic)!r},"
                    f"{float(rec.elastic)!r},{float(rec.viscoelastic_total)!r},"
                    f"{float(rec.dissipated)!r},{float(rec.total)!r}\n"
                )
        print(f"wrote {path}")
    if out.get_int("vtk_stride", 0):
        vectors, scalars = _vtk_fields(ops.space, result.final, material)
        vtk_path = out_dir / "single_final.vtk"
        write_vtk(ops.space.mesh, vtk_path, vectors, scalars)
        print(f"wrote {vtk_path}")
    return 0


_SCENARIOS = {
    "convergence": run_convergence,
    "conserve": run_conserve,
    "seal": run_seal,
    "single": run_single,
}


def run(cfg: RunConfig, out_dir, threads=1, long_run=False):
    """Execute the configured scenario; returns the process exit status.

    Outputs are deterministic for a fixed config and thread count."""
    if cfg.scenario not in _SCENARIOS:
        raise ConfigError(f"config must declare a scenario, got {cfg.scenario!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _SCENARIOS[cfg.scenario](cfg, out, threads=threads, long_run=long_run)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="viscofem",
        description="Dynamic simulation of generalized-Maxwell viscoelastic solids",
    )
    parser.add_argument("scenario", choices=sorted(_SCENARIOS))
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument(
        "--long", action="store_true",
        help="enable long-running presets (full-resolution sweeps)",
    )
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if cfg.scenario is not None and cfg.scenario != args.scenario:
            raise ConfigError(
                f"config declares scenario {cfg.scenario!r}, "
                f"command line asked for {args.scenario!r}"
            )
        out_dir = Path(
            args.out or cfg.section("output").get_str("directory", "out")
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        return _SCENARIOS[args.scenario](
            cfg, out_dir, threads=args.threads, long_run=args.long
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
