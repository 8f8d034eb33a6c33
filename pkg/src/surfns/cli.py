"""Command-line interface: ``surfns <verify|simulate|killing|stability|trace>``.

Configuration is an INI file with four sections; every key has a default and
can be overridden with ``--set section.key=value``.

[surface]
    kind        torus | sphere | ellipsoid                      (torus)
    n           grid intervals (torus: per direction), 16..512  (64)
    R, r        torus radii                                     (2.0, 1.0)
    radius      sphere radius                                   (1.0)
    a, b, c     ellipsoid semi-axes                             (1.3, 1.0, 0.7)
[physics]
    mu          surface shear viscosity                         (1.0)
    dt, t_end   time step and final time                        (1e-3, 1.0)
    scheme      imex1 | imex2                                   (imex2)
    tol         Krylov relative tolerance                       (1e-10)
    cfl_max     advective CFL warning bound                     (0.5)
    auto_shrink reduce dt when the CFL bound is exceeded        (false)
[experiment]
    initial     killing-rotation | perturbed-killing | random-divfree | from-snapshot | zero
                                                                (killing-rotation)
    axis        rotation axis, comma separated                  (0,0,1)
    omega       angular velocity                                (1.0)
    eps         relative perturbation amplitude                 (0.01)
    seed        64-bit seed for all randomness                  (42)
    snapshot    path of a velocity snapshot (from-snapshot)     ()
    track_killing  add the distance-to-equilibria column        (false)
    n_probe     Killing probe block size                        (6)
    trace_x0    tracer start point                              (first node on the surface)
    trace_dt, trace_t  tracer step and duration                 (0.01, 6.283185307179586)
    refine      verify: refined resolution                      (1.5 n)
    corrupt_stencil  verify negative control (test hook)        (false)
[output]
    dir         output directory                                (surfns_out)
    cadence     diagnostics/snapshot cadence in steps           (10)
    snapshots   write velocity snapshots                        (true)

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 identity-suite failure.  Log level from SURFNS_LOG (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

log = logging.getLogger("surfns")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IDENTITY = 0, 2, 3, 4

DEFAULTS = {
    "surface": {"kind": "torus", "n": "64", "R": "2.0", "r": "1.0", "radius": "1.0",
                "a": "1.3", "b": "1.0", "c": "0.7"},
    "physics": {"mu": "1.0", "dt": "1e-3", "t_end": "1.0", "scheme": "imex2", "tol": "1e-10",
                "cfl_max": "0.5", "auto_shrink": "false"},
    "experiment": {"initial": "killing-rotation", "axis": "0,0,1", "omega": "1.0",
                   "eps": "0.01", "seed": "42", "snapshot": "", "track_killing": "false",
                   "n_probe": "6", "trace_x0": "", "trace_dt": "0.01",
                   "trace_t": repr(2 * math.pi), "refine": "", "corrupt_stencil": "false"},
    "output": {"dir": "surfns_out", "cadence": "10", "snapshots": "true"},
}
INITIALS = ("killing-rotation", "perturbed-killing", "random-divfree", "from-snapshot", "zero")
KINDS = ("torus", "sphere", "ellipsoid")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    surface: dict
    physics: dict
    experiment: dict
    output: dict
    command: str = "simulate"
    raw: dict = field(default_factory=dict)

    @property
    def out_dir(self) -> Path:
        return Path(self.output["dir"])


def _floats(text, n, key):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {n} comma-separated numbers, got {text!r}") from exc
    if len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def load_config(path=None, overrides=(), command="simulate", output=None) -> RunConfig:
    """Merge defaults, the INI file and ``section.key=value`` overrides, then validate."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        cp.set(section, key, value)
    if output is not None:
        cp.set("output", "dir", str(output))
    for section in cp.sections():
        unknown = set(cp[section]) - set(DEFAULTS.get(section, {}))
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    raw = {s: dict(cp[s]) for s in DEFAULTS}
    try:
        s, p, e, o = cp["surface"], cp["physics"], cp["experiment"], cp["output"]
        surface = {"kind": s["kind"], "n": s.getint("n"), "R": s.getfloat("R"),
                   "r": s.getfloat("r"), "radius": s.getfloat("radius"),
                   "a": s.getfloat("a"), "b": s.getfloat("b"), "c": s.getfloat("c")}
        physics = {"mu": p.getfloat("mu"), "dt": p.getfloat("dt"), "t_end": p.getfloat("t_end"),
                   "scheme": p["scheme"], "tol": p.getfloat("tol"),
                   "cfl_max": p.getfloat("cfl_max"), "auto_shrink": p.getboolean("auto_shrink")}
        experiment = {
            "initial": e["initial"], "axis": _floats(e["axis"], 3, "experiment.axis"),
            "omega": e.getfloat("omega"), "eps": e.getfloat("eps"), "seed": e.getint("seed"),
            "snapshot": e["snapshot"], "track_killing": e.getboolean("track_killing"),
            "n_probe": e.getint("n_probe"),
            "trace_x0": _floats(e["trace_x0"], 3, "experiment.trace_x0") if e["trace_x0"] else None,
            "trace_dt": e.getfloat("trace_dt"), "trace_t": e.getfloat("trace_t"),
            "refine": e.getint("refine") if e["refine"] else None,
            "corrupt_stencil": e.getboolean("corrupt_stencil"),
        }
        output_ = {"dir": o["dir"], "cadence": o.getint("cadence"),
                   "snapshots": o.getboolean("snapshots")}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if surface["kind"] not in KINDS:
        raise ConfigError(f"surface.kind must be one of {KINDS}")
    if not 16 <= surface["n"] <= 512:
        raise ConfigError(f"surface.n must lie in [16, 512], got {surface['n']}")
    if experiment["refine"] is not None and not 16 <= experiment["refine"] <= 512:
        raise ConfigError("experiment.refine must lie in [16, 512]")
    if physics["scheme"] not in ("imex1", "imex2"):
        raise ConfigError("physics.scheme must be imex1 or imex2")
    if physics["mu"] <= 0 or physics["dt"] <= 0 or physics["t_end"] < 0:
        raise ConfigError("need mu > 0, dt > 0 and t_end >= 0")
    if not 0 < physics["tol"] <= 1e-2:
        raise ConfigError("physics.tol must lie in (0, 1e-2]")
    if experiment["initial"] not in INITIALS:
        raise ConfigError(f"experiment.initial must be one of {INITIALS}")
    if experiment["initial"] == "from-snapshot" and not Path(experiment["snapshot"]).is_file():
        raise ConfigError(f"snapshot {experiment['snapshot']!r} not found")
    if not 0 <= experiment["eps"] <= 0.1:
        raise ConfigError("experiment.eps must lie in [0, 0.1]")
    if not 0 <= experiment["seed"] < 2**64:
        raise ConfigError("experiment.seed must be a 64-bit unsigned integer")
    if output_["cadence"] < 1:
        raise ConfigError("output.cadence must be >= 1")
    try:
        Path(output_["dir"]).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc}") from exc
    return RunConfig(surface, physics, experiment, output_, command, raw)


# ---------------------------------------------------------------------------
# builders


def build_atlas(surface: dict, n: int | None = None):
    from .atlas import build_ellipsoid, build_sphere, build_torus

    n = surface["n"] if n is None else n
    if surface["kind"] == "torus":
        return build_torus(surface["R"], surface["r"], n, n)
    if surface["kind"] == "sphere":
        return build_sphere(surface["radius"], n)
    return build_ellipsoid(surface["a"], surface["b"], surface["c"], n)


def sim_config(cfg: RunConfig):
    from .dynamics import SimConfig
    from .linsolve import KrylovConfig

    p = cfg.physics
    return SimConfig(mu=p["mu"], dt=p["dt"], t_end=p["t_end"], cadence=cfg.output["cadence"],
                     scheme=p["scheme"], krylov=KrylovConfig(tol=p["tol"]),
                     cfl_max=p["cfl_max"], auto_shrink=p["auto_shrink"])


def rotation_field(atlas, axis, omega):
    import numpy as np

    from .fields import TangentField

    w = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ConfigError("rotation axis must be nonzero")
    return TangentField(atlas, np.cross(omega * w / norm, atlas.geometry.x))


def initial_velocity(cfg: RunConfig, atlas, basis=None):
    """Velocity for the configured preset (basis needed for perturbed-killing)."""
    import numpy as np

    from .fields import TangentField, random_smooth_tangent
    from .helmholtz import helmholtz_project
    from .io import read_snapshot
    from .killing import perturbation_direction

    e = cfg.experiment
    kind = e["initial"]
    if kind == "zero":
        return TangentField.zeros(atlas)
    if kind == "killing-rotation":
        return rotation_field(atlas, e["axis"], e["omega"])
    if kind == "random-divfree":
        u, _ = helmholtz_project(random_smooth_tangent(atlas, np.random.default_rng(e["seed"])))
        return u
    if kind == "from-snapshot":
        u = read_snapshot(e["snapshot"], atlas)
        if not isinstance(u, TangentField):
            raise ConfigError("snapshot does not hold a tangent field")
        return u
    k = rotation_field(atlas, e["axis"], e["omega"])
    from .fields import norm_l2

    w = perturbation_direction(atlas, basis, e["seed"])
    return k + (e["eps"] * norm_l2(k)) * w


# ---------------------------------------------------------------------------
# commands


DIAG_COLUMNS = ["step", "t", "energy", "dissipation", "div_residual", "dist_to_E", "dt"]


def cmd_verify(cfg: RunConfig) -> int:
    from .io import write_csv, write_manifest
    from .verify import corrupted_plan, format_table, identity_suite

    n = cfg.surface["n"]
    n_ref = cfg.experiment["refine"] or 2 * int(round(0.75 * n))
    plan = corrupted_plan() if cfg.experiment["corrupt_stencil"] else None
    rows = identity_suite(lambda m: build_atlas(cfg.surface, m), n, n_ref, stencil_plan=plan)
    print(format_table(rows, n, n_ref))
    out = cfg.out_dir / "verify.csv"
    write_csv(out, [{"identity": r.name, "kind": r.kind, "err_base": r.errors[0],
                     "err_refined": r.errors[1], "order": r.order, "threshold": r.threshold,
                     "passed": int(r.passed)} for r in rows],
              ["identity", "kind", "err_base", "err_refined", "order", "threshold", "passed"])
    failed = [r.name for r in rows if not r.passed]
    write_manifest(cfg.out_dir / "manifest.json", cfg.raw, outputs=[out],
                   extra={"command": "verify", "failed": failed})
    if failed:
        print("FAILED identities: " + ", ".join(failed))
        return EXIT_IDENTITY
    print("all identities pass")
    return EXIT_OK


def _snapshot_writer(cfg, name="u"):
    from .io import write_snapshot

    written = []

    def cb(state, row):
        if cfg.output["snapshots"]:
            written.append(write_snapshot(cfg.out_dir / f"{name}_{state.step:06d}.snap", state.u))

    return cb, written


def cmd_simulate(cfg: RunConfig) -> int:
    from .dynamics import run
    from .io import format_float, write_csv, write_manifest
    from .killing import killing_basis

    atlas = build_atlas(cfg.surface)
    need_basis = cfg.experiment["track_killing"] or cfg.experiment["initial"] == "perturbed-killing"
    basis = killing_basis(atlas, cfg.experiment["n_probe"], seed=cfg.experiment["seed"]) \
        if need_basis else None
    u0 = initial_velocity(cfg, atlas, basis)
    cb, snaps = _snapshot_writer(cfg)
    track = basis if cfg.experiment["track_killing"] else None
    state, rows = run(sim_config(cfg), u0, basis=track, callback=cb)
    diag = write_csv(cfg.out_dir / "diagnostics.csv", rows, DIAG_COLUMNS)
    E0, E1 = rows[0]["energy"], rows[-1]["energy"]
    summary = [
        f"steps = {state.step}",
        f"t_end = {format_float(state.t)}",
        f"energy initial = {format_float(E0)}",
        f"energy final = {format_float(E1)}",
        f"relative energy change = {format_float((E1 - E0) / E0 if E0 else 0.0)}",
        f"max div residual = {format_float(max(r['div_residual'] for r in rows))}",
    ]
    (cfg.out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    inputs = [cfg.experiment["snapshot"]] if cfg.experiment["initial"] == "from-snapshot" else []
    write_manifest(cfg.out_dir / "manifest.json", cfg.raw, inputs=inputs, outputs=[diag] + snaps,
                   extra={"command": "simulate"})
    return EXIT_OK


def cmd_killing(cfg: RunConfig) -> int:
    from .io import format_float, write_csv, write_manifest, write_snapshot
    from .killing import killing_basis

    atlas = build_atlas(cfg.surface)
    basis = killing_basis(atlas, cfg.experiment["n_probe"], seed=cfg.experiment["seed"])
    rows = [{"index": i, "rayleigh_quotient": q, "accepted": int(i < basis.dim)}
            for i, q in enumerate(basis.ritz)]
    table = write_csv(cfg.out_dir / "killing.csv", rows, ["index", "rayleigh_quotient", "accepted"])
    snaps = []
    if cfg.output["snapshots"]:
        for i, k in enumerate(basis.fields):
            snaps.append(write_snapshot(cfg.out_dir / f"killing_{i}.snap", k))
    summary = [
        f"dim E = {basis.dim}",
        f"threshold = {format_float(basis.threshold)}",
        f"gap ratio = {format_float(basis.gap_ratio)}",
        f"ambiguous = {basis.ambiguous}",
        f"iterations = {basis.iterations}",
    ]
    (cfg.out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    write_manifest(cfg.out_dir / "manifest.json", cfg.raw, outputs=[table] + snaps,
                   extra={"command": "killing"})
    return EXIT_OK


def cmd_stability(cfg: RunConfig) -> int:
    from .io import write_csv, write_manifest
    from .killing import killing_basis, stability_experiment

    atlas = build_atlas(cfg.surface)
    basis = killing_basis(atlas, cfg.experiment["n_probe"], seed=cfg.experiment["seed"])
    k = rotation_field(atlas, cfg.experiment["axis"], cfg.experiment["omega"])
    rep = stability_experiment(atlas, k, cfg.experiment["eps"], sim_config(cfg), basis=basis,
                               seed=cfg.experiment["seed"])
    rows = [{"t": t, "distance": d, "energy": E, "dissipation": q}
            for t, d, E, q in zip(rep.times, rep.distances, rep.energies, rep.dissipations)]
    table = write_csv(cfg.out_dir / "stability.csv", rows, ["t", "distance", "energy", "dissipation"])
    (cfg.out_dir / "summary.txt").write_text(rep.summary() + "\n")
    print(rep.summary())
    write_manifest(cfg.out_dir / "manifest.json", cfg.raw, outputs=[table],
                   extra={"command": "stability"})
    return EXIT_NUMERICAL if rep.unstable else EXIT_OK


def cmd_trace(cfg: RunConfig) -> int:
    import numpy as np

    from .dynamics import recover_pressure
    from .io import format_float, write_csv, write_manifest
    from .killing import killing_basis
    from .tracer import bernoulli_check, pressure_along, streamline_pressure_check, trace

    atlas = build_atlas(cfg.surface)
    e = cfg.experiment
    basis = killing_basis(atlas, e["n_probe"], seed=e["seed"]) \
        if e["initial"] == "perturbed-killing" else None
    u = initial_velocity(cfg, atlas, basis)
    pi = recover_pressure(u, cfg.physics["mu"])
    x0 = e["trace_x0"]
    if x0 is None:
        x0 = atlas.geometry.x[atlas.halo.owned[0]]
    traj = trace(atlas, u, x0, e["trace_dt"], e["trace_t"])
    E, dev_E = bernoulli_check(traj, pi)
    p, dev_p = streamline_pressure_check(traj, pi)
    speed = traj.speed()
    rows = [{"s": s, "x": x[0], "y": x[1], "z": x[2], "speed": sp, "pi": q, "E_bernoulli": b}
            for s, x, sp, q, b in zip(traj.s, traj.points, speed, p, E)]
    table = write_csv(cfg.out_dir / "trajectory.csv", rows,
                      ["s", "x", "y", "z", "speed", "pi", "E_bernoulli"])
    scale = float(np.abs(pi.values[atlas.active]).max(initial=0.0))
    summary = [
        f"points = {len(traj.s)}",
        f"closure distance = {format_float(np.linalg.norm(traj.points[-1] - traj.points[0]))}",
        f"max Bernoulli deviation = {format_float(dev_E)}",
        f"relative Bernoulli deviation = {format_float(dev_E / abs(E[0]) if E[0] else dev_E)}",
        f"max pressure deviation along streamline = {format_float(dev_p)}",
        f"relative pressure deviation = {format_float(dev_p / scale if scale else dev_p)}",
        f"speed variation = {format_float(np.ptp(speed))}",
    ]
    (cfg.out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    write_manifest(cfg.out_dir / "manifest.json", cfg.raw, outputs=[table],
                   extra={"command": "trace"})
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "simulate": cmd_simulate, "killing": cmd_killing,
            "stability": cmd_stability, "trace": cmd_trace}


def _configure_logging():
    level = os.environ.get("SURFNS_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        log.warning("unknown SURFNS_LOG level %r, using warn", level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfns", description="Surface Navier-Stokes experiments.",
        epilog=__doc__.split("\n", 2)[2], formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="INI configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one configuration key")
    parser.add_argument("--threads", type=int, default=None,
                        help="threads for the numerical libraries (default: all cores)")
    parser.add_argument("--output", type=Path, help="output directory (overrides output.dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        # only effective before numpy is first imported (console-script entry)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    _configure_logging()
    try:
        cfg = load_config(args.config, args.overrides, args.command, args.output)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .atlas import AtlasError, GeometryError, ResolutionError
    from .dynamics import SimulationAborted
    from .io import SnapshotError, write_csv
    from .killing import EigenStagnation
    from .linsolve import IterativeFailure
    from .tracer import TraceAborted

    try:
        return COMMANDS[args.command](cfg)
    except (ConfigError, GeometryError, ResolutionError, SnapshotError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationAborted as exc:
        from .io import write_snapshot

        print(f"simulation aborted: {exc}", file=sys.stderr)
        write_snapshot(cfg.out_dir / "abort_state.snap", exc.state.u)
        if exc.diagnostics:
            write_csv(cfg.out_dir / "diagnostics.csv", exc.diagnostics, DIAG_COLUMNS)
        return EXIT_NUMERICAL
    except TraceAborted as exc:
        print(f"trace aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IterativeFailure, EigenStagnation, AtlasError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
