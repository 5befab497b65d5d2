"""Command line front end: simulate, verify, spectrum, mesh.

Exit codes: 0 success, 1 solver or invariant failure, 2 usage/configuration
problems.  The JSON run configuration is documented in
docs/run-config.schema.json; unknown keys are rejected with their key path.
"""
from __future__ import annotations

import os

# honor the thread cap before anything pulls in a BLAS
_cap = os.environ.get("SLIPFSI_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import argparse
import json
import logging
import re
import sys

import numpy as np

from . import reporting
from .coupled import CoupledState, assemble_coupled
from .geometry import (TAG_OUTER, TAG_SOLID, DomainConfig, GeometryError,
                       RigidBody, RigidState, body_distance,
                       make_reference_geometry, read_mesh, write_mesh)
from .stokes import solve_steady_lifting
from .transform import CutoffPsi, advance_flow

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "slipfsi-config v1"


class ConfigError(Exception):
    """Configuration rejected; the message names the offending key path."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _reject_unknown(section: dict, allowed, path: str) -> None:
    for key in section:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key: {where}")


def _number(section, key, default, path, lower=None, upper=None,
            integer=False, strict=False):
    val = section.get(key, default)
    if val is None:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(f"{path}.{key}: expected an integer, got {val!r}")
    if lower is not None and (val <= lower if strict else val < lower):
        raise ConfigError(f"{path}.{key}: must be "
                          f"{'>' if strict else '>='} {lower}, got {val}")
    if upper is not None and val > upper:
        raise ConfigError(f"{path}.{key}: must be <= {upper}, got {val}")
    return int(val) if integer else float(val)


def _choice(section, key, default, path, allowed):
    val = section.get(key, default)
    if val not in allowed:
        raise ConfigError(f"{path}.{key}: expected one of {sorted(allowed)}, "
                          f"got {val!r}")
    return val


def _vec3(section, key, default, path):
    val = section.get(key, default)
    try:
        arr = [float(v) for v in val]
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}: expected 3 numbers, got {val!r}")
    if len(arr) != 3:
        raise ConfigError(f"{path}.{key}: expected 3 numbers, got {len(arr)}")
    return arr


def _section(raw, key, path=""):
    val = raw.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(f"{key}: expected an object, got {val!r}")
    return val


def _norm_geometry(g: dict) -> dict:
    _reject_unknown(g, {"kind", "solid_radius", "fluid_radius",
                        "refinement", "path"}, "geometry")
    kind = _choice(g, "kind", "builtin:shell", "geometry",
                   {"builtin:shell", "file"})
    out = {"kind": kind}
    if kind == "file":
        if "path" not in g:
            raise ConfigError("geometry.path: required for kind 'file'")
        out["path"] = str(g["path"])
        return out
    out["solid_radius"] = _number(g, "solid_radius", 1.0, "geometry",
                                  lower=0.0, strict=True)
    out["fluid_radius"] = _number(g, "fluid_radius", 4.0, "geometry",
                                  lower=0.0, strict=True)
    if out["fluid_radius"] <= out["solid_radius"]:
        raise ConfigError("geometry.fluid_radius: must exceed solid_radius")
    out["refinement"] = _number(g, "refinement", 0, "geometry",
                                lower=0, upper=3, integer=True)
    return out


def _norm_physics(p: dict) -> dict:
    _reject_unknown(p, {"viscosity", "alpha", "body", "slip"}, "physics")
    visc = _section(p, "viscosity", "physics")
    kind = _choice(visc, "kind", "constant", "physics.viscosity",
                   {"constant", "carreau", "power"})
    if kind == "constant":
        _reject_unknown(visc, {"kind", "mu0"}, "physics.viscosity")
        vout = {"kind": kind,
                "mu0": _number(visc, "mu0", 1.0, "physics.viscosity",
                               lower=0.0, strict=True)}
    else:
        _reject_unknown(visc, {"kind", "scale", "d"}, "physics.viscosity")
        vout = {"kind": kind,
                "scale": _number(visc, "scale", 2.0, "physics.viscosity",
                                 lower=0.0, strict=True),
                "d": _number(visc, "d", 3.0, "physics.viscosity",
                             lower=1.0, strict=True)}
    body = _section(p, "body", "physics")
    _reject_unknown(body, {"density"}, "physics.body")
    slip = _section(p, "slip", "physics")
    _reject_unknown(slip, {"law"}, "physics.slip")
    return {
        "viscosity": vout,
        "alpha": _number(p, "alpha", 1.0, "physics", lower=0.0),
        "body": {"density": _number(body, "density", 2.0, "physics.body",
                                    lower=0.0, strict=True)},
        "slip": {"law": _choice(slip, "law", "linear", "physics.slip",
                                {"linear", "speed_weighted"})},
    }


def _norm_initial(i: dict) -> dict:
    _reject_unknown(i, {"l0", "omega0", "velocity"}, "initial")
    l0 = _vec3(i, "l0", [0.0, 0.0, 0.0], "initial")
    w0 = _vec3(i, "omega0", [0.0, 0.0, 0.0], "initial")
    vel = _section(i, "velocity", "initial")
    kind = _choice(vel, "kind", "lifting", "initial.velocity",
                   {"zero", "lifting", "file"})
    out = {"kind": kind}
    if kind == "lifting":
        _reject_unknown(vel, {"kind", "l", "omega"}, "initial.velocity")
        out["l"] = _vec3(vel, "l", l0, "initial.velocity")
        out["omega"] = _vec3(vel, "omega", w0, "initial.velocity")
    elif kind == "file":
        _reject_unknown(vel, {"kind", "path"}, "initial.velocity")
        if "path" not in vel:
            raise ConfigError("initial.velocity.path: required for kind 'file'")
        out["path"] = str(vel["path"])
    else:
        _reject_unknown(vel, {"kind"}, "initial.velocity")
    return {"l0": l0, "omega0": w0, "velocity": out}


def _norm_numerics(n: dict) -> dict:
    _reject_unknown(n, {"dt", "horizon", "eta", "gamma", "tol", "maxit",
                        "walker_substeps", "route", "snapshot_every"},
                    "numerics")
    dt = _number(n, "dt", 0.01, "numerics", lower=0.0, strict=True)
    horizon = _number(n, "horizon", 0.1, "numerics", lower=0.0, strict=True)
    nsteps = round(horizon / dt)
    if nsteps < 1 or abs(nsteps * dt - horizon) > 1e-9 * horizon:
        raise ConfigError("numerics.horizon: must be a positive multiple of dt")
    return {
        "dt": dt,
        "horizon": horizon,
        "eta": _number(n, "eta", None, "numerics", lower=0.0),
        "gamma": _number(n, "gamma", 0.1, "numerics", lower=0.0, strict=True),
        "tol": _number(n, "tol", 1e-9, "numerics", lower=0.0, strict=True),
        "maxit": _number(n, "maxit", 12, "numerics", lower=1, integer=True),
        "walker_substeps": _number(n, "walker_substeps", 2, "numerics",
                                   lower=1, integer=True),
        "route": _choice(n, "route", "monolithic", "numerics",
                         {"monolithic", "volterra"}),
        "snapshot_every": _number(n, "snapshot_every", 5, "numerics",
                                  lower=0, integer=True),
    }


def normalize_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected an object")
    _reject_unknown(raw, {"schema", "geometry", "physics", "initial",
                          "numerics", "output"}, "")
    schema = raw.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"schema: unsupported {schema!r}")
    out_sec = _section(raw, "output")
    _reject_unknown(out_sec, {"dir"}, "output")
    return {
        "schema": CONFIG_SCHEMA,
        "geometry": _norm_geometry(_section(raw, "geometry")),
        "physics": _norm_physics(_section(raw, "physics")),
        "initial": _norm_initial(_section(raw, "initial")),
        "numerics": _norm_numerics(_section(raw, "numerics")),
        "output": {"dir": str(out_sec.get("dir", "out"))},
    }


def load_config(path: str) -> dict:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    cfg = normalize_config(raw)
    cfg["_base"] = os.path.dirname(os.path.abspath(path))
    return cfg


def parse_geometry_text(text: str) -> dict:
    """CLI geometry spec: builtin:shell(r,R,n) or a mesh file path."""
    m = re.fullmatch(r"builtin:shell\(\s*([^,\s]+)\s*,\s*([^,\s]+)\s*,"
                     r"\s*(\d+)\s*\)", text)
    if m:
        try:
            return _norm_geometry({"kind": "builtin:shell",
                                   "solid_radius": float(m.group(1)),
                                   "fluid_radius": float(m.group(2)),
                                   "refinement": int(m.group(3))})
        except ValueError:
            raise ConfigError(f"geometry: cannot parse {text!r}")
    if text.startswith("builtin:"):
        raise ConfigError(f"geometry: unknown builtin {text!r}; "
                          "expected builtin:shell(r,R,n)")
    return {"kind": "file", "path": text}


def _resolve(path: str, base: str | None) -> str:
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def build_domain(gcfg: dict, base: str | None = None) -> DomainConfig:
    if gcfg["kind"] == "builtin:shell":
        return make_reference_geometry(gcfg["solid_radius"],
                                       gcfg["fluid_radius"],
                                       gcfg["refinement"])
    mesh = read_mesh(_resolve(gcfg["path"], base))
    radii = {}
    spherical = True
    for tag in (TAG_SOLID, TAG_OUTER):
        ids = mesh.boundary_vertices(tag)
        if len(ids) == 0:
            raise ConfigError(f"geometry.path: mesh has no tag-{tag} boundary")
        r = np.linalg.norm(mesh.vertices[ids], axis=1)
        radii[tag] = float(r.mean())
        spherical = spherical and (np.ptp(r) <= 1e-8 * r.mean())
    return DomainConfig(solid_radius=radii[TAG_SOLID],
                        fluid_radius=radii[TAG_OUTER],
                        refinement=0, mesh=mesh, builtin_shell=spherical)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _initial_state(op, icfg: dict, base: str | None) -> CoupledState:
    from .picard import admissible_initial_state
    b = op.blocks
    m0 = np.array(icfg["l0"] + icfg["omega0"])
    vel = icfg["velocity"]
    if vel["kind"] == "zero":
        u_raw = np.zeros(b.n_free)
    elif vel["kind"] == "lifting":
        u_raw, _, _ = solve_steady_lifting(b, np.array(vel["l"]),
                                           np.array(vel["omega"]))
    else:
        u_raw = np.load(_resolve(vel["path"], base))
        if u_raw.shape != (b.n_free,):
            raise ConfigError(
                f"initial.velocity.path: expected shape ({b.n_free},), "
                f"got {u_raw.shape}")
    return admissible_initial_state(op, u_raw, m0)


def _auto_eta(op) -> float:
    from .spectral import spectrum
    rep = spectrum(op, k=4, with_vectors=False)
    eta = max(0.5 * rep.eta0, 0.0)
    log.info("decay weight from the spectrum: eta = %.6g", eta)
    return eta


def _write_snapshots(outdir, mesh, fm, every, times, vel_fn, p=None):
    if every < 1:
        return 0
    snapdir = os.path.join(outdir, "snapshots")
    os.makedirs(snapdir, exist_ok=True)
    count = 0
    for k in range(0, len(times), every):
        data = {"velocity": vel_fn(k), "jacobian": fm.det(k)}
        if p is not None:
            data["pressure"] = p[k]
        reporting.write_vtk_snapshot(
            os.path.join(snapdir, f"state_{k:04d}.vtk"),
            fm.X[k], mesh.tets, data, t=times[k])
        count += 1
    return count


def _run_newtonian(op, cfg, outdir, args):
    from . import picard as pc
    num = cfg["numerics"]
    b = op.blocks
    cutoff = CutoffPsi.for_domain(b.domain)
    state0 = _initial_state(op, cfg["initial"], cfg.get("_base"))
    eta = num["eta"] if num["eta"] is not None else _auto_eta(op)
    nsteps = round(num["horizon"] / num["dt"])
    res = pc.fixed_point_solve(op, cutoff, state0, num["dt"], nsteps,
                               eta=eta, tol=num["tol"], maxit=num["maxit"],
                               walker_substeps=num["walker_substeps"])
    series = reporting.run_series(op, res.times, res.u, res.m, res.h)

    beta = b.domain.gap
    growth = np.sqrt(0.5 / eta) if eta > 0 else None
    payload = {
        "status": res.status,
        "iterations": res.iterations,
        "eta": eta,
        "gamma": num["gamma"],
        "gamma0": (None if growth is None else
                   pc.gamma0(beta, growth, 2.0 * b.domain.solid_radius)),
        "min_distance": float(res.distances.min()),
        "contact_margin": 0.5 * beta,
    }
    payload.update(res.log.to_json_dict())

    motion = pc.physical_motion(res.times, res.m)
    fm = advance_flow(b.domain.mesh.vertices, motion, res.times, cutoff)

    def vel(k):
        return b.vertex_velocity(res.u[k]) @ res.Q[k].T

    _write_snapshots(outdir, b.domain.mesh, fm, num["snapshot_every"],
                     res.times, vel, p=res.p)
    if args.dump_flowmap:
        reporting.write_flowmap_csv(
            os.path.join(outdir, "flowmap.csv"), fm,
            b.domain.mesh.boundary_vertices(TAG_SOLID))
    if args.dump_state:
        np.savez(os.path.join(outdir, "state.npz"), times=res.times,
                 u=res.u, p=res.p, m=res.m, h=res.h, Q=res.Q)
    return res.status, series, payload


def _march_states(op, cfg, outdir, args, step_fn, extra_key, visc_fn=None,
                  slip_fn=None):
    """Shared driver for the fixed-domain paths: march step_fn over the
    horizon, tabulate, push snapshots along the rigid motion."""
    from . import picard as pc
    num = cfg["numerics"]
    b = op.blocks
    state = _initial_state(op, cfg["initial"], cfg.get("_base"))
    nsteps = round(num["horizon"] / num["dt"])
    times = num["dt"] * np.arange(nsteps + 1)
    u = np.zeros((nsteps + 1, b.n_free))
    p = np.zeros((nsteps + 1, b.nv))
    m = np.zeros((nsteps + 1, 6))
    u[0], m[0] = state.u, state.m
    infos = []
    ok = True
    for n in range(nsteps):
        state, sol, info = step_fn(state)
        u[n + 1], m[n + 1] = state.u, state.m
        if sol is not None:
            p[n + 1] = sol.p
        infos.append(info)
        ok = ok and info["converged"]

    h, Q = pc.rigid_frame(times, m)
    beta = b.domain.gap
    dists = np.array([body_distance(RigidState(h[k], Q[k], m[k, :3],
                                               m[k, 3:]), b.domain)
                      for k in range(nsteps + 1)])
    if not ok:
        status = pc.BLOWUP_NORM
    elif dists.min() < 0.5 * beta:
        status = pc.CONTACT
    else:
        status = pc.GLOBAL
    series = reporting.run_series(op, times, u, m, h, visc_fn=visc_fn,
                                  slip_fn=slip_fn)
    payload = {"status": status, "min_distance": float(dists.min()),
               "contact_margin": 0.5 * beta, extra_key: infos,
               "converged": ok}

    cutoff = CutoffPsi.for_domain(b.domain)
    motion = pc.physical_motion(times, m)
    fm = advance_flow(b.domain.mesh.vertices, motion, times, cutoff)

    def vel(k):
        return b.vertex_velocity(u[k]) @ Q[k].T

    _write_snapshots(outdir, b.domain.mesh, fm, num["snapshot_every"],
                     times, vel, p=p)
    if args.dump_flowmap:
        reporting.write_flowmap_csv(
            os.path.join(outdir, "flowmap.csv"), fm,
            b.domain.mesh.boundary_vertices(TAG_SOLID))
    if args.dump_state:
        np.savez(os.path.join(outdir, "state.npz"), times=times,
                 u=u, p=p, m=m, h=h, Q=Q)
    return status, series, payload


def _run_quasilinear(op, cfg, outdir, args):
    from .nonnewtonian import ViscosityModel, nonlinear_step, \
        sym_gradient_at_quad
    from .quadrature import tet_rule_deg8
    num = cfg["numerics"]
    v = cfg["physics"]["viscosity"]
    model = ViscosityModel(kind=v["kind"], scale=v["scale"], d=v["d"])
    b = op.blocks
    _, wts = tet_rule_deg8()
    wv = (b.vols[:, None] * wts[None, :])

    def visc_fn(u_k):
        Du = sym_gradient_at_quad(b, u_k)
        s = np.einsum("tqij,tqij->tq", Du, Du)
        return float((wv * model.evaluate(s)[0] * s).sum())

    def step(state):
        new, sol, slog = nonlinear_step(op, model, state, num["dt"],
                                        route=num["route"], tol=num["tol"])
        info = {"iterations": int(slog.iterations),
                "last_increment": float(slog.increments[-1]),
                "converged": bool(slog.converged)}
        return new, sol, info

    return _march_states(op, cfg, outdir, args, step, "sweeps",
                         visc_fn=visc_fn)


def _run_speed_slip(op, cfg, outdir, args):
    from .picard import _slip_functionals, nonlinear_slip_step
    num = cfg["numerics"]
    b = op.blocks

    def slip_fn(u_k, m_k):
        A1, A2E = _slip_functionals(b, u_k, m_k)
        jump = u_k - b.E @ m_k
        return float(jump @ (A1 @ u_k - A2E @ m_k))

    def step(state):
        new, info = nonlinear_slip_step(op, state, num["dt"],
                                        tol=min(num["tol"], 1e-11))
        rec = {"iterations": int(info.iterations),
               "boundary_residual": float(info.boundary_residual),
               "converged": bool(info.converged)}
        return new, None, rec

    return _march_states(op, cfg, outdir, args, step, "outer_sweeps",
                         slip_fn=slip_fn)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.geometry:
        cfg["geometry"] = parse_geometry_text(args.geometry)
        if cfg["geometry"]["kind"] == "file":
            cfg["geometry"]["path"] = os.path.abspath(cfg["geometry"]["path"])
    outdir = args.out or cfg["output"]["dir"]
    os.makedirs(outdir, exist_ok=True)

    domain = build_domain(cfg["geometry"], cfg.get("_base"))
    phys = cfg["physics"]
    body = RigidBody.uniform_ball(phys["body"]["density"],
                                  domain.solid_radius)
    visc = phys["viscosity"]
    mu0 = visc["mu0"] if visc["kind"] == "constant" else 0.5 * visc["scale"]
    op = assemble_coupled(domain, body, mu0=mu0, alpha=phys["alpha"])

    if phys["slip"]["law"] == "speed_weighted":
        if visc["kind"] != "constant":
            raise ConfigError("physics.slip.law: speed_weighted requires "
                              "constant viscosity")
        runner = _run_speed_slip
    elif visc["kind"] == "constant":
        runner = _run_newtonian
    else:
        runner = _run_quasilinear

    status, series, payload = runner(op, cfg, outdir, args)

    reporting.write_run_csv(os.path.join(outdir, "run.csv"), series)
    reporting.write_json_artifact(os.path.join(outdir, "contraction.json"),
                                  reporting.CONTRACTION_SCHEMA, payload)
    reporting.save_figure(reporting.fig_run(series),
                          os.path.join(outdir, "run.png"))
    reporting.save_figure(reporting.fig_contraction(payload),
                          os.path.join(outdir, "contraction.png"))
    if args.dump_operators:
        reporting.write_operator_dumps(os.path.join(outdir, "operators"),
                                       op, cfg["numerics"]["dt"])
    print(f"status {status}: {len(series) - 1} steps -> {outdir}")
    return 0 if status == "GLOBAL" else 1


# ---------------------------------------------------------------------------
# verify / spectrum / mesh
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    names = list(reporting.SUITES) if args.suite == "all" else [args.suite]
    report = reporting.run_suites(names, refinement=args.refinement)
    for line in reporting.report_lines(report):
        print(line)
    out = args.out
    reporting.write_json_artifact(out, reporting.VERIFY_SCHEMA, report)
    reporting.save_figure(reporting.fig_verify(report),
                          os.path.splitext(out)[0] + ".png")
    print(("all checks passed" if report["passed"] else "FAILURES above")
          + f" -> {out}")
    return 0 if report["passed"] else 1


def cmd_spectrum(args) -> int:
    from .spectral import sector_bound, spectrum
    if args.config:
        cfg = load_config(args.config)
        gcfg, phys = cfg["geometry"], cfg["physics"]
        base = cfg.get("_base")
    else:
        gcfg = parse_geometry_text(args.geometry)
        phys = _norm_physics({"alpha": args.alpha,
                              "viscosity": {"kind": "constant",
                                            "mu0": args.mu0}})
        base = None
    domain = build_domain(gcfg, base)
    body = RigidBody.uniform_ball(phys["body"]["density"],
                                  domain.solid_radius)
    visc = phys["viscosity"]
    mu0 = visc["mu0"] if visc["kind"] == "constant" else 0.5 * visc["scale"]
    op = assemble_coupled(domain, body, mu0=mu0, alpha=phys["alpha"])

    rep = spectrum(op, k=args.count)
    eta_line = args.eta if args.eta is not None else 0.5 * rep.eta0
    payload = rep.to_json_dict()
    if eta_line > 0:
        bound, grid, norms = sector_bound(op, eta_line)
        payload.update(sector_eta=eta_line, sector_bound=float(bound),
                       grid=[float(y) for y in grid],
                       resolvent_norms=[float(v) for v in norms])
    reporting.write_json_artifact(args.out, reporting.SPECTRUM_SCHEMA, payload)
    reporting.save_figure(reporting.fig_spectrum(rep.eigenvalues, rep.eta0),
                          os.path.splitext(args.out)[0] + ".png")
    print(f"abscissa {-rep.eta0:.6g} (eta0 {rep.eta0:.6g}) -> {args.out}")
    return 0 if rep.eta0 > 0 else 1


def cmd_mesh(args) -> int:
    gcfg = parse_geometry_text(args.geometry)
    domain = build_domain(gcfg)
    write_mesh(domain.mesh, args.out)
    q = domain.mesh.quality_report()
    print(f"wrote {args.out}: {q['n_vertices']} vertices, "
          f"{q['n_tets']} tets, volume {q['volume']:.6g}, "
          f"max aspect {q['aspect_max']:.4g}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="slipfsi",
        description="Rigid body in a viscous incompressible fluid with "
                    "Navier slip: simulation and verification tools.")
    ap.add_argument("-v", "--verbose", action="store_true",
                    help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="command")

    sim = sub.add_parser("simulate", help="run a configured simulation")
    sim.add_argument("--config", required=True, help="JSON run configuration")
    sim.add_argument("--geometry",
                     help="override: builtin:shell(r,R,n) or mesh file")
    sim.add_argument("--out", help="output directory (default from config)")
    sim.add_argument("--dump-operators", action="store_true",
                     help="write the assembled matrices in Matrix Market form")
    sim.add_argument("--dump-flowmap", action="store_true",
                     help="write vertex trajectories of the domain map as CSV")
    sim.add_argument("--dump-state", action="store_true",
                     help="write the full discrete trajectory as NPZ")
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="run the invariant suites")
    ver.add_argument("--suite", default="all",
                     choices=["all", *reporting.SUITES])
    ver.add_argument("--refinement", type=int, default=0)
    ver.add_argument("--out", default="verify.json")
    ver.set_defaults(func=cmd_verify)

    spec = sub.add_parser("spectrum",
                          help="rightmost eigenvalues of the evolution pencil")
    spec.add_argument("--config", help="reuse geometry/physics of a run config")
    spec.add_argument("--geometry", default="builtin:shell(1.0,4.0,0)")
    spec.add_argument("--alpha", type=float, default=1.0)
    spec.add_argument("--mu0", type=float, default=1.0)
    spec.add_argument("--count", type=int, default=12,
                      help="number of eigenvalues")
    spec.add_argument("--eta", type=float,
                      help="abscissa offset for the resolvent-line bound "
                           "(default: half the decay margin)")
    spec.add_argument("--out", default="spectrum.json")
    spec.set_defaults(func=cmd_spectrum)

    msh = sub.add_parser("mesh", help="export a mesh")
    msh.add_argument("--geometry", default="builtin:shell(1.0,4.0,0)")
    msh.add_argument("--out", default="shell.mesh")
    msh.set_defaults(func=cmd_mesh)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        ap.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e.filename or e}", file=sys.stderr)
        return 2
    except GeometryError as e:
        print(f"geometry error: {e}", file=sys.stderr)
        return 2
    except Exception as e:                      # solver-side failure
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
