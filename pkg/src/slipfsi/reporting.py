"""Artifact writers and verification suites shared by the CLI and the tests.

Delimited artifacts (CSV, JSON) all start with a schema tag so downstream
tooling can refuse files it does not understand; figures are rendered with
the Agg canvas directly, keeping matplotlib's global state untouched.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.io as sio

from .coupled import CoupledOperator, CoupledState, assemble_coupled, \
    integrate_linear, monolithic_matrix, solve_resolvent
from .geometry import TAG_SOLID, RigidBody, make_reference_geometry
from .transform import CutoffPsi, FlowMap, advance_flow, eval_lambda

log = logging.getLogger(__name__)

RUN_SCHEMA = "slipfsi-run v1"
CONTRACTION_SCHEMA = "slipfsi-contraction v1"
SPECTRUM_SCHEMA = "slipfsi-spectrum v1"
VERIFY_SCHEMA = "slipfsi-verify v1"
SNAPSHOT_SCHEMA = "slipfsi-snapshot v1"
FLOWMAP_SCHEMA = "slipfsi-flowmap v1"

RUN_COLUMNS = ("t", "lx", "ly", "lz", "wx", "wy", "wz",
               "hx", "hy", "hz", "energy", "visc_dissipation",
               "slip_dissipation", "u_norm")


# ---------------------------------------------------------------------------
# time series
# ---------------------------------------------------------------------------

def run_series(op: CoupledOperator, times: np.ndarray, u: np.ndarray,
               m: np.ndarray, h: np.ndarray,
               visc_fn=None, slip_fn=None) -> np.ndarray:
    """Tabulate the per-level diagnostics of a trajectory.

    Columns follow RUN_COLUMNS.  visc_fn / slip_fn, if given, replace the
    quadratic forms of the constant-coefficient operator with
    model-specific dissipations evaluated on the discrete state.
    """
    b = op.blocks
    n = len(times)
    out = np.empty((n, len(RUN_COLUMNS)))
    for k in range(n):
        state = CoupledState(u=u[k], m=m[k])
        jump = u[k] - b.E @ m[k]
        if visc_fn is None:
            d_visc = float(u[k] @ (b.A_mu @ u[k]))
        else:
            d_visc = float(visc_fn(u[k]))
        if slip_fn is None:
            d_slip = float(jump @ (b.A_slip @ jump))
        else:
            d_slip = float(slip_fn(u[k], m[k]))
        out[k] = [times[k], *m[k], *h[k],
                  op.energy(state),
                  d_visc,
                  d_slip,
                  float(np.sqrt(u[k] @ (b.M @ u[k])))]
    return out


def write_run_csv(path: str, series: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(f"# {RUN_SCHEMA}\n")
        f.write(",".join(RUN_COLUMNS) + "\n")
        for row in np.atleast_2d(series):
            f.write(",".join(f"{v:.16e}" for v in row) + "\n")


def read_run_csv(path: str) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if header != f"# {RUN_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {header!r}")
        f.readline()
        return np.loadtxt(f, delimiter=",", ndmin=2)


def write_json_artifact(path: str, schema: str, payload: dict) -> None:
    doc = {"schema": schema}
    doc.update(payload)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, default=_json_default)
        f.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)!r}")


# ---------------------------------------------------------------------------
# VTK snapshots (legacy ASCII unstructured grid)
# ---------------------------------------------------------------------------

def write_vtk_snapshot(path: str, points: np.ndarray, tets: np.ndarray,
                       point_data: dict[str, np.ndarray] | None = None,
                       t: float = 0.0) -> None:
    """One tetrahedral snapshot; vector fields are (n, 3), scalars (n,)."""
    points = np.asarray(points, dtype=float)
    tets = np.asarray(tets)
    npts, ntet = len(points), len(tets)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{SNAPSHOT_SCHEMA} t={t:.12g}\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {npts} double\n")
        for p in points:
            f.write(f"{p[0]:.12e} {p[1]:.12e} {p[2]:.12e}\n")
        f.write(f"CELLS {ntet} {5 * ntet}\n")
        for c in tets:
            f.write(f"4 {c[0]} {c[1]} {c[2]} {c[3]}\n")
        f.write(f"CELL_TYPES {ntet}\n")
        f.write("10\n" * ntet)
        if not point_data:
            return
        f.write(f"POINT_DATA {npts}\n")
        for name, arr in point_data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 2:
                f.write(f"VECTORS {name} double\n")
                for v in arr:
                    f.write(f"{v[0]:.12e} {v[1]:.12e} {v[2]:.12e}\n")
            else:
                f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                for v in arr:
                    f.write(f"{v:.12e}\n")


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------

def write_flowmap_csv(path: str, fm: FlowMap,
                      solid_ids: np.ndarray) -> None:
    """Vertex trajectories: position, volume factor, and on solid vertices
    the distance of the Jacobian from the rigid rotation."""
    with open(path, "w") as f:
        f.write(f"# {FLOWMAP_SCHEMA}\n")
        f.write("t,vertex,x0,x1,x2,det,rigid_defect\n")
        solid = np.zeros(fm.X.shape[1], dtype=bool)
        solid[solid_ids] = True
        for k, t in enumerate(fm.times):
            det = fm.det(k)
            defect = np.linalg.norm(fm.J[k] - fm.Q[k][None], axis=(1, 2))
            for v in range(fm.X.shape[1]):
                d = f"{defect[v]:.6e}" if solid[v] else ""
                x = fm.X[k, v]
                f.write(f"{t:.12g},{v},{x[0]:.12e},{x[1]:.12e},"
                        f"{x[2]:.12e},{det[v]:.12e},{d}\n")


def write_operator_dumps(outdir: str, op: CoupledOperator, dt: float) -> None:
    b = op.blocks
    os.makedirs(outdir, exist_ok=True)
    for name, mat in [("mass", b.M), ("viscous", b.A_mu), ("slip", b.A_slip),
                      ("divergence", b.B), ("normal_trace", b.Tn),
                      ("monolithic", monolithic_matrix(op, 1.0 / dt)),
                      ("rigid_inertia", op.I6), ("added_mass", op.M_add),
                      ("coupling", op.K)]:
        sio.mmwrite(os.path.join(outdir, name), np.asarray(mat)
                    if isinstance(mat, np.ndarray) else mat.tocoo())


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        s = f"{mark}  {self.name}: {self.value:.3e} (threshold {self.threshold:.1e})"
        return s if not self.note else s + f"  [{self.note}]"


def _below(name, value, threshold, note="") -> Check:
    return Check(name, float(value), float(threshold),
                 bool(value <= threshold), note)


def _above(name, value, threshold, note="") -> Check:
    return Check(name, float(value), float(threshold),
                 bool(value >= threshold), note)


def _default_operator(refinement: int = 0, alpha: float = 1.0):
    domain = make_reference_geometry(refinement=refinement)
    body = RigidBody.uniform_ball(2.0, domain.solid_radius)
    return assemble_coupled(domain, body, mu0=1.0, alpha=alpha)


def suite_transform(refinement: int = 0) -> list[Check]:
    domain = make_reference_geometry(refinement=refinement)
    cutoff = CutoffPsi.for_domain(domain)
    mesh = domain.mesh
    rng = np.random.default_rng(11)
    nsample = min(len(mesh.vertices), 200)
    pts = mesh.vertices[rng.choice(len(mesh.vertices), nsample, replace=False)]
    checks = []

    times = np.linspace(0.0, 0.05, 6)
    still = advance_flow(pts, lambda t: (np.zeros(3), np.zeros(3)),
                         times, cutoff)
    checks.append(_below("stationary map stays put",
                         np.abs(still.X[-1] - pts).max(), 1e-12))
    checks.append(_below("stationary volume factor",
                         np.abs(still.det(len(times) - 1) - 1.0).max(), 1e-12))

    l = np.array([0.06, -0.05, 0.04])
    w = np.array([0.03, 0.08, -0.04])
    times = np.linspace(0.0, 0.06, 61)
    fm = advance_flow(mesh.vertices, lambda t: (l, w), times, cutoff)
    drift = max(np.abs(fm.det(k) - 1.0).max() for k in (20, 40, 60))
    checks.append(_below("volume factor along the flow", drift, 1e-8))
    checks.append(_below("rigid rotation on the solid boundary",
                         fm.solid_defect(mesh.boundary_vertices(TAG_SOLID)),
                         1e-8))

    # probe inside the cutoff band, where the field is neither rigid nor zero
    hstep = 3e-5
    radii = np.linspace(cutoff.rho_one + 0.02, cutoff.rho_zero - 0.02, 10)
    dirs = rng.standard_normal((10, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    probe = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
    checks.append(_above("advecting field active in the cutoff band",
                         np.abs(eval_lambda(probe, l, w, np.zeros(3),
                                            cutoff)).max(), 1e-3))
    div = np.zeros(len(probe))
    for j in range(3):
        e = np.zeros(3)
        e[j] = hstep
        up = eval_lambda(probe + e, l, w, np.zeros(3), cutoff)
        dn = eval_lambda(probe - e, l, w, np.zeros(3), cutoff)
        div += (up[:, j] - dn[:, j]) / (2 * hstep)
    checks.append(_below("advecting field is solenoidal (sampled)",
                         np.abs(div).max(), 2e-6))
    return checks


def suite_operator(refinement: int = 0) -> list[Check]:
    op = _default_operator(refinement)
    b = op.blocks
    checks = []
    sym = abs(b.M - b.M.T).max() / abs(b.M).max()
    checks.append(_below("velocity mass matrix symmetric", sym, 1e-12))
    Ma = op.M_add
    checks.append(_below("added mass symmetric",
                         np.abs(Ma - Ma.T).max(), 1e-10))
    checks.append(_above("added mass positive semidefinite",
                         np.linalg.eigvalsh(0.5 * (Ma + Ma.T)).min(), -1e-10))
    checks.append(_below("rotations carry no added mass (centered ball)",
                         np.abs(Ma[:, 3:]).max(), 1e-8))
    cond = np.linalg.cond(op.K)
    checks.append(_below("inertia-plus-added-mass invertible", cond, 1e8,
                         note=f"cond {cond:.3e}"))

    lam = 0.6 + 0.9j
    rng = np.random.default_rng(3)
    f = rng.standard_normal(b.n_free)
    g = rng.standard_normal(6)
    sol_b = solve_resolvent(op, lam, f=f, g=g, method="block")
    sol_p = solve_resolvent(op, lam, f=f, g=g, method="primitive")
    diff = (np.linalg.norm(sol_b.u - sol_p.u) + np.linalg.norm(sol_b.m - sol_p.m))
    scale = np.linalg.norm(sol_b.u) + np.linalg.norm(sol_b.m)
    checks.append(_below("solve routes agree on one sample",
                         diff / scale, 1e-7))
    return checks


def suite_spectral(refinement: int = 0) -> list[Check]:
    from .spectral import spectrum, verify_spectrum
    op = _default_operator(refinement)
    rep = spectrum(op, k=6)
    checks = [_above("decay margin of the rightmost mode", rep.eta0, 1e-6,
                     note=f"abscissa {-rep.eta0:.6f}")]
    checks.append(_below("eigenpair residuals",
                         verify_spectrum(op, rep).max(), 1e-8))
    return checks


def suite_nonnewtonian(refinement: int = 0) -> list[Check]:
    from .nonnewtonian import ViscosityModel, integrate_nonlinear, \
        legendre_hadamard_min
    op = _default_operator(refinement)
    b = op.blocks
    m0 = np.array([0.03, 0.0, -0.02, 0.0, 0.025, 0.0])
    from .picard import admissible_initial_state
    state0 = admissible_initial_state(op, b.E @ m0, m0)

    lin = integrate_linear(op, state0, 1e-3, 5)
    model2 = ViscosityModel(kind="carreau", scale=2.0, d=2.0)
    quasi = integrate_nonlinear(op, model2, state0, 1e-3, 5)
    checks = [_below("quadratic-law pipeline collapses to the linear one",
                     np.abs(quasi.rigid - lin.rigid).max(), 1e-8)]

    rng = np.random.default_rng(5)
    Du = rng.standard_normal((10, 3, 3))
    Du = 0.5 * (Du + Du.transpose(0, 2, 1))
    for d in (1.5, 3.0):
        model = ViscosityModel(kind="carreau", scale=2.0, d=d)
        lh = min(legendre_hadamard_min(model, D, ndir=200, seed=7)
                 for D in Du)
        checks.append(_above(f"rank-one convexity at exponent d={d}",
                             lh, 1e-12))
        s = np.logspace(-6, 4, 33)
        ok = model.admissible(s).all()
        checks.append(_above(f"monotone stress law at d={d}", float(ok), 1.0))
    return checks


SUITES = {
    "transform": suite_transform,
    "operator": suite_operator,
    "spectral": suite_spectral,
    "nonnewtonian": suite_nonnewtonian,
}


def run_suites(names, refinement: int = 0) -> dict:
    report: dict = {"refinement": refinement, "suites": {}}
    ok = True
    for name in names:
        checks = SUITES[name](refinement)
        report["suites"][name] = [dataclasses.asdict(c) for c in checks]
        ok = ok and all(c.passed for c in checks)
    report["passed"] = ok
    return report


def report_lines(report: dict):
    for name, checks in report["suites"].items():
        yield f"[{name}]"
        for c in checks:
            yield "  " + Check(**c).line()


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def _figure(width=8.0, height=3.4):
    from matplotlib.figure import Figure
    return Figure(figsize=(width, height), dpi=140)


def save_figure(fig, path: str) -> None:
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    FigureCanvasAgg(fig)
    fig.savefig(path, bbox_inches="tight")


def fig_run(series: np.ndarray):
    fig = _figure()
    ax1, ax2 = fig.subplots(1, 2)
    t = series[:, 0]
    for j, lab in [(1, "l1"), (2, "l2"), (3, "l3"),
                   (4, "w1"), (5, "w2"), (6, "w3")]:
        ax1.plot(t, series[:, j], lw=1.2, label=lab)
    ax1.set_xlabel("t")
    ax1.set_title("rigid velocities")
    ax1.legend(fontsize=7, ncol=2)
    energy = series[:, 10]
    if (energy > 0).all():
        ax2.semilogy(t, energy, "k", lw=1.4)
    else:
        ax2.plot(t, energy, "k", lw=1.4)
    ax2.set_xlabel("t")
    ax2.set_title("energy")
    return fig


def fig_contraction(logdict: dict):
    fig = _figure()
    ax1, ax2 = fig.subplots(1, 2)
    inc = np.asarray(logdict.get("increments", []), dtype=float)
    if len(inc):
        plot1 = ax1.semilogy if (inc > 0).all() else ax1.plot
        plot1(np.arange(1, len(inc) + 1), inc, "o-")
    ax1.set_xlabel("iteration")
    ax1.set_title("update size")
    ratios = np.asarray(logdict.get("ratios", []), dtype=float)
    if len(ratios):
        ax2.plot(np.arange(2, len(ratios) + 2), ratios, "s-")
    ax2.axhline(1.0, color="r", lw=0.8, ls="--")
    ax2.set_ylim(0, None)
    ax2.set_xlabel("iteration")
    ax2.set_title("successive ratios")
    return fig


def fig_spectrum(eigenvalues, eta0: float):
    fig = _figure(5.0, 4.0)
    ax = fig.subplots()
    ev = np.asarray(eigenvalues, dtype=complex)
    ax.scatter(ev.real, ev.imag, s=18, zorder=3)
    ax.axvline(0.0, color="k", lw=0.8)
    ax.axvline(-eta0, color="r", lw=0.8, ls="--", label=f"abscissa {-eta0:.4f}")
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    ax.legend(fontsize=8)
    ax.set_title("evolution pencil spectrum")
    return fig


def fig_verify(report: dict):
    names, margins, colors = [], [], []
    for suite, checks in report["suites"].items():
        for c in checks:
            names.append(f"{suite}: {c['name']}")
            v, th = abs(c["value"]), abs(c["threshold"])
            margins.append(np.log10(max(th, 1e-300) / max(v, 1e-300)))
            colors.append("tab:green" if c["passed"] else "tab:red")
    fig = _figure(7.0, 0.32 * len(names) + 1.2)
    ax = fig.subplots()
    y = np.arange(len(names))
    ax.barh(y, margins, color=colors)
    ax.set_yticks(y, names, fontsize=7)
    ax.axvline(0.0, color="k", lw=0.8)
    ax.set_xlabel("log10 margin to threshold")
    ax.invert_yaxis()
    return fig
