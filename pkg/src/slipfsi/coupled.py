"""Monolithic fluid--rigid-body operator on the fixed domain.

The unknown is a pair (u, m): free fluid velocity dofs together with the
six rigid velocities m = (l, omega).  The weak system couples them through
the slip form on the inner boundary and through the normal-trace constraint
Tn u = G m, with pressure and normal multipliers enforcing incompressibility
and the trace condition.  Everything here is linear with constant
coefficients; the quasilinear terms are applied as outer-iteration data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import DomainConfig, RigidBody
from .stokes import (SaddleSolver, StokesBlocks, assemble_stokes,
                     helmholtz_project, solve_steady_lifting)

log = logging.getLogger(__name__)


def body_inertia6(body: RigidBody) -> np.ndarray:
    """Block-diagonal 6x6 rigid inertia diag(m I, J)."""
    I6 = np.zeros((6, 6))
    I6[:3, :3] = body.mass * np.eye(3)
    I6[3:, 3:] = body.inertia
    return I6


@dataclass
class CoupledState:
    """Fluid dofs plus rigid velocities at one time level."""
    u: np.ndarray
    m: np.ndarray
    t: float = 0.0

    @property
    def l(self) -> np.ndarray:
        return self.m[:3]

    @property
    def omega(self) -> np.ndarray:
        return self.m[3:]


@dataclass
class CoupledSolution:
    """Resolvent output: velocities, rigid modes and both multipliers."""
    u: np.ndarray
    m: np.ndarray
    p: np.ndarray     # vertex pressure, zero mean, physical sign
    mu: np.ndarray    # normal-trace multiplier on the solid vertices
    lam: complex


@dataclass
class CoupledOperator:
    blocks: StokesBlocks
    body: RigidBody
    I6: np.ndarray                  # rigid inertia diag(m I, J)
    S: np.ndarray                   # (nfree, 6) steady liftings of the modes
    q_S: np.ndarray                 # (nv, 6) lifting pressure multipliers (code sign)
    mu_S: np.ndarray                # (ns, 6) lifting trace multipliers
    M_add: np.ndarray               # (6, 6) added-mass Gram of (I - P) S
    K: np.ndarray                   # I6 + M_add
    c2: np.ndarray                  # (6, 6) lifting dissipation Gram
    SM: np.ndarray = field(repr=False, default=None)    # (6, nfree) S^T M
    SMS: np.ndarray = field(repr=False, default=None)   # (6, 6) S^T M S
    _resolvents: dict = field(repr=False, default_factory=dict, compare=False)

    @property
    def n_free(self) -> int:
        return self.blocks.n_free

    def energy(self, state: CoupledState) -> float:
        b = self.blocks
        return float(0.5 * np.real(np.vdot(state.u, b.M @ state.u)
                                   + np.vdot(state.m, self.I6 @ state.m)))

    def dissipation(self, state: CoupledState) -> float:
        """2 mu |Du|^2 plus the slip dissipation of (u - rigid)."""
        b = self.blocks
        jump = state.u - b.E @ state.m
        return float(np.real(np.vdot(state.u, b.A_mu @ state.u)
                             + np.vdot(jump, b.A_slip @ jump)))

    def resolvent(self, lam: complex, method: str = "block") -> "ResolventSolver":
        key = (complex(lam), method)
        if key not in self._resolvents:
            self._resolvents[key] = ResolventSolver(self, lam, method=method)
        return self._resolvents[key]


def assemble_coupled(domain: DomainConfig, body: RigidBody, mu0: float = 1.0,
                     alpha: float = 1.0, blocks: StokesBlocks | None = None
                     ) -> CoupledOperator:
    if blocks is None:
        blocks = assemble_stokes(domain, mu0=mu0, alpha=alpha)
    S, P_lift, Mu_lift = solve_steady_lifting(blocks, modes=np.eye(6))
    q_S = -P_lift  # back to the multiplier sign used inside the saddle solves

    # Added mass: energy of the part of the lifting that the constrained
    # space cannot represent.  Rotational modes have zero normal data, hence
    # project onto themselves and contribute nothing.
    IPS = np.column_stack([S[:, j] - helmholtz_project(blocks, S[:, j])
                           for j in range(6)])
    M_add = IPS.T @ (blocks.M @ IPS)
    M_add = 0.5 * (M_add + M_add.T)

    SmE = S - blocks.E
    c2 = S.T @ (blocks.A_mu @ S) + SmE.T @ (blocks.A_slip @ SmE)
    c2 = 0.5 * (c2 + c2.T)

    I6 = body_inertia6(body)
    SM = (blocks.M @ S).T
    op = CoupledOperator(blocks=blocks, body=body, I6=I6, S=S, q_S=q_S,
                         mu_S=Mu_lift, M_add=M_add, K=I6 + M_add, c2=c2,
                         SM=SM, SMS=SM @ S)
    log.info("coupled operator: %d fluid dofs, added mass trace %.4g",
             blocks.n_free, np.trace(M_add[:3, :3]) / 3.0)
    return op


def monolithic_matrix(op: CoupledOperator, lam: complex,
                      A_visc: sp.spmatrix | None = None) -> sp.csc_matrix:
    """Primitive saddle system in the unknowns (u, m, q, mu).

    Row u:  lam M u + A_mu u + A_slip (u - E m) + B^T q + Tn^T mu = rhs_u
    Row m:  lam I6 m - E^T A_slip (u - E m) - G^T mu            = rhs_m
    Row q:  B u = 0
    Row mu: Tn u - G m = 0

    A_visc substitutes a different (e.g. frozen-coefficient) viscous block
    for A_mu.
    """
    b = op.blocks
    Aq = (b.A_mu if A_visc is None else A_visc) + b.A_slip
    E, G = b.E, b.G6
    AE = np.asarray(b.A_slip @ E)
    UL_uu = (lam * b.M + Aq).tocsr()
    UL_mm = lam * op.I6 + E.T @ AE
    rows = [
        [UL_uu, -AE, b.B.T, b.Tn.T],
        [-AE.T, UL_mm, None, -G.T],
        [b.B, None, None, None],
        [b.Tn, -G, None, None],
    ]
    mat = sp.bmat(rows, format="csc")
    if b.gauge_kernel is not None:
        z = np.concatenate([np.zeros(b.n_free + 6), b.gauge_kernel])
        zs = sp.csc_matrix(z[:, None])
        mat = (mat + b.gauge_sigma * (zs @ zs.T)).tocsc()
    return mat


def mass_blocks(op: CoupledOperator) -> sp.csc_matrix:
    """Singular mass pencil matching monolithic_matrix's unknown layout."""
    b = op.blocks
    n_mult = b.nv + b.n_solid
    return sp.block_diag([b.M, op.I6, sp.csc_matrix((n_mult, n_mult))],
                         format="csc")


class ResolventSolver:
    """Factorized solver for (lam B + C) x = rhs at one spectral parameter.

    method="primitive" factorizes the full saddle system; method="block"
    factorizes only the fluid saddle of lam M + A_mu + A_slip and closes the
    rigid unknowns through a 6x6 Schur complement built on the steady
    liftings.  Both produce the same solution; the block path reuses the
    lifting data and is the one exercised in time stepping.
    """

    def __init__(self, op: CoupledOperator, lam: complex, method: str = "block"):
        self.op = op
        self.lam = lam
        self.method = method
        b = op.blocks
        self._n, self._npr, self._ns = b.n_free, b.nv, b.n_solid
        complex_lam = bool(np.iscomplexobj(lam) and np.imag(lam) != 0)
        if method == "primitive":
            mat = monolithic_matrix(op, lam)
            if complex_lam:
                mat = mat.astype(np.complex128)
            self._lu = spla.splu(mat)
        elif method == "block":
            Aq = (lam * b.M + b.A_mu + b.A_slip).tocsr()
            if complex_lam:
                Aq = Aq.astype(np.complex128)
            self._kkt = SaddleSolver(b, Aq)
            # lam-dependent correction columns: response of the constrained
            # fluid to the mass loading of each lifted mode
            load = lam * (b.M @ op.S)
            cols = [self._kkt.solve(rhs_u=load[:, j]) for j in range(6)]
            self._W = np.column_stack([c[0] for c in cols])
            self._qW = np.column_stack([c[1] for c in cols])
            self._muW = np.column_stack([c[2] for c in cols])
            self._schur = (lam * (op.I6 + op.SMS)
                           - lam * (op.SM @ self._W) + op.c2)
        else:
            raise ValueError(f"unknown resolvent method {method!r}")

    def solve(self, f: np.ndarray | None = None, g: np.ndarray | None = None,
              weak_f: np.ndarray | None = None) -> CoupledSolution:
        """Solve for data (f, g): f pairs against the mass form, g is a
        generalized force on the rigid modes.  weak_f bypasses the mass
        pairing and is added to the fluid row as-is."""
        op, b = self.op, self.op.blocks
        n, npr, ns = self._n, self._npr, self._ns
        bu = np.zeros(n, dtype=complex if np.iscomplexobj(self.lam) else float)
        if f is not None:
            bu = bu + b.M @ f
        if weak_f is not None:
            bu = bu + weak_f
        gm = np.zeros(6, dtype=bu.dtype) if g is None else np.asarray(g)

        if self.method == "primitive":
            rhs = np.zeros(n + 6 + npr + ns, dtype=np.result_type(bu, gm, 1.0))
            rhs[:n] = bu
            rhs[n:n + 6] = gm
            sol = self._solve_vec(rhs)
            u = sol[:n]
            m = sol[n:n + 6]
            q = sol[n + 6:n + 6 + npr]
            mu = sol[n + 6 + npr:]
        else:
            ut, qt, mut = self._kkt.solve(rhs_u=bu)
            rhs_m = op.S.T @ bu + gm - self.lam * (op.SM @ ut)
            m = np.linalg.solve(self._schur, rhs_m)
            u = ut - self._W @ m + op.S @ m
            q = qt - self._qW @ m + op.q_S @ m
            mu = mut - self._muW @ m + op.mu_S @ m
        p = b.zero_mean(-q)
        return CoupledSolution(u=u, m=m, p=p, mu=mu, lam=self.lam)

    def _solve_vec(self, rhs: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(rhs) and not np.iscomplexobj(self._lu.U):
            return self._lu.solve(rhs.real) + 1j * self._lu.solve(rhs.imag)
        if not np.iscomplexobj(rhs) and np.iscomplexobj(self._lu.U):
            rhs = rhs.astype(np.complex128)
        return self._lu.solve(rhs)


def solve_resolvent(op: CoupledOperator, lam: complex,
                    f: np.ndarray | None = None, g: np.ndarray | None = None,
                    method: str = "block") -> CoupledSolution:
    return ResolventSolver(op, lam, method=method).solve(f=f, g=g)


def reconstruct_pressure(op: CoupledOperator, lam: complex, u: np.ndarray,
                         m: np.ndarray, f: np.ndarray | None = None,
                         weak_f: np.ndarray | None = None):
    """Recover (p, mu) from a velocity pair satisfying the constrained system.

    The fluid-row residual of (u, m) lies in the range of [B^T, Tn^T]; the
    mass-saddle solve splits it into the two multiplier contributions.  The
    returned pressure carries the physical sign and zero mean.
    """
    b = op.blocks
    r = -(lam * (b.M @ u) + b.A_mu @ u + b.A_slip @ (u - b.E @ m))
    if f is not None:
        r = r + b.M @ f
    if weak_f is not None:
        r = r + weak_f
    from .stokes import _kkt0_solver
    z, q, mu = _kkt0_solver(b).solve(rhs_u=r)
    scale = max(np.linalg.norm(r), 1e-300)
    defect = np.linalg.norm(b.M @ z) / scale
    if defect > 1e-6:
        log.warning("pressure reconstruction residual defect %.2e", defect)
    return b.zero_mean(-q), mu


def step_linear(op: CoupledOperator, state: CoupledState, dt: float,
                f: np.ndarray | None = None, g: np.ndarray | None = None
                ) -> tuple[CoupledState, CoupledSolution]:
    """One implicit Euler step of the linear evolution.

    Solves the resolvent system at lam = 1/dt with the previous state as
    mass-paired data; optional (f, g) add external forcing at the new level.
    """
    lam = 1.0 / dt
    solver = op.resolvent(lam, method="block")
    gm = op.I6 @ (state.m * lam)
    if g is not None:
        gm = gm + g
    fu = state.u * lam if f is None else state.u * lam + f
    sol = solver.solve(f=fu, g=gm)
    new = CoupledState(u=sol.u, m=sol.m, t=state.t + dt)
    return new, sol


@dataclass
class LinearTrajectory:
    times: np.ndarray
    energy: np.ndarray
    dissipation: np.ndarray
    rigid: np.ndarray      # (nsteps + 1, 6)
    final: CoupledState


def integrate_linear(op: CoupledOperator, state: CoupledState, dt: float,
                     nsteps: int, forcing=None) -> LinearTrajectory:
    """March the linear system, recording energy, dissipation and rigid data.

    forcing, if given, is called as forcing(t_new) -> (f, g) with either
    entry possibly None.
    """
    times = state.t + dt * np.arange(nsteps + 1)
    energy = np.empty(nsteps + 1)
    dissipation = np.empty(nsteps + 1)
    rigid = np.empty((nsteps + 1, 6))
    energy[0] = op.energy(state)
    dissipation[0] = op.dissipation(state)
    rigid[0] = np.real(state.m)
    for k in range(nsteps):
        f = g = None
        if forcing is not None:
            f, g = forcing(times[k + 1])
        state, _ = step_linear(op, state, dt, f=f, g=g)
        energy[k + 1] = op.energy(state)
        dissipation[k + 1] = op.dissipation(state)
        rigid[k + 1] = np.real(state.m)
    return LinearTrajectory(times=times, energy=energy, dissipation=dissipation,
                            rigid=rigid, final=state)
