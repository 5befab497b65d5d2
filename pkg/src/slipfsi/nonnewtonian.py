"""Shear-dependent stress laws and the frozen-coefficient iteration.

The stress is mu(|Du|^2) Du - pi I.  A constant law mu = 2 mu0 reproduces
the Newtonian operator exactly (the Newtonian form carries the factor two
explicitly).  The quasilinear solves freeze the coefficients at the previous
iterate: the linearized elastic tensor

    a_{ijkl}(D) = mu(s)/2 (d_ik d_jl + d_il d_jk) + 2 mu'(s) D_ij D_kl

is evaluated at s = |D|^2 of the frozen field, assembled into a viscous
matrix on the velocity space, and the linear monolithic step is repeated
until the iterates settle.  A fluid-only variant closes the six rigid
unknowns by successive updates instead of eliminating them monolithically;
its fixed point satisfies the same four-row system, so both routes agree.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coupled import CoupledOperator, CoupledSolution, CoupledState
from .quadrature import tet_rule_deg8
from .stokes import SaddleSolver, StokesBlocks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViscosityModel:
    """Pointwise law mu(s), s = |Du|^2, with exponent (d - 2) / 2.

    kind "constant" ignores d; "carreau" uses mu = scale (1 + s)^r which is
    smooth down to zero shear; "power" uses mu = scale s^r and is only
    admissible away from s = 0 when r < 0.
    """
    kind: str = "carreau"
    scale: float = 2.0
    d: float = 3.0

    def __post_init__(self):
        if self.kind not in ("constant", "carreau", "power"):
            raise ValueError(f"unknown viscosity kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("viscosity scale must be positive")

    @property
    def exponent(self) -> float:
        return 0.5 * (self.d - 2.0)

    def evaluate(self, s):
        """Returns (mu(s), mu'(s)) elementwise."""
        s = np.asarray(s, dtype=float)
        r = self.exponent
        if self.kind == "constant":
            return (np.full_like(s, self.scale), np.zeros_like(s))
        if self.kind == "carreau":
            mu = self.scale * (1.0 + s) ** r
            return mu, r * mu / (1.0 + s)
        if np.any(s <= 0):
            raise ValueError("power law needs strictly positive shear")
        mu = self.scale * s ** r
        return mu, r * mu / s

    def admissible(self, s) -> np.ndarray:
        """mu > 0 and mu + 2 s mu' > 0: monotonicity of the stress."""
        mu, dmu = self.evaluate(s)
        return (mu > 0) & (mu + 2.0 * np.asarray(s) * dmu > 0)


def newtonian_model(mu0: float = 1.0) -> ViscosityModel:
    """Constant law matching the Newtonian operator with viscosity mu0."""
    return ViscosityModel(kind="constant", scale=2.0 * mu0)


def stress(model: ViscosityModel, Du: np.ndarray) -> np.ndarray:
    """Viscous part mu(|Du|^2) Du for one or many symmetric matrices."""
    Du = np.asarray(Du, dtype=float)
    s = np.einsum("...ij,...ij->...", Du, Du)
    mu, _ = model.evaluate(s)
    return mu[..., None, None] * Du


def coefficients(model: ViscosityModel, Du: np.ndarray) -> np.ndarray:
    """Linearized tensor a_{ijkl} at one symmetric matrix Du."""
    Du = np.asarray(Du, dtype=float)
    s = float(np.einsum("ij,ij->", Du, Du))
    mu, dmu = model.evaluate(s)
    mu, dmu = float(mu), float(dmu)
    eye = np.eye(3)
    a = 0.5 * mu * (np.einsum("ik,jl->ijkl", eye, eye)
                    + np.einsum("il,jk->ijkl", eye, eye))
    a += 2.0 * dmu * np.einsum("ij,kl->ijkl", Du, Du)
    return a


def legendre_hadamard_min(model: ViscosityModel, Du: np.ndarray,
                          ndir: int = 1000, seed: int = 0) -> float:
    """Smallest sampled a xi eta xi eta over random unit direction pairs."""
    a = coefficients(model, Du)
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((ndir, 3))
    eta = rng.standard_normal((ndir, 3))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    vals = np.einsum("ijkl,ni,nj,nk,nl->n", a, xi, eta, xi, eta)
    return float(vals.min())


# ---------------------------------------------------------------------------
# quadrature-point fields on the velocity space
# ---------------------------------------------------------------------------

def _quad_data(blocks: StokesBlocks):
    bary, wts = tet_rule_deg8()
    # bubble gradient at each point: 256 sum_k (prod_{j != k} lam_j) g_k
    nq = len(wts)
    cof = np.empty((nq, 4))
    for k in range(4):
        cols = [j for j in range(4) if j != k]
        cof[:, k] = bary[:, cols].prod(axis=1)
    hb = 256.0 * np.einsum("qk,tki->tqi", cof, blocks.grads)
    return bary, wts, hb


def sym_gradient_at_quad(blocks: StokesBlocks, u: np.ndarray) -> np.ndarray:
    """Symmetric gradient of a velocity field at the volume quadrature
    points; shape (ntets, nq, 3, 3)."""
    _, wts, hb = _quad_data(blocks)
    tets = blocks.domain.mesh.tets
    uv = blocks.vertex_velocity(u)           # (nv, 3)
    ub = blocks.bubble_coefficients(u)       # (nt, 3)
    Gv = np.einsum("tAc,tAi->tci", uv[tets], blocks.grads)
    G = Gv[:, None, :, :] + np.einsum("tc,tqi->tqci", ub, hb)
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def frozen_viscous_matrix(blocks: StokesBlocks, model: ViscosityModel,
                          Du_star: np.ndarray | None = None,
                          tangent: bool = False) -> sp.csr_matrix:
    """Viscous matrix with coefficients frozen at Du_star, free-restricted.

    tangent=False assembles int mu(s*) Dv:Dw - the matrix whose fixed-point
    sweep solves the nonlinear problem, since evaluating it at its own
    field reproduces the nonlinear form exactly.  tangent=True adds the
    rank-one derivative part 2 mu'(s*) (Du*:Dv)(Du*:Dw), i.e. the full
    Gateaux derivative of the viscous operator.

    Du_star is a quadrature-point field as produced by sym_gradient_at_quad;
    None freezes at zero shear (constant/carreau only).  For the constant
    law the result reproduces the Newtonian viscous matrix to roundoff: the
    quadrature is exact for every product of basis gradients.
    """
    mesh = blocks.domain.mesh
    nt, nv = blocks.nt, blocks.nv
    _, wts, hb = _quad_data(blocks)
    nq = len(wts)
    if Du_star is None:
        Du_star = np.zeros((nt, nq, 3, 3))
    s = np.einsum("tqij,tqij->tq", Du_star, Du_star)
    mu, dmu = model.evaluate(s)
    if not np.all(np.isfinite(mu)):
        raise ValueError("viscosity blew up at a quadrature point")
    wv = wts[None, :] * blocks.vols[:, None]          # (nt, nq)
    wmu = wv * mu

    g = blocks.grads                                   # (nt, 4, 3)
    # moments of mu*: scalar, against the bubble gradient, and its square
    P = wmu.sum(axis=1)                                # (nt,)
    Qm = np.einsum("tq,tqi->ti", wmu, hb)              # (nt, 3)
    R = np.einsum("tq,tqa,tqc->tac", wmu, hb, hb)      # (nt, 3, 3)

    eye = np.eye(3)
    Ke = np.zeros((nt, 5, 3, 5, 3))
    gd = np.einsum("tAi,tBi->tAB", g, g)
    # mu part, vertex-vertex: 1/2 (d_ca gA.gB + gA_a gB_c) weighted by P
    Ke[:, :4, :, :4, :] += 0.5 * (
        np.einsum("t,tAB,ca->tAcBa", P, gd, eye)
        + np.einsum("t,tAa,tBc->tAcBa", P, g, g))
    # mu part, vertex-bubble and transpose
    vb = 0.5 * (np.einsum("tAi,ti,ca->tAca", g, Qm, eye)
                + np.einsum("tAa,tc->tAca", g, Qm))
    Ke[:, :4, :, 4, :] += vb
    Ke[:, 4, :, :4, :] += vb.transpose(0, 3, 1, 2)
    # mu part, bubble-bubble
    Ke[:, 4, :, 4, :] += 0.5 * (np.einsum("tii,ca->tca", R, eye)
                                + R.transpose(0, 2, 1))
    if tangent:
        wnu = wv * (2.0 * dmu)
        Dh = np.einsum("tqci,tqi->tqc", Du_star, hb)   # (D* h) per point
        T0 = np.einsum("tq,tqci,tqaj->tciaj", wnu, Du_star, Du_star)
        T1 = np.einsum("tq,tqci,tqa->tcia", wnu, Du_star, Dh)
        T2 = np.einsum("tq,tqc,tqa->tca", wnu, Dh, Dh)
        Ke[:, :4, :, :4, :] += np.einsum("tciaj,tAi,tBj->tAcBa", T0, g, g)
        vb1 = np.einsum("tcia,tAi->tAca", T1, g)
        Ke[:, :4, :, 4, :] += vb1
        Ke[:, 4, :, :4, :] += vb1.transpose(0, 3, 1, 2)
        Ke[:, 4, :, 4, :] += T2.transpose(0, 2, 1)

    tets = mesh.tets
    vdofs = (3 * tets[:, :, None] + np.arange(3)).reshape(nt, 12)
    bdofs = 3 * nv + 3 * np.arange(nt)[:, None] + np.arange(3)
    d15 = np.concatenate([vdofs, bdofs], axis=1)
    KeF = Ke.reshape(nt, 15, 15)
    rows = np.broadcast_to(d15[:, :, None], (nt, 15, 15))
    cols = np.broadcast_to(d15[:, None, :], (nt, 15, 15))
    A_full = sp.coo_matrix((KeF.ravel(), (rows.ravel(), cols.ravel())),
                           shape=(blocks.n_full, blocks.n_full)).tocsr()
    return A_full[blocks.free_dofs][:, blocks.free_dofs].tocsr()


def viscous_residual(blocks: StokesBlocks, model: ViscosityModel,
                     u: np.ndarray) -> np.ndarray:
    """Weak nonlinear viscous operator: v -> int mu(|Du|^2) Du : Dv.

    Assembled pointwise from the stress, independent of the matrix path.
    """
    _, wts, hb = _quad_data(blocks)
    Du = sym_gradient_at_quad(blocks, u)
    s = np.einsum("tqij,tqij->tq", Du, Du)
    mu, _ = model.evaluate(s)
    T = (wts[None, :] * blocks.vols[:, None] * mu)[..., None, None] * Du
    g = blocks.grads
    rv = np.einsum("tqci,tAi->tAc", T, g)              # vertex rows
    rb = np.einsum("tqci,tqi->tc", T, hb)              # bubble rows
    vert = np.zeros((blocks.nv, 3))
    np.add.at(vert, blocks.domain.mesh.tets, rv)
    r_full = np.concatenate([vert.ravel(), rb.ravel()])
    return r_full[blocks.free_dofs]


# ---------------------------------------------------------------------------
# linear steps with a supplied viscous matrix
# ---------------------------------------------------------------------------

class FrozenStepper:
    """Implicit Euler step of the coupled system with a given viscous block,
    solved through the primitive monolithic factorization."""

    def __init__(self, op: CoupledOperator, A_visc: sp.spmatrix, dt: float):
        from .coupled import monolithic_matrix
        self.op = op
        self.dt = dt
        self.lam = 1.0 / dt
        mat = monolithic_matrix(op, self.lam, A_visc=A_visc)
        self._lu = spla.splu(mat.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def step(self, state: CoupledState, f=None, g=None):
        op, b = self.op, self.op.blocks
        n, npr, ns = b.n_free, b.nv, b.n_solid
        bu = b.M @ (state.u * self.lam if f is None else state.u * self.lam + f)
        gm = op.I6 @ (state.m * self.lam)
        if g is not None:
            gm = gm + g
        rhs = np.zeros(n + 6 + npr + ns)
        rhs[:n] = bu
        rhs[n:n + 6] = gm
        sol = self._lu.solve(rhs)
        new = CoupledState(u=sol[:n], m=sol[n:n + 6], t=state.t + self.dt)
        out = CoupledSolution(u=sol[:n], m=sol[n:n + 6],
                              p=b.zero_mean(-sol[n + 6:n + 6 + npr]),
                              mu=sol[n + 6 + npr:], lam=self.lam)
        return new, out


class VolterraStepper:
    """Same step, but fluid-only solves with the rigid data retarded.

    Each pass solves the constrained fluid problem at the current rigid
    guess, reads off the slip and trace forces it exerts on the body, and
    updates the six rigid velocities from their momentum balance.  The
    fixed point satisfies the monolithic four-row system exactly, so the
    converged answer matches FrozenStepper up to the sweep tolerance.
    """

    def __init__(self, op: CoupledOperator, A_visc: sp.spmatrix, dt: float,
                 tol: float = 1e-12, maxit: int = 200):
        self.op = op
        self.dt = dt
        self.lam = 1.0 / dt
        self.tol = tol
        self.maxit = maxit
        b = op.blocks
        UL = (self.lam * b.M + A_visc + b.A_slip).tocsr()
        self._kkt = SaddleSolver(b, UL)
        E = b.E
        self._AE = np.asarray(b.A_slip @ E)
        self._Mm = self.lam * op.I6 + E.T @ self._AE
        self._sweeps = 0

    def step(self, state: CoupledState, f=None, g=None):
        op, b = self.op, self.op.blocks
        bu = b.M @ (state.u * self.lam if f is None else state.u * self.lam + f)
        gm = op.I6 @ (state.m * self.lam)
        if g is not None:
            gm = gm + g
        m = state.m.copy()
        u = q = mu = None
        for it in range(self.maxit):
            u, q, mu = self._kkt.solve(rhs_u=bu + self._AE @ m,
                                       rhs_trace=b.G6 @ m)
            m_new = np.linalg.solve(self._Mm,
                                    gm + self._AE.T @ u + b.G6.T @ mu)
            delta = np.linalg.norm(m_new - m)
            m = m_new
            if delta <= self.tol * max(np.linalg.norm(m), 1e-300):
                break
        else:
            log.warning("rigid update did not settle in %d sweeps", self.maxit)
        self._sweeps = it + 1
        new = CoupledState(u=u, m=m, t=state.t + self.dt)
        out = CoupledSolution(u=u, m=m, p=b.zero_mean(-q), mu=mu, lam=self.lam)
        return new, out


# ---------------------------------------------------------------------------
# quasilinear driver
# ---------------------------------------------------------------------------

@dataclass
class SweepLog:
    """Per-time-step record of the frozen-coefficient iteration."""
    iterations: int
    increments: np.ndarray
    ratios: np.ndarray
    converged: bool


def _increment_norm(op: CoupledOperator, du: np.ndarray, dm: np.ndarray) -> float:
    b = op.blocks
    return float(np.sqrt(du @ (b.M @ du) + dm @ (op.I6 @ dm)))


def nonlinear_step(op: CoupledOperator, model: ViscosityModel,
                   state: CoupledState, dt: float, f=None, g=None,
                   route: str = "monolithic", tol: float = 1e-10,
                   maxit: int = 25) -> tuple[CoupledState, CoupledSolution, SweepLog]:
    """One implicit Euler step of the quasilinear system.

    Coefficients freeze at the latest iterate, starting from the previous
    time level; each sweep re-assembles the viscous matrix and solves one
    linear coupled step from the *same* old state.
    """
    b = op.blocks
    guess = CoupledState(u=state.u.copy(), m=state.m.copy(), t=state.t)
    increments, sol = [], None
    for it in range(maxit):
        Du = sym_gradient_at_quad(b, guess.u)
        A_visc = frozen_viscous_matrix(b, model, Du, tangent=False)
        if route == "monolithic":
            stepper = FrozenStepper(op, A_visc, dt)
        elif route == "volterra":
            stepper = VolterraStepper(op, A_visc, dt, tol=min(tol, 1e-12))
        else:
            raise ValueError(f"unknown route {route!r}")
        new, sol = stepper.step(state, f=f, g=g)
        inc = _increment_norm(op, new.u - guess.u, new.m - guess.m)
        increments.append(inc)
        guess = new
        scale = max(_increment_norm(op, new.u, new.m), 1e-300)
        if inc <= tol * scale:
            break
    increments = np.array(increments)
    ratios = increments[1:] / np.maximum(increments[:-1], 1e-300)
    converged = bool(increments[-1] <= tol * max(
        _increment_norm(op, guess.u, guess.m), 1e-300))
    if not converged:
        log.warning("frozen-coefficient sweep stalled: %s", increments[-5:])
    return guess, sol, SweepLog(iterations=len(increments),
                                increments=increments, ratios=ratios,
                                converged=converged)


@dataclass
class QuasilinearTrajectory:
    times: np.ndarray
    energy: np.ndarray
    rigid: np.ndarray
    iterations: np.ndarray
    final: CoupledState
    logs: list = field(default_factory=list)


def integrate_nonlinear(op: CoupledOperator, model: ViscosityModel,
                        state: CoupledState, dt: float, nsteps: int,
                        forcing=None, route: str = "monolithic",
                        tol: float = 1e-10) -> QuasilinearTrajectory:
    times = state.t + dt * np.arange(nsteps + 1)
    energy = np.empty(nsteps + 1)
    rigid = np.empty((nsteps + 1, 6))
    iters = np.zeros(nsteps + 1, dtype=int)
    energy[0] = op.energy(state)
    rigid[0] = state.m
    logs = []
    for k in range(nsteps):
        f = g = None
        if forcing is not None:
            f, g = forcing(times[k + 1])
        state, _, slog = nonlinear_step(op, model, state, dt, f=f, g=g,
                                        route=route, tol=tol)
        logs.append(slog)
        energy[k + 1] = op.energy(state)
        rigid[k + 1] = state.m
        iters[k + 1] = slog.iterations
    return QuasilinearTrajectory(times=times, energy=energy, rigid=rigid,
                                 iterations=iters, final=state, logs=logs)
