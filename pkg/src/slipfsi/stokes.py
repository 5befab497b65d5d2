"""Mixed finite elements for viscous flow with slip on the inner boundary.

Velocity: continuous piecewise-linear plus a cubic bubble per tetrahedron and
component.  Pressure: continuous piecewise-linear.  The outer boundary carries
a homogeneous Dirichlet condition (dofs eliminated); on the inner (solid)
boundary the normal trace is constrained nodally through separate rows, while
tangential slip enters the bilinear form as a weighted boundary mass.

Element integrals of barycentric monomials are evaluated in closed form,
so all volume blocks are exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import TAG_OUTER, TAG_SOLID, DomainConfig, GeometryError, Mesh
from .quadrature import tri_rule_deg4

logger = logging.getLogger(__name__)

BUBBLE = 256.0  # cubic bubble normalisation: value 1 at the barycentre

# closed-form element integrals (unit volume factor applied at assembly)
_M_VB = 8.0 / 105.0          # int lambda_i * bubble
_M_BB = 8192.0 / 51975.0     # int bubble^2
_C_BB = 4096.0 / 945.0       # int (d_a b)(d_c b) = _C_BB * sum_k g_k g_k^T
_B_BUB = 32.0 / 105.0        # int lambda_i * d_a b = -_B_BUB * g_i


def _element_geometry(mesh: Mesh):
    x = mesh.vertices[mesh.tets]
    E = x[:, 1:] - x[:, :1]
    vol = np.linalg.det(E) / 6.0
    ginv = np.linalg.inv(E)                      # columns: grad lambda_1..3
    g = np.empty((len(mesh.tets), 4, 3))
    g[:, 1:] = ginv.transpose(0, 2, 1)
    g[:, 0] = -g[:, 1:].sum(axis=1)
    return vol, g


@dataclass
class _SolidFacets:
    """Quadrature cache for the inner boundary."""
    facets: np.ndarray        # (nf, 3) vertex ids
    areas: np.ndarray
    flat_normals: np.ndarray  # (nf, 3), outward w.r.t. the fluid
    qb: np.ndarray            # (nq, 3) barycentric points
    qw: np.ndarray
    qpts: np.ndarray          # (nf, nq, 3)
    qnormals: np.ndarray      # (nf, nq, 3) pointwise unit normals
    owner_tet: np.ndarray     # (nf,)
    off_grad: np.ndarray      # (nf, 3) grad of the off-facet barycentric


@dataclass
class StokesBlocks:
    """Assembled operator blocks and dof bookkeeping for one domain."""
    domain: DomainConfig
    mu0: float
    alpha: float

    nv: int
    nt: int
    n_full: int
    free: np.ndarray            # bool mask over full velocity dofs
    full_to_free: np.ndarray
    free_dofs: np.ndarray
    solid_vertices: np.ndarray  # ids, fixed ordering for Tn rows
    solid_normals: np.ndarray   # (ns, 3) nodal unit normals (outward w.r.t. fluid)

    M: sp.csr_matrix            # free-restricted velocity mass
    A_mu: sp.csr_matrix         # 2*mu0 * int Du:Dv, free-restricted
    A_slip: sp.csr_matrix       # alpha * tangential boundary mass, free-restricted
    B: sp.csr_matrix            # (nv, nfree): (B u)_i = int lambda_i div u
    Tn: sp.csr_matrix           # (ns, nfree): nodal normal trace
    E: np.ndarray               # (nfree, 6) rigid-mode boundary interpolants
    G6: np.ndarray              # (ns, 6) nodal normal data of the rigid modes

    K_scalar: sp.csr_matrix     # P1 stiffness on all vertices (Neumann solves)
    p_load: np.ndarray          # (nv,): int lambda_i  (means, compatibility)
    volume: float

    vols: np.ndarray = field(repr=False, default=None)
    grads: np.ndarray = field(repr=False, default=None)
    facets: _SolidFacets = field(repr=False, default=None)
    M_full: sp.csr_matrix = field(repr=False, default=None)
    A_mu_full: sp.csr_matrix = field(repr=False, default=None)
    A_slip_full: sp.csr_matrix = field(repr=False, default=None)
    B_full: sp.csr_matrix = field(repr=False, default=None)
    # multiplier gauge kernel over (pressure, trace) rows, present when the
    # inner surface is vertex transitive and the constraint rows degenerate
    gauge_kernel: np.ndarray | None = field(repr=False, default=None)
    gauge_sigma: float = field(repr=False, default=0.0)
    _kkt0_lu: object = field(repr=False, default=None, compare=False)
    _neumann_lu: object = field(repr=False, default=None, compare=False)

    @property
    def n_free(self) -> int:
        return len(self.free_dofs)

    @property
    def n_solid(self) -> int:
        return len(self.solid_vertices)

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        """Free velocity vector -> full vector (zeros on the outer boundary)."""
        u = np.zeros(self.n_full, dtype=u_free.dtype)
        u[self.free_dofs] = u_free
        return u

    def vertex_velocity(self, u_free: np.ndarray) -> np.ndarray:
        return self.expand(u_free)[: 3 * self.nv].reshape(self.nv, 3)

    def bubble_coefficients(self, u_free: np.ndarray) -> np.ndarray:
        return self.expand(u_free)[3 * self.nv:].reshape(self.nt, 3)

    def rigid_lift(self, l: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """Free-dof interpolant of the rigid velocity on the inner boundary."""
        return self.E @ np.concatenate([l, omega])

    def slip_rhs(self, l: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """Weak slip data: v -> alpha * int (l + omega x y)_tau . v_tau.

        Rigid modes are affine, hence matched pointwise by their boundary
        interpolant, so the functional is exactly A_slip applied to the lift.
        """
        return self.A_slip @ self.rigid_lift(l, omega)

    def normal_data(self, l: np.ndarray, omega: np.ndarray) -> np.ndarray:
        return self.G6 @ np.concatenate([l, omega])

    def zero_mean(self, p: np.ndarray) -> np.ndarray:
        return p - (self.p_load @ p) / self.volume


@dataclass
class FluidField:
    """A discrete velocity/pressure pair on the blocks' spaces."""
    blocks: StokesBlocks
    u: np.ndarray   # free velocity dofs
    p: np.ndarray   # vertex pressures

    def vertex_velocity(self) -> np.ndarray:
        return self.blocks.vertex_velocity(self.u)

    def kinetic_energy(self) -> float:
        return float(0.5 * np.real(np.vdot(self.u, self.blocks.M @ self.u)))


def assemble_stokes(domain: DomainConfig, mu0: float = 1.0,
                    alpha: float = 1.0) -> StokesBlocks:
    mesh = domain.mesh
    nv = len(mesh.vertices)
    nt = len(mesh.tets)
    n_full = 3 * (nv + nt)
    vols, grads = _element_geometry(mesh)

    tets = mesh.tets
    # dof layout: vertex v component c -> 3v + c; bubble of tet t -> 3(nv + t) + c
    vdofs = (3 * tets[:, :, None] + np.arange(3)).reshape(nt, 12)
    bdofs = (3 * nv + 3 * np.arange(nt)[:, None] + np.arange(3))
    d15 = np.concatenate([vdofs, bdofs], axis=1)   # (nt, 15), (A, c) ordering

    # ---- scalar mass (5 x 5) -------------------------------------------------
    m5 = np.zeros((nt, 5, 5))
    m5[:, :4, :4] = (np.ones((4, 4)) + np.eye(4))[None] / 20.0
    m5[:, :4, 4] = m5[:, 4, :4] = _M_VB
    m5[:, 4, 4] = _M_BB
    m5 *= vols[:, None, None]

    # ---- scalar stiffness and gradient cross blocks --------------------------
    k5 = np.zeros((nt, 5, 5))
    k5[:, :4, :4] = np.einsum("tAi,tBi->tAB", grads, grads)
    gg = np.einsum("tka,tkc->tac", grads, grads)       # sum_k g_k g_k^T
    k5[:, 4, 4] = _C_BB * np.einsum("tii->t", gg)
    k5 *= vols[:, None, None]
    # S[t,A,B,a,c] = int (d_a phi_A)(d_c phi_B)
    S = np.zeros((nt, 5, 5, 3, 3))
    S[:, :4, :4] = np.einsum("tAa,tBc->tABac", grads, grads)
    S[:, 4, 4] = _C_BB * gg
    S *= vols[:, None, None, None, None]

    eye3 = np.eye(3)
    # vector blocks: test (A, c), trial (B, a)
    Me = np.einsum("tAB,ca->tAcBa", m5, eye3).reshape(nt, 15, 15)
    Ke = mu0 * (np.einsum("tAB,ca->tAcBa", k5, eye3)
                + S.transpose(0, 1, 4, 2, 3)).reshape(nt, 15, 15)

    rows = np.broadcast_to(d15[:, :, None], (nt, 15, 15))
    cols = np.broadcast_to(d15[:, None, :], (nt, 15, 15))
    M_full = sp.coo_matrix((Me.ravel(), (rows.ravel(), cols.ravel())),
                           shape=(n_full, n_full)).tocsr()
    A_mu_full = sp.coo_matrix((Ke.ravel(), (rows.ravel(), cols.ravel())),
                              shape=(n_full, n_full)).tocsr()

    # ---- divergence ----------------------------------------------------------
    Be = np.empty((nt, 4, 15))
    Be[:, :, :12] = np.broadcast_to(
        (grads * (vols[:, None, None] / 4.0)).reshape(nt, 1, 12), (nt, 4, 12))
    Be[:, :, 12:] = -_B_BUB * vols[:, None, None] * grads
    prow = np.broadcast_to(tets[:, :, None], (nt, 4, 15))
    pcol = np.broadcast_to(d15[:, None, :], (nt, 4, 15))
    B_full = sp.coo_matrix((Be.ravel(), (prow.ravel(), pcol.ravel())),
                           shape=(nv, n_full)).tocsr()

    # ---- scalar P1 stiffness (Neumann problems) ------------------------------
    Ks = np.einsum("tAi,tBi->tAB", grads, grads) * vols[:, None, None]
    kr = np.broadcast_to(tets[:, :, None], (nt, 4, 4))
    kc = np.broadcast_to(tets[:, None, :], (nt, 4, 4))
    K_scalar = sp.coo_matrix((Ks.ravel(), (kr.ravel(), kc.ravel())),
                             shape=(nv, nv)).tocsr()
    p_load = np.zeros(nv)
    np.add.at(p_load, tets.ravel(), np.repeat(vols / 4.0, 4))

    # ---- boundary structures -------------------------------------------------
    solid_vertices = mesh.boundary_vertices(TAG_SOLID)
    outer_vertices = mesh.boundary_vertices(TAG_OUTER)
    if mesh.vertex_normals is None:
        raise GeometryError("mesh lacks boundary vertex normals")
    solid_normals = mesh.vertex_normals[solid_vertices]

    facets = _build_solid_facets(domain)

    A_slip_full = _assemble_slip(facets, alpha, n_full)

    ns = len(solid_vertices)
    ti = np.repeat(np.arange(ns), 3)
    tj = (3 * solid_vertices[:, None] + np.arange(3)).ravel()
    Tn_full = sp.coo_matrix((solid_normals.ravel(), (ti, tj)),
                            shape=(ns, n_full)).tocsr()

    E_full = np.zeros((n_full, 6))
    y_s = mesh.vertices[solid_vertices]
    for j in range(3):
        E_full[3 * solid_vertices + j, j] = 1.0
        rot = np.cross(np.eye(3)[j], y_s)
        for c in range(3):
            E_full[3 * solid_vertices + c, 3 + j] = rot[:, c]
    G6 = np.zeros((ns, 6))
    G6[:, :3] = solid_normals
    for j in range(3):
        G6[:, 3 + j] = np.einsum("si,si->s", np.cross(np.eye(3)[j], y_s),
                                 solid_normals)

    # ---- outer Dirichlet elimination ----------------------------------------
    free = np.ones(n_full, dtype=bool)
    free[(3 * outer_vertices[:, None] + np.arange(3)).ravel()] = False
    free_dofs = np.flatnonzero(free)
    full_to_free = -np.ones(n_full, dtype=np.int64)
    full_to_free[free_dofs] = np.arange(len(free_dofs))

    # Constraint-row redundancy: summing the divergence rows gives the
    # boundary flux functional u -> sum_v u_v . varea_v with varea_v the
    # facet-area vector at the solid vertex v.  When the inner surface is
    # vertex transitive (every vertex equivalent under its symmetry group)
    # all varea_v equal kappa * n_v with one common kappa, that functional
    # is kappa times the sum of the nodal trace rows, and the saddle systems
    # acquire an exact one-dimensional multiplier gauge.  Detect it here and
    # record the kernel so the solvers can deflate it.
    w_flux = np.asarray(B_full.sum(axis=0)).ravel()[free_dofs]
    varea = np.zeros((ns, 3))
    for c in range(3):
        varea[:, c] = w_flux[full_to_free[3 * solid_vertices + c]]
    kappa = np.einsum("si,si->s", varea, solid_normals)
    kbar = kappa.mean()
    gauge_defect = np.abs(varea - kbar * solid_normals).max() / max(abs(kbar), 1e-300)
    gauge_kernel = None
    gauge_sigma = 0.0
    if gauge_defect < 1e-12:
        z = np.concatenate([np.ones(nv), -kbar * np.ones(ns)])
        gauge_kernel = z / np.linalg.norm(z)
        gauge_sigma = float(np.abs(B_full).max())
        logger.info("vertex-transitive inner surface: deflating the "
                    "multiplier gauge (kappa=%.6g)", kbar)

    blocks = StokesBlocks(
        domain=domain, mu0=mu0, alpha=alpha, nv=nv, nt=nt, n_full=n_full,
        free=free, full_to_free=full_to_free, free_dofs=free_dofs,
        solid_vertices=solid_vertices, solid_normals=solid_normals,
        M=M_full[free_dofs][:, free_dofs].tocsr(),
        A_mu=A_mu_full[free_dofs][:, free_dofs].tocsr(),
        A_slip=A_slip_full[free_dofs][:, free_dofs].tocsr(),
        B=B_full[:, free_dofs].tocsr(),
        Tn=Tn_full[:, free_dofs].tocsr(),
        E=E_full[free_dofs],
        G6=G6,
        K_scalar=K_scalar,
        p_load=p_load,
        volume=float(vols.sum()),
        vols=vols, grads=grads, facets=facets,
        M_full=M_full, A_mu_full=A_mu_full, A_slip_full=A_slip_full,
        B_full=B_full,
        gauge_kernel=gauge_kernel, gauge_sigma=gauge_sigma,
    )
    logger.debug("assembled blocks: %d free dofs, %d pressure, %d normal rows",
                 blocks.n_free, nv, ns)
    return blocks


def _build_solid_facets(domain: DomainConfig) -> _SolidFacets:
    mesh = domain.mesh
    sel = np.flatnonzero(mesh.facet_tags == TAG_SOLID)
    facets = mesh.boundary_facets[sel]
    areas = mesh.facet_areas[sel]
    flat_n = mesh.facet_normals[sel]

    qb, qw = tri_rule_deg4()
    qpts = np.einsum("qk,fkj->fqj", qb, mesh.vertices[facets])
    if domain.builtin_shell:
        # exact inner-sphere normals, outward w.r.t. the fluid (toward the centre)
        qn = -qpts / np.linalg.norm(qpts, axis=2)[:, :, None]
    else:
        vn = mesh.vertex_normals[facets]                     # (nf, 3, 3)
        qn = np.einsum("qk,fkj->fqj", qb, vn)
        qn /= np.linalg.norm(qn, axis=2)[:, :, None]

    # owner tets and the off-facet barycentric gradient (for facet traces
    # of element gradients)
    face_map = {}
    for it, tet in enumerate(mesh.tets):
        for loc, tri in enumerate(((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))):
            face_map[tuple(sorted(tet[list(tri)]))] = (it, loc)
    vols, grads = _element_geometry(mesh)
    owner = np.empty(len(facets), dtype=np.int64)
    off_grad = np.empty((len(facets), 3))
    for i, f in enumerate(facets):
        it, loc = face_map[tuple(sorted(f))]
        owner[i] = it
        off_grad[i] = grads[it, loc]
    return _SolidFacets(facets, areas, flat_n, qb, qw, qpts, qn, owner, off_grad)


def _assemble_slip(fac: _SolidFacets, alpha: float, n_full: int) -> sp.csr_matrix:
    # P = I - n n^T at each quadrature point; bubbles vanish on facets
    proj = np.eye(3)[None, None] - np.einsum("fqi,fqj->fqij", fac.qnormals, fac.qnormals)
    blocks = alpha * np.einsum("q,qr,qs,fqij,f->frisj", fac.qw, fac.qb, fac.qb,
                               proj, fac.areas)
    nf = len(fac.facets)
    dofs = (3 * fac.facets[:, :, None] + np.arange(3)).reshape(nf, 9)
    rows = np.broadcast_to(dofs[:, :, None], (nf, 9, 9))
    cols = np.broadcast_to(dofs[:, None, :], (nf, 9, 9))
    return sp.coo_matrix((blocks.reshape(nf, 9, 9).ravel(),
                          (rows.ravel(), cols.ravel())),
                         shape=(n_full, n_full)).tocsr()


# ---------------------------------------------------------------------------
# saddle-point solves
# ---------------------------------------------------------------------------

def saddle_matrix(blocks: StokesBlocks, upper_left: sp.spmatrix) -> sp.csc_matrix:
    """[[UL, B^T, Tn^T], [B, 0, 0], [Tn, 0, 0]] on the free dofs.

    Convention: the first block row reads  UL u + B^T q + Tn^T m = F,  and the
    physical pressure is  p = -q.
    """
    npr, ns = blocks.nv, blocks.n_solid
    Z1 = sp.csr_matrix((npr, npr))
    mat = sp.bmat([
        [upper_left, blocks.B.T, blocks.Tn.T],
        [blocks.B, Z1, None],
        [blocks.Tn, None, sp.csr_matrix((ns, ns))],
    ], format="csc")
    if blocks.gauge_kernel is not None:
        # pin the redundant multiplier direction; consistent right-hand
        # sides (all of ours pair to zero against the kernel) are unaffected
        z = np.concatenate([np.zeros(blocks.n_free), blocks.gauge_kernel])
        zs = sp.csc_matrix(z[:, None])
        mat = (mat + blocks.gauge_sigma * (zs @ zs.T)).tocsc()
    return mat


class SaddleSolver:
    """Factorized [[UL, B^T, Tn^T], [B, 0, 0], [Tn, 0, 0]] with equilibration.

    SuperLU's threshold pivoting destroys the fill-reducing ordering when the
    velocity block is not clearly dominant over the constraint rows (the mass
    saddle is the worst case: an order of magnitude more fill).  Scaling the
    velocity block up by a fixed margin and undoing the scaling on the
    multipliers leaves the velocity solution bitwise-determined by the same
    equations and keeps the factor small.
    """

    def __init__(self, blocks: StokesBlocks, upper_left: sp.spmatrix,
                 margin: float = 100.0):
        self.blocks = blocks
        diag_max = np.abs(upper_left.diagonal()).max()
        self.scale = margin * np.abs(blocks.B).max() / diag_max
        mat = saddle_matrix(blocks, (self.scale * upper_left).tocsr())
        self._complex = np.iscomplexobj(mat)
        self._lu = spla.splu(mat.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def _raw_solve(self, rhs: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(rhs) and not self._complex:
            return self._lu.solve(rhs.real) + 1j * self._lu.solve(rhs.imag)
        if self._complex and not np.iscomplexobj(rhs):
            rhs = rhs.astype(np.complex128)
        return self._lu.solve(rhs)

    def solve(self, rhs_u=None, rhs_div=None, rhs_trace=None):
        """Returns (u, q, mu) for UL u + B^T q + Tn^T mu = rhs_u with the
        constraint rows equal to rhs_div and rhs_trace."""
        b = self.blocks
        n, npr, ns = b.n_free, b.nv, b.n_solid
        parts = [np.zeros(n), np.zeros(npr), np.zeros(ns)]
        if rhs_u is not None:
            parts[0] = self.scale * np.asarray(rhs_u)
        if rhs_div is not None:
            parts[1] = np.asarray(rhs_div)
        if rhs_trace is not None:
            parts[2] = np.asarray(rhs_trace)
        sol = self._raw_solve(np.concatenate(parts))
        return sol[:n], sol[n:n + npr] / self.scale, sol[n + npr:] / self.scale


def _kkt0_solver(blocks: StokesBlocks) -> SaddleSolver:
    if blocks._kkt0_lu is None:
        blocks._kkt0_lu = SaddleSolver(blocks, blocks.M)
    return blocks._kkt0_lu


def helmholtz_project(blocks: StokesBlocks, f: np.ndarray) -> np.ndarray:
    """Mass-orthogonal projection onto {B v = 0, Tn v = 0}."""
    u, _, _ = _kkt0_solver(blocks).solve(rhs_u=blocks.M @ f)
    return u


def solve_steady_lifting(blocks: StokesBlocks, l: np.ndarray | None = None,
                         omega: np.ndarray | None = None,
                         modes: np.ndarray | None = None):
    """Viscous-slip lifting of rigid boundary data.

    Solves  a(S, w) + (q, div w) + m . Tn w = slip data,  B S = 0,
    Tn S = normal data, for each requested rigid mode.  Returns (S, p, m)
    with the physical pressure sign.
    """
    if modes is None:
        modes = np.concatenate([np.zeros(3) if l is None else np.asarray(l, float),
                                np.zeros(3) if omega is None else np.asarray(omega, float)])
        modes = modes[:, None]
        squeeze = True
    else:
        modes = np.asarray(modes, dtype=float)
        squeeze = False

    solver = SaddleSolver(blocks, (blocks.A_mu + blocks.A_slip).tocsr())
    n, npr = blocks.n_free, blocks.nv
    nm = modes.shape[1]
    S = np.empty((n, nm))
    P = np.empty((npr, nm))
    Mu = np.empty((blocks.n_solid, nm))
    for j in range(nm):
        u, q, mu = solver.solve(rhs_u=blocks.A_slip @ (blocks.E @ modes[:, j]),
                                rhs_trace=blocks.G6 @ modes[:, j])
        S[:, j] = u
        P[:, j] = -q
        Mu[:, j] = mu
    if squeeze:
        return S[:, 0], P[:, 0], Mu[:, 0]
    return S, P, Mu


def check_compatibility(b: np.ndarray, tol: float = 1e-10) -> float:
    """Pure-Neumann data must sum to zero; returns the relative defect."""
    scale = np.abs(b).sum()
    defect = abs(b.sum()) / max(scale, 1e-300)
    if defect > tol:
        raise ValueError(f"incompatible Neumann data: relative defect {defect:.2e}")
    return defect


def neumann_rhs(blocks: StokesBlocks, g_solid=None, g_outer=None) -> np.ndarray:
    """Assemble b_i = sum over boundary of int lambda_i g dS for given flux data.

    g_* are callables mapping point arrays (n,3) to flux values (n,), applied
    on the respective boundary part.
    """
    mesh = blocks.domain.mesh
    qb, qw = tri_rule_deg4()
    b = np.zeros(blocks.nv)
    for tag, g in ((TAG_SOLID, g_solid), (TAG_OUTER, g_outer)):
        if g is None:
            continue
        sel = mesh.facet_tags == tag
        f = mesh.boundary_facets[sel]
        areas = mesh.facet_areas[sel]
        pts = np.einsum("qk,fkj->fqj", qb, mesh.vertices[f])
        gv = g(pts.reshape(-1, 3)).reshape(len(f), len(qw))
        contrib = np.einsum("q,fq,qk,f->fk", qw, gv, qb, areas)
        np.add.at(b, f.ravel(), contrib.ravel())
    return b


def solve_neumann(blocks: StokesBlocks, b: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Scalar Neumann solve: K phi = b with zero-mean gauge.

    The compatibility of b is enforced (within tol) before solving the
    bordered system that pins the mean.
    """
    check_compatibility(b, tol)
    if blocks._neumann_lu is None:
        w = blocks.p_load[:, None]
        K = sp.bmat([[blocks.K_scalar, w], [w.T, None]], format="csc")
        blocks._neumann_lu = spla.splu(K)
    sol = blocks._neumann_lu.solve(np.concatenate([b, [0.0]]))
    return sol[:-1]


# ---------------------------------------------------------------------------
# boundary functionals
# ---------------------------------------------------------------------------

def traction_moments(blocks: StokesBlocks, u: np.ndarray, p: np.ndarray):
    """Force and torque of the fluid stress on the inner boundary.

    Integrates sigma n over the polyhedral inner surface with n the flat facet
    normal pointing out of the fluid (into the body); the torque is taken
    about the body centre (origin of the reference frame).
    sigma = 2 mu0 Du - p I from the finite-element fields.
    """
    fac = blocks.facets
    uv = blocks.vertex_velocity(u)
    ub = blocks.bubble_coefficients(u)
    grads = blocks.grads

    dtype = np.result_type(u, p)
    force = np.zeros(3, dtype=dtype)
    moment = np.zeros(3, dtype=dtype)
    eye = np.eye(3)
    for i, f in enumerate(fac.facets):
        it = fac.owner_tet[i]
        # constant P1 gradient of the owner tet
        Gu = np.einsum("Ac,Ai->ci", uv[blocks.domain.mesh.tets[it]], grads[it])
        for q, wq in enumerate(fac.qw):
            lam = fac.qb[q]
            grad_b = BUBBLE * lam.prod() * fac.off_grad[i]
            G = Gu + np.einsum("c,i->ci", ub[it], grad_b)
            D = 0.5 * (G + G.T)
            pq = lam @ p[f]
            sigma = 2.0 * blocks.mu0 * D - pq * eye
            t = sigma @ fac.flat_normals[i] * (wq * fac.areas[i])
            force += t
            moment += np.cross(fac.qpts[i, q], t)
    return force, moment


def surface_rigid_flux(blocks: StokesBlocks, u: np.ndarray) -> np.ndarray:
    """Nodal normal-trace residual Tn u (zero for admissible fields)."""
    return blocks.Tn @ u
