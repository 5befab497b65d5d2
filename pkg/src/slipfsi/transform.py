"""Fixed-domain change of coordinates for the moving-body problem.

A divergence-free vector field Lambda rigidly transports a neighbourhood of
the body while leaving a neighbourhood of the outer wall fixed.  Its flow map
X(y, t) carries the reference shell onto the deformed configuration; the body
region moves exactly rigidly (J_X = Q there) and volumes are preserved
(det J_X = 1).  Lambda is built as curl(psi * w) for a radial cutoff psi and
the quadratic auxiliary field w, so div Lambda = 0 holds identically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainConfig, reorthonormalize

logger = logging.getLogger(__name__)

# Levi-Civita symbol
_EPS = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _EPS[_i, _j, _k] = 1.0
    _EPS[_i, _k, _j] = -1.0


def skew(v: np.ndarray) -> np.ndarray:
    """Matrix S with S @ y = v x y."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _smoothstep7(t: np.ndarray):
    """C^3 smoothstep on [0,1] and its first three derivatives."""
    s = t ** 4 * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t)))
    om = 1.0 - t
    s1 = 140.0 * t ** 3 * om ** 3
    s2 = 420.0 * t ** 2 * om ** 2 * (1.0 - 2.0 * t)
    s3 = 840.0 * t * om * (1.0 + t * (-5.0 + 5.0 * t))
    return s, s1, s2, s3


@dataclass(frozen=True)
class CutoffPsi:
    """Radial cutoff: 1 on a neighbourhood of the body, 0 near the outer wall.

    The transition band sits between rho_one and rho_zero, strictly inside the
    outer ball, expressed through the distance to the outer boundary.
    """
    fluid_radius: float
    rho_one: float
    rho_zero: float

    @classmethod
    def for_domain(cls, domain: DomainConfig) -> "CutoffPsi":
        return cls.for_shell(domain.solid_radius, domain.fluid_radius)

    @classmethod
    def for_shell(cls, solid_radius: float, fluid_radius: float) -> "CutoffPsi":
        beta = fluid_radius - solid_radius
        return cls(fluid_radius, fluid_radius - beta / 4.0, fluid_radius - beta / 8.0)

    def _radial(self, rho: np.ndarray):
        """g(rho), g', g'', g''' of the radial profile."""
        width = self.rho_zero - self.rho_one
        t = np.clip((rho - self.rho_one) / width, 0.0, 1.0)
        s, s1, s2, s3 = _smoothstep7(t)
        band = (rho > self.rho_one) & (rho < self.rho_zero)
        b = band.astype(float)
        return (1.0 - s,
                -b * s1 / width,
                -b * s2 / width ** 2,
                -b * s3 / width ** 3)

    def value(self, x: np.ndarray) -> np.ndarray:
        rho = np.linalg.norm(np.atleast_2d(x), axis=1)
        return self._radial(rho)[0]

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        rho = np.linalg.norm(x, axis=1)
        _, g1, _, _ = self._radial(rho)
        u = x / rho[:, None]
        return g1[:, None] * u

    def hess(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        rho = np.linalg.norm(x, axis=1)
        _, g1, g2, _ = self._radial(rho)
        u = x / rho[:, None]
        uu = u[:, :, None] * u[:, None, :]
        eye = np.eye(3)[None]
        return g2[:, None, None] * uu + (g1 / rho)[:, None, None] * (eye - uu)

    def third(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        rho = np.linalg.norm(x, axis=1)
        _, g1, g2, g3 = self._radial(rho)
        u = x / rho[:, None]
        uu = u[:, :, None] * u[:, None, :]
        uuu = uu[:, :, :, None] * u[:, None, None, :]
        eye = np.eye(3)
        # sym3[p,i,j,k] = sum over the three pairings of (delta - uu) with u
        duu = eye[None] - uu
        sym3 = (duu[:, :, :, None] * u[:, None, None, :]
                + duu[:, :, None, :] * u[:, None, :, None]
                + duu[:, None, :, :] * u[:, :, None, None])
        c = (g2 / rho - g1 / rho ** 2)
        return g3[:, None, None, None] * uuu + c[:, None, None, None] * sym3


def eval_w(x: np.ndarray, l: np.ndarray, omega: np.ndarray,
           h: np.ndarray | None = None) -> np.ndarray:
    """Quadratic auxiliary field whose curl is the rigid field l + omega x (x-h)."""
    x = np.atleast_2d(x)
    r = x if h is None else x - np.asarray(h)[None, :]
    return 0.5 * np.cross(np.asarray(l)[None, :], r) \
        - 0.5 * np.einsum("pi,pi->p", r, r)[:, None] * np.asarray(omega)[None, :]


def eval_lambda(x: np.ndarray, l: np.ndarray, omega: np.ndarray,
                h: np.ndarray, cutoff: CutoffPsi, derivs: int = 0):
    """Divergence-free transport field Lambda = psi*(l + omega x (x-h)) + grad(psi) x w.

    derivs=0 returns Lambda (n,3); derivs=1 adds grad Lambda (n,3,3) with
    [p,i,j] = d_j Lambda_i; derivs=2 adds the second gradient (n,3,3,3) with
    [p,i,j,k] = d_k d_j Lambda_i.
    """
    x = np.atleast_2d(x)
    l = np.asarray(l, dtype=float)
    omega = np.asarray(omega, dtype=float)
    h = np.asarray(h, dtype=float)
    r = x - h[None, :]
    v = l[None, :] + np.cross(omega[None, :], r)
    w = 0.5 * np.cross(l[None, :], r) \
        - 0.5 * np.einsum("pi,pi->p", r, r)[:, None] * omega[None, :]

    psi = cutoff.value(x)
    g = cutoff.grad(x)
    lam = psi[:, None] * v + np.cross(g, w)
    if derivs == 0:
        return lam

    Sw = skew(omega)
    H = cutoff.hess(x)
    # d_j w_b = 0.5*skew(l)[b,j] - omega_b r_j
    W = 0.5 * skew(l)[None, :, :] - omega[None, :, None] * r[:, None, :]
    dlam = (g[:, None, :] * v[:, :, None]
            + psi[:, None, None] * Sw[None, :, :]
            + np.einsum("iab,paj,pb->pij", _EPS, H, w)
            + np.einsum("iab,pa,pbj->pij", _EPS, g, W))
    if derivs == 1:
        return lam, dlam

    T = cutoff.third(x)
    d2lam = (H[:, None, :, :] * v[:, :, None, None]
             + g[:, None, :, None] * Sw[None, :, None, :]
             + g[:, None, None, :] * Sw[None, :, :, None]
             + np.einsum("iab,pajk,pb->pijk", _EPS, T, w)
             + np.einsum("iab,paj,pbk->pijk", _EPS, H, W)
             + np.einsum("iab,pak,pbj->pijk", _EPS, H, W)
             - np.einsum("iab,pa,b,jk->pijk", _EPS, g, omega, np.eye(3)))
    return lam, dlam, d2lam


# ---------------------------------------------------------------------------
# flow map
# ---------------------------------------------------------------------------

class TabulatedMotion:
    """Piecewise-linear interpolant of sampled rigid velocities t -> (l, omega)."""

    def __init__(self, times: np.ndarray, l: np.ndarray, omega: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.l = np.asarray(l, dtype=float)
        self.omega = np.asarray(omega, dtype=float)
        if self.l.shape != (len(self.times), 3) or self.omega.shape != (len(self.times), 3):
            raise ValueError("need one l and omega sample per time")

    def __call__(self, t: float):
        li = np.array([np.interp(t, self.times, self.l[:, i]) for i in range(3)])
        wi = np.array([np.interp(t, self.times, self.omega[:, i]) for i in range(3)])
        return li, wi


@dataclass
class FlowMap:
    """Trajectories, Jacobians and rigid frame along the transport flow.

    X[k] maps the seed points to time times[k]; J[k] is the spatial Jacobian
    dX/dy at the seeds, dJ (optional) its seed-derivative with layout
    [k,p,i,j,m] = d(J_ij)/dy_m.  (h, Q) integrate the rigid frame with the
    same scheme, so J equals Q wherever the flow is rigid.
    """
    times: np.ndarray
    points: np.ndarray
    X: np.ndarray
    J: np.ndarray
    h: np.ndarray
    Q: np.ndarray
    cutoff: CutoffPsi
    motion: object = field(repr=False, default=None)
    dJ: np.ndarray | None = field(repr=False, default=None)
    substeps: int = 1
    renorm_events: int = 0

    def det(self, k: int) -> np.ndarray:
        return np.linalg.det(self.J[k])

    def inverse_jacobian(self, k: int) -> np.ndarray:
        return np.linalg.inv(self.J[k])

    def solid_defect(self, point_ids: np.ndarray) -> float:
        """max over stored times of ||J - Q|| at the given (rigid-region) points."""
        d = self.J[:, point_ids] - self.Q[:, None]
        return float(np.abs(d).reshape(len(self.times), -1).max(axis=1).max())


def _rigid_rhs(t, Q, motion):
    l, om = motion(t)
    return l, skew(om) @ Q


def _flow_rhs(t, X, J, dJ, h, Q, motion, cutoff):
    l, om = motion(t)
    if dJ is None:
        lam, dlam = eval_lambda(X, l, om, h, cutoff, derivs=1)
        ddJ = None
    else:
        lam, dlam, d2lam = eval_lambda(X, l, om, h, cutoff, derivs=2)
        ddJ = (np.einsum("pikl,plm,pkj->pijm", d2lam, J, J)
               + np.einsum("pik,pkjm->pijm", dlam, dJ))
    dX = lam
    dJdt = np.einsum("pik,pkj->pij", dlam, J)
    return dX, dJdt, ddJ, l, skew(om) @ Q


def _rk4_interval(state, t0, t1, motion, cutoff, substeps):
    X, J, dJ, h, Q = state
    dt = (t1 - t0) / substeps
    for s in range(substeps):
        ta = t0 + s * dt
        k1 = _flow_rhs(ta, X, J, dJ, h, Q, motion, cutoff)
        a2 = _axpy(state := (X, J, dJ, h, Q), k1, 0.5 * dt)
        k2 = _flow_rhs(ta + 0.5 * dt, *a2, motion, cutoff)
        a3 = _axpy(state, k2, 0.5 * dt)
        k3 = _flow_rhs(ta + 0.5 * dt, *a3, motion, cutoff)
        a4 = _axpy(state, k3, dt)
        k4 = _flow_rhs(ta + dt, *a4, motion, cutoff)
        upd = []
        for q1, q2, q3, q4 in zip(k1, k2, k3, k4):
            upd.append(None if q1 is None else (q1 + 2.0 * q2 + 2.0 * q3 + q4))
        X = X + dt / 6.0 * upd[0]
        J = J + dt / 6.0 * upd[1]
        dJ = None if dJ is None else dJ + dt / 6.0 * upd[2]
        h = h + dt / 6.0 * upd[3]
        Q = Q + dt / 6.0 * upd[4]
    return X, J, dJ, h, Q


def _axpy(state, k, a):
    X, J, dJ, h, Q = state
    return (X + a * k[0], J + a * k[1],
            None if dJ is None else dJ + a * k[2],
            h + a * k[3], Q + a * k[4])


def advance_flow(points: np.ndarray, motion, times: np.ndarray, cutoff: CutoffPsi,
                 *, second: bool = False, substeps: int = 1,
                 renorm_tol: float = 1e-10, det_tol: float = 1e-5,
                 h0: np.ndarray | None = None, Q0: np.ndarray | None = None) -> FlowMap:
    """Integrate the transport flow for the seed points over the time grid.

    One RK4 step per grid interval (times `substeps`); intervals whose volume
    drift exceeds det_tol are retried with more substeps.  Q is snapped back
    to the rotation group when round-off accumulates beyond renorm_tol.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    times = np.asarray(times, dtype=float)
    npts = len(points)
    nt = len(times)

    X = np.empty((nt, npts, 3))
    Jv = np.empty((nt, npts, 3, 3))
    dJv = np.empty((nt, npts, 3, 3, 3)) if second else None
    hv = np.empty((nt, 3))
    Qv = np.empty((nt, 3, 3))

    X[0] = points
    Jv[0] = np.eye(3)[None]
    if second:
        dJv[0] = 0.0
    hv[0] = np.zeros(3) if h0 is None else np.asarray(h0, dtype=float)
    Qv[0] = np.eye(3) if Q0 is None else np.asarray(Q0, dtype=float)

    renorms = 0
    sub = substeps
    for k in range(nt - 1):
        state = (X[k], Jv[k], dJv[k] if second else None, hv[k], Qv[k])
        det_before = np.linalg.det(state[1])
        while True:
            Xn, Jn, dJn, hn, Qn = _rk4_interval(state, times[k], times[k + 1],
                                                motion, cutoff, sub)
            drift = np.abs(np.linalg.det(Jn) - det_before).max()
            if drift <= det_tol or sub >= 64:
                if drift > det_tol:
                    logger.warning("volume drift %.2e above tolerance at t=%g "
                                   "despite %d substeps", drift, times[k + 1], sub)
                break
            sub *= 2
            logger.debug("volume drift %.2e at t=%g; substeps -> %d",
                         drift, times[k + 1], sub)
        if np.linalg.norm(Qn.T @ Qn - np.eye(3)) > renorm_tol:
            Qn = reorthonormalize(Qn)
            renorms += 1
        X[k + 1], Jv[k + 1], hv[k + 1], Qv[k + 1] = Xn, Jn, hn, Qn
        if second:
            dJv[k + 1] = dJn
    return FlowMap(times, points, X, Jv, hv, Qv, cutoff, motion=motion,
                   dJ=dJv, substeps=sub, renorm_events=renorms)


def _integrate_to(points, motion, times, cutoff, substeps, h0, Q0):
    """Forward X and J at times[-1] only (used by the Newton inversion)."""
    X = np.atleast_2d(points).astype(float)
    J = np.broadcast_to(np.eye(3), (len(X), 3, 3)).copy()
    h = np.zeros(3) if h0 is None else np.array(h0, dtype=float)
    Q = np.eye(3) if Q0 is None else np.array(Q0, dtype=float)
    for k in range(len(times) - 1):
        X, J, _, h, Q = _rk4_interval((X, J, None, h, Q), times[k], times[k + 1],
                                      motion, cutoff, substeps)
    return X, J


def invert_flow(fm: FlowMap, x: np.ndarray, k: int | None = None,
                tol: float = 1e-10, maxit: int = 30) -> np.ndarray:
    """Solve X(y, t_k) = x for the seeds y by damped Newton on the forward map.

    The residual is measured against the same integrator that produced the
    flow map, so the returned y reproduces x to the requested tolerance.
    """
    if k is None:
        k = len(fm.times) - 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    times = fm.times[:k + 1]
    if len(times) == 1:
        return x.copy()

    # initial guess: integrate the field backwards from (x, t_k)
    y = np.atleast_2d(_integrate_to(x, fm.motion, times[::-1], fm.cutoff,
                                    fm.substeps, fm.h[k], fm.Q[k])[0])

    h0, Q0 = fm.h[0], fm.Q[0]
    Xy, Jy = _integrate_to(y, fm.motion, times, fm.cutoff, fm.substeps, h0, Q0)
    res = Xy - x
    rn = np.linalg.norm(res, axis=1)
    for _ in range(maxit):
        if rn.max() < tol:
            return y
        step = np.linalg.solve(Jy, res[:, :, None])[:, :, 0]
        lam = np.ones(len(y))
        for _ in range(20):
            y_try = y - lam[:, None] * step
            X_try, J_try = _integrate_to(y_try, fm.motion, times, fm.cutoff,
                                         fm.substeps, h0, Q0)
            rn_try = np.linalg.norm(X_try - x, axis=1)
            bad = rn_try > rn
            if not np.any(bad & (rn > tol)):
                break
            lam[bad] *= 0.5
        y, Xy, Jy = y_try, X_try, J_try
        res = Xy - x
        rn = rn_try
    if rn.max() > tol:
        raise RuntimeError(f"flow inversion stalled at residual {rn.max():.2e}")
    return y


def jacobians(fm: FlowMap, k: int, second: bool = False):
    """Jacobian data at time index k: (J, J_inv, det J[, d2Y]).

    d2Y[p,i,j,k] = d^2 Y_i / dx_j dx_k at x = X(y_p): the second gradient of
    the inverse map, obtained from dJ by differentiating the inverse.
    """
    J = fm.J[k]
    JY = np.linalg.inv(J)
    det = np.linalg.det(J)
    if not second:
        return J, JY, det
    if fm.dJ is None:
        raise ValueError("flow map was built without second derivatives")
    inner = -np.einsum("pim,pmnr,pnj->pijr", JY, fm.dJ[k], JY)
    d2Y = np.einsum("pijm,pmk->pijk", inner, JY)
    return J, JY, det, d2Y


def pullback_fields(fm: FlowMap, k: int, u_spatial, p_spatial=None):
    """Sample spatial fields along the flow: u~(y) = J_Y u(X(y)), p~(y) = p(X(y))."""
    Xk = fm.X[k]
    JY = np.linalg.inv(fm.J[k])
    u = np.einsum("pij,pj->pi", JY, np.atleast_2d(u_spatial(Xk)))
    if p_spatial is None:
        return u
    return u, np.asarray(p_spatial(Xk))


def pushforward_fields(fm: FlowMap, k: int, u_ref, p_ref=None):
    """Inverse of pullback_fields at the tracked points: u(X(y)) = J_X u~(y)."""
    u = np.einsum("pij,pj->pi", fm.J[k], np.atleast_2d(u_ref(fm.points)))
    if p_ref is None:
        return u
    return u, np.asarray(p_ref(fm.points))
