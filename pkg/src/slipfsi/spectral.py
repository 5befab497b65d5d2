"""Spectral certificates for the coupled evolution.

The linear dynamics is the pencil problem  lam B x = -C x  with B the
(singular) mass pencil and C the lam-independent part of the monolithic
matrix.  Exponential decay of the semigroup is certified two ways:

* rightmost pencil eigenvalues (shift-invert Arnoldi near zero), giving the
  decay abscissa eta0 = -max Re(lam);
* resolvent norms sampled along the vertical line Re(lam) = -eta, combined
  into a sectorial bound that is finite precisely when the line is free of
  spectrum and the resolvent decays like 1/|Im lam| along it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coupled import CoupledOperator, mass_blocks, monolithic_matrix

log = logging.getLogger(__name__)


@dataclass
class SpectralReport:
    eigenvalues: np.ndarray          # sorted by decreasing real part
    eta0: float                      # -max Re(lam)
    shift: complex
    sector_eta: float | None = None
    sector_bound: float | None = None
    grid: np.ndarray | None = None             # sampled Im(lam) offsets
    resolvent_norms: np.ndarray | None = None
    eigenvectors: np.ndarray | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        out = {
            "eigenvalues": [[float(z.real), float(z.imag)]
                            for z in self.eigenvalues],
            "eta0": float(self.eta0),
            "shift": [float(np.real(self.shift)), float(np.imag(self.shift))],
        }
        out["sector_bound"] = (None if self.sector_bound is None
                               else float(self.sector_bound))
        if self.sector_eta is not None:
            out["sector_eta"] = float(self.sector_eta)
        if self.grid is not None:
            out["grid"] = [float(y) for y in self.grid]
        if self.resolvent_norms is not None:
            out["resolvent_norms"] = [float(v) for v in self.resolvent_norms]
        return out


def _pencil_lu(op: CoupledOperator, lam: complex):
    mat = monolithic_matrix(op, lam).tocsc()
    if np.iscomplexobj(lam) and np.imag(lam) != 0:
        mat = mat.astype(np.complex128)
    return spla.splu(mat, permc_spec="MMD_AT_PLUS_A")


def spectrum(op: CoupledOperator, k: int = 12, shift: complex = 0.0,
             tol: float = 0.0, with_vectors: bool = True) -> SpectralReport:
    """Rightmost eigenvalues of the evolution pencil.

    The pencil is laid out so that monolithic_matrix(op, lam) = lam B + C;
    its eigenvalues solve A x = lam B x with A = -C.  Shift-invert Arnoldi
    around `shift` then applies (A - shift B)^-1 = -monolithic(shift)^-1,
    so one factorization of the monolithic matrix drives the iteration.
    """
    B = mass_blocks(op)
    C = monolithic_matrix(op, 0.0).tocsc()
    lu = _pencil_lu(op, shift)

    def opinv(v):
        return -_lu_solve(lu, v)

    n_tot = B.shape[0]
    is_complex = np.iscomplexobj(shift) and np.imag(shift) != 0
    OPinv = spla.LinearOperator((n_tot, n_tot), matvec=opinv,
                                dtype=complex if is_complex else float)
    v0 = np.random.default_rng(0).standard_normal(n_tot)
    vals, vecs = spla.eigs(-C, k=k, M=B, sigma=shift, OPinv=OPinv,
                           which="LM", tol=tol, v0=v0)
    order = np.argsort(-vals.real)
    vals, vecs = vals[order], vecs[:, order]
    # normalize by pencil energy
    for j in range(vecs.shape[1]):
        e = np.real(np.vdot(vecs[:, j], B @ vecs[:, j]))
        if e > 0:
            vecs[:, j] /= np.sqrt(e)
    eta0 = float(-vals.real.max())
    log.info("pencil spectrum: rightmost %s, eta0=%.6g", vals[0], eta0)
    return SpectralReport(eigenvalues=vals, eta0=eta0, shift=shift,
                          eigenvectors=vecs if with_vectors else None)


def _lu_solve(lu, v):
    if np.iscomplexobj(v) and not np.iscomplexobj(lu.U):
        return lu.solve(v.real) + 1j * lu.solve(v.imag)
    return lu.solve(np.asarray(v, dtype=lu.U.dtype))


def resolvent_norm(op: CoupledOperator, lam: complex, iters: int = 60,
                   tol: float = 1e-8, seed: int = 0) -> float:
    """Energy-norm of the data-to-solution map at one spectral parameter.

    The map takes (f, g) to the (u, m) part of the monolithic solution with
    right-hand side (M f, I6 g, 0, 0); both sides carry the kinetic-energy
    norm.  Computed by power iteration on T* T, where the adjoint solve
    reuses the same factorization with trans='H'.
    """
    b = op.blocks
    n = b.n_free
    ext = n + 6 + b.nv + b.n_solid
    lu = spla.splu(monolithic_matrix(op, lam).astype(np.complex128).tocsc(),
                   permc_spec="MMD_AT_PLUS_A")
    Bu, I6 = b.M, op.I6

    def embed(v):
        w = np.zeros(ext, dtype=complex)
        w[:n] = Bu @ v[:n]
        w[n:n + 6] = I6 @ v[n:n + 6]
        return w

    def energy(v):
        return float(np.real(np.vdot(v[:n], Bu @ v[:n])
                             + np.vdot(v[n:n + 6], I6 @ v[n:n + 6])))

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n + 6) + 1j * rng.standard_normal(n + 6)
    v /= np.sqrt(energy(v))
    sigma2 = 0.0
    for it in range(iters):
        y = lu.solve(embed(v))[:n + 6]
        z = lu.solve(embed(y), trans="H")[:n + 6]
        new = energy(y)  # = <T*T v, v>_B for the normalized v
        nz = np.sqrt(energy(z))
        if nz == 0:
            return 0.0
        v = z / nz
        if it > 2 and abs(new - sigma2) <= tol * max(new, 1e-300):
            sigma2 = new
            break
        sigma2 = new
    return float(np.sqrt(sigma2))


def sector_bound(op: CoupledOperator, eta: float,
                 grid: np.ndarray | None = None, iters: int = 60
                 ) -> tuple[float, np.ndarray, np.ndarray]:
    """Bound sup |Im lam| * ||R(lam)|| along the line Re lam = -eta.

    Returns (bound, grid, norms) where bound = max over the sampled points
    of (1 + |y|) ||R(-eta + i y)||.  A finite value certifies that the line
    lies in the resolvent set with the 1/|Im lam| decay used by the
    analytic-semigroup estimates; it diverges as the sampled line touches
    the spectrum.
    """
    if grid is None:
        grid = np.concatenate([[0.0], np.logspace(-2, 3, 21)])
    norms = np.array([resolvent_norm(op, -eta + 1j * y, iters=iters)
                      for y in grid])
    bound = float(((1.0 + np.abs(grid)) * norms).max())
    return bound, np.asarray(grid), norms


def fit_decay_rate(times: np.ndarray, values: np.ndarray,
                   tail: float = 0.6) -> tuple[float, float]:
    """Least-squares exponential rate of the tail of a positive signal.

    Fits log(values) ~ a + r t on the last `tail` fraction of the samples
    and returns (r, a).  For an energy trace decaying like e^{-2 eta t} the
    rate r is -2 eta.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("decay fit requires strictly positive values")
    k0 = int(np.floor((1.0 - tail) * len(times)))
    k0 = min(max(k0, 0), len(times) - 2)
    t, y = times[k0:], np.log(values[k0:])
    A = np.column_stack([t, np.ones_like(t)])
    (r, a), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(r), float(a)


def verify_spectrum(op: CoupledOperator, report: SpectralReport,
                    rtol: float = 1e-7) -> np.ndarray:
    """Residuals ||(lam B + C) x|| / scale for each reported eigenpair."""
    if report.eigenvectors is None:
        raise ValueError("report carries no eigenvectors")
    B = mass_blocks(op)
    C = monolithic_matrix(op, 0.0)
    out = np.empty(len(report.eigenvalues))
    for j, lam in enumerate(report.eigenvalues):
        x = report.eigenvectors[:, j]
        res = lam * (B @ x) + C @ x
        scale = abs(lam) * np.linalg.norm(B @ x) + np.linalg.norm(C @ x)
        out[j] = np.linalg.norm(res) / max(scale, 1e-300)
    if out.max() > rtol:
        log.warning("eigenpair residual up to %.2e exceeds %.1e", out.max(), rtol)
    return out
