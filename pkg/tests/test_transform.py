from __future__ import annotations

import numpy as np
import pytest

from slipfsi import geometry as geo
from slipfsi import transform as tr


CUT = tr.CutoffPsi.for_shell(1.0, 4.0)
L = np.array([0.4, -0.2, 0.7])
OM = np.array([-0.3, 0.5, 0.2])
H = np.array([0.05, -0.1, 0.02])


def _band_points(n, rng):
    """Random points in the cutoff transition band."""
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    rho = rng.uniform(CUT.rho_one + 1e-3, CUT.rho_zero - 1e-3, n)
    return rho[:, None] * u


def _fd_jacobian(f, x, eps):
    out = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        out.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.stack(out, axis=-1)  # [..., i, j]


# --- cutoff ---------------------------------------------------------------


def test_smoothstep_endpoints():
    t = np.array([0.0, 1.0])
    s, s1, s2, s3 = tr._smoothstep7(t)
    np.testing.assert_allclose(s, [0.0, 1.0], atol=1e-15)
    for d in (s1, s2, s3):
        np.testing.assert_allclose(d, 0.0, atol=1e-12)


def test_cutoff_plateaus():
    pts = np.array([[1.0, 0, 0], [0, 3.24, 0], [0, 0, 3.63], [2.6, 2.6, 0]])
    psi = CUT.value(pts)
    np.testing.assert_allclose(psi[:2], 1.0, atol=0)
    np.testing.assert_allclose(psi[2:], 0.0, atol=0)
    np.testing.assert_allclose(CUT.grad(pts), 0.0, atol=0)
    np.testing.assert_allclose(CUT.hess(pts), 0.0, atol=0)
    np.testing.assert_allclose(CUT.third(pts), 0.0, atol=0)


def test_cutoff_monotone_in_band():
    rho = np.linspace(CUT.rho_one, CUT.rho_zero, 41)
    pts = np.stack([rho, np.zeros_like(rho), np.zeros_like(rho)], axis=1)
    psi = CUT.value(pts)
    assert psi[0] == 1.0 and psi[-1] == 0.0
    assert np.all(np.diff(psi) < 0)


def test_cutoff_derivative_chain():
    rng = np.random.default_rng(3)
    pts = np.concatenate([_band_points(12, rng),
                          rng.uniform(-0.5, 0.5, (4, 3)) + [[0, 0, 3.4]]])
    eps = 1e-5
    for p in pts:
        fd_g = np.array([(CUT.value(p + _e(j, eps)) - CUT.value(p - _e(j, eps)))[0]
                         / (2 * eps) for j in range(3)])
        np.testing.assert_allclose(CUT.grad(p)[0], fd_g, atol=2e-7)
        fd_h = _fd_jacobian(lambda q: CUT.grad(q)[0], p, eps)
        np.testing.assert_allclose(CUT.hess(p)[0], fd_h, atol=2e-6)
        fd_t = _fd_jacobian(lambda q: CUT.hess(q)[0], p, eps)
        np.testing.assert_allclose(CUT.third(p)[0], fd_t, atol=2e-5)


def _e(j, eps):
    e = np.zeros(3)
    e[j] = eps
    return e


# --- auxiliary field and the transport field ------------------------------


def test_eval_w_curl_is_rigid_field():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-2, 2, (6, 3))
    eps = 1e-6
    for p in pts:
        grad = _fd_jacobian(lambda q: tr.eval_w(q, L, OM, H)[0], p, eps)
        curl = np.array([grad[2, 1] - grad[1, 2],
                         grad[0, 2] - grad[2, 0],
                         grad[1, 0] - grad[0, 1]])
        np.testing.assert_allclose(curl, L + np.cross(OM, p - H), atol=1e-8)


def test_eval_w_value():
    # l = e1 at offset e2 from the centre: 0.5*e1 x e2 - 0.5*omega-part
    w = tr.eval_w(np.array([[0.0, 1.0, 0.0]]), np.array([1.0, 0, 0]),
                  np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(w[0], [0.0, 0.0, 0.5], atol=1e-15)


def test_lambda_is_curl_of_psi_w():
    rng = np.random.default_rng(11)
    pts = _band_points(8, rng)
    eps = 1e-6

    def psi_w(q):
        return CUT.value(q)[0] * tr.eval_w(q, L, OM, H)[0]

    lam = tr.eval_lambda(pts, L, OM, H, CUT)
    for i, p in enumerate(pts):
        grad = _fd_jacobian(psi_w, p, eps)
        curl = np.array([grad[2, 1] - grad[1, 2],
                         grad[0, 2] - grad[2, 0],
                         grad[1, 0] - grad[0, 1]])
        np.testing.assert_allclose(lam[i], curl, atol=1e-8)


def test_lambda_divergence_free_second_order():
    rng = np.random.default_rng(7)
    pts = _band_points(20, rng)
    # analytic divergence: trace of the exact gradient vanishes identically
    _, dlam = tr.eval_lambda(pts, L, OM, H, CUT, derivs=1)
    scale = np.abs(dlam).max()
    assert np.abs(np.einsum("pii->p", dlam)).max() < 1e-13 * scale
    # finite-difference divergence converges to zero at second order
    divs = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        d = np.zeros(len(pts))
        for j in range(3):
            e = _e(j, eps)
            d += (tr.eval_lambda(pts + e, L, OM, H, CUT)[:, j]
                  - tr.eval_lambda(pts - e, L, OM, H, CUT)[:, j]) / (2 * eps)
        divs.append(np.abs(d).max())
    rate = np.log(divs[0] / divs[2]) / np.log(4.0)
    assert rate > 1.8


def test_lambda_regions():
    lam = tr.eval_lambda(np.array([[0.8, 0.2, -0.3]]), L, OM, H, CUT)
    np.testing.assert_allclose(lam[0], L + np.cross(OM, [0.8, 0.2, -0.3] - H), atol=1e-15)
    lam0 = tr.eval_lambda(np.array([[0.0, 3.9, 0.0]]), L, OM, H, CUT)
    np.testing.assert_allclose(lam0[0], 0.0, atol=0)


def test_lambda_gradients_match_fd():
    rng = np.random.default_rng(13)
    pts = np.concatenate([_band_points(6, rng), [[0.5, 0.1, 0.2], [0.0, 3.9, 0.1]]])
    lam, dlam, d2lam = tr.eval_lambda(pts, L, OM, H, CUT, derivs=2)
    eps = 1e-5
    for i, p in enumerate(pts):
        fd1 = _fd_jacobian(lambda q: tr.eval_lambda(q, L, OM, H, CUT)[0], p, eps)
        np.testing.assert_allclose(dlam[i], fd1, atol=1e-5)
        fd2 = _fd_jacobian(
            lambda q: tr.eval_lambda(q, L, OM, H, CUT, derivs=1)[1][0], p, eps)
        np.testing.assert_allclose(d2lam[i], fd2, atol=3e-4)
        np.testing.assert_allclose(d2lam[i], d2lam[i].transpose(0, 2, 1), atol=1e-12)


# --- flow map -------------------------------------------------------------


def _motion(t):
    return (np.array([0.3 * np.cos(t), 0.1 * np.sin(2 * t), -0.2 * np.cos(t)]),
            np.array([0.5 * np.sin(t), 0.4, 0.3 * np.cos(2 * t)]))


def _seed_cloud():
    dom = geo.make_reference_geometry(1.0, 4.0, refinement=0)
    return dom, dom.mesh.vertices


def test_flow_rigid_region_tracks_frame():
    dom, seeds = _seed_cloud()
    times = np.linspace(0.0, 1.0, 41)
    fm = tr.advance_flow(seeds, _motion, times, CUT, second=False)
    solid = dom.mesh.boundary_vertices(geo.TAG_SOLID)
    # trajectories of body points follow h + Q y, Jacobian follows Q
    for k in (10, 25, 40):
        expect = fm.h[k][None, :] + seeds[solid] @ fm.Q[k].T
        np.testing.assert_allclose(fm.X[k, solid], expect, atol=1e-12)
    assert fm.solid_defect(solid) < 1e-12
    # outer-wall points never move
    outer = dom.mesh.boundary_vertices(geo.TAG_OUTER)
    np.testing.assert_allclose(fm.X[-1, outer], seeds[outer], atol=0)
    np.testing.assert_allclose(fm.J[-1, outer],
                               np.broadcast_to(np.eye(3), (len(outer), 3, 3)), atol=0)


def test_flow_preserves_volume_and_orthogonality():
    dom, seeds = _seed_cloud()
    times = np.linspace(0.0, 2.0, 201)
    fm = tr.advance_flow(seeds, _motion, times, CUT, second=False)
    for k in (50, 200):
        np.testing.assert_allclose(fm.det(k), 1.0, atol=1e-9)
    defect = max(np.linalg.norm(fm.Q[k].T @ fm.Q[k] - np.eye(3)) for k in range(201))
    assert defect < 1e-10


def test_flow_fourth_order_in_dt():
    y = np.array([[0.0, 3.3, 0.4], [1.2, 0.8, -0.5]])
    ref = tr.advance_flow(y, _motion, np.linspace(0, 1, 2), CUT, substeps=256,
                          det_tol=np.inf)
    errs = []
    for n in (32, 64):
        fm = tr.advance_flow(y, _motion, np.linspace(0, 1, n + 1), CUT,
                             det_tol=np.inf)
        errs.append(np.abs(fm.X[-1] - ref.X[-1]).max())
    order = np.log2(errs[0] / errs[1])
    assert order > 3.7


def test_flow_jacobian_matches_fd_seed_perturbation():
    y0 = np.array([0.2, 3.35, 0.1])
    times = np.linspace(0, 0.8, 33)
    eps = 1e-5
    seeds = [y0]
    for j in range(3):
        seeds += [y0 + _e(j, eps), y0 - _e(j, eps)]
    fm = tr.advance_flow(np.array(seeds), _motion, times, CUT, second=True)
    fd_J = np.stack([(fm.X[-1, 1 + 2 * j] - fm.X[-1, 2 + 2 * j]) / (2 * eps)
                     for j in range(3)], axis=-1)
    np.testing.assert_allclose(fm.J[-1, 0], fd_J, atol=2e-9)
    fd_dJ = np.stack([(fm.J[-1, 1 + 2 * j] - fm.J[-1, 2 + 2 * j]) / (2 * eps)
                      for j in range(3)], axis=-1)
    np.testing.assert_allclose(fm.dJ[-1, 0], fd_dJ, atol=1e-4)


def test_invert_flow_roundtrip():
    rng = np.random.default_rng(21)
    dom, seeds = _seed_cloud()
    times = np.linspace(0.0, 1.0, 41)
    fm = tr.advance_flow(seeds, _motion, times, CUT)
    x = np.concatenate([_band_points(4, rng), [[0.1, 1.9, 0.3], [2.2, -1.0, 0.6]]])
    y = tr.invert_flow(fm, x)
    back, _ = tr._integrate_to(y, _motion, times, CUT, fm.substeps, fm.h[0], fm.Q[0])
    assert np.linalg.norm(back - x, axis=1).max() < 1e-10


def test_jacobians_inverse_and_second():
    y = np.array([[0.1, 3.3, -0.2], [1.0, 0.5, 0.3]])
    times = np.linspace(0, 0.6, 25)
    fm = tr.advance_flow(y, _motion, times, CUT, second=True, det_tol=1e-9)
    J, JY, det, d2Y = tr.jacobians(fm, len(times) - 1, second=True)
    np.testing.assert_allclose(np.einsum("pij,pjk->pik", J, JY),
                               np.broadcast_to(np.eye(3), J.shape), atol=1e-12)
    np.testing.assert_allclose(det, 1.0, atol=1e-7)
    np.testing.assert_allclose(d2Y, d2Y.transpose(0, 1, 3, 2), atol=1e-9)
    # rigid region: inverse map is affine, second gradient vanishes
    np.testing.assert_allclose(d2Y[1], 0.0, atol=1e-12)


def test_pullback_pushforward_roundtrip():
    y = np.array([[0.3, 3.3, 0.0], [0.9, 0.4, -0.2], [0.0, 3.9, 0.0]])
    times = np.linspace(0, 0.5, 21)
    fm = tr.advance_flow(y, _motion, times, CUT)
    k = len(times) - 1

    def u_spatial(x):
        return np.stack([x[:, 1] ** 2, np.sin(x[:, 0]), x[:, 2]], axis=1)

    def p_spatial(x):
        return x[:, 0] * x[:, 2]

    ut, pt = tr.pullback_fields(fm, k, u_spatial, p_spatial)
    u_vals = u_spatial(fm.X[k])
    np.testing.assert_allclose(pt, p_spatial(fm.X[k]), atol=0)
    u_fwd = tr.pushforward_fields(fm, k, lambda yy: ut)
    np.testing.assert_allclose(u_fwd, u_vals, atol=1e-12)


def test_pullback_preserves_divergence_free():
    # u = curl(sin(yz), x^2, cos(x+y)): solenoidal, so its volume-preserving
    # pullback is solenoidal in the reference variable as well
    def u_spatial(x):
        a, b, c = x[:, 0], x[:, 1], x[:, 2]
        return np.stack([
            -np.sin(a + b),
            b * np.cos(b * c) + np.sin(a + b),
            2 * a - c * np.cos(b * c),
        ], axis=1)

    y0 = np.array([0.15, 3.32, 0.05])
    times = np.linspace(0, 0.7, 29)
    divs = []
    grad_scale = 1.0
    for eps in (4e-4, 1e-4):
        seeds = [y0]
        for j in range(3):
            seeds += [y0 + _e(j, eps), y0 - _e(j, eps)]
        fm = tr.advance_flow(np.array(seeds), _motion, times, CUT, substeps=4)
        k = len(times) - 1
        ut = tr.pullback_fields(fm, k, u_spatial)
        divs.append(abs(sum((ut[1 + 2 * j, j] - ut[2 + 2 * j, j]) / (2 * eps)
                            for j in range(3))))
        grad_scale = max(np.abs((ut[1 + 2 * j] - ut[2 + 2 * j]) / (2 * eps)).max()
                         for j in range(3))
    # solenoidal up to finite-difference truncation: second-order decay ...
    rate = np.log(divs[0] / divs[1]) / np.log(4.0)
    assert rate > 1.8
    # ... and a tiny fraction of the gradient entries feeding the difference
    assert divs[1] < 1e-5 * grad_scale


def test_tabulated_motion_interpolates():
    times = np.linspace(0, 1, 11)
    lv = np.stack([_motion(t)[0] for t in times])
    wv = np.stack([_motion(t)[1] for t in times])
    mot = tr.TabulatedMotion(times, lv, wv)
    l, w = mot(times[4])
    np.testing.assert_allclose(l, lv[4], atol=1e-15)
    np.testing.assert_allclose(w, wv[4], atol=1e-15)
    l_mid, _ = mot(0.45)
    np.testing.assert_allclose(l_mid, 0.5 * (lv[4] + lv[5]), atol=1e-15)
    with pytest.raises(ValueError):
        tr.TabulatedMotion(times, lv[:-1], wv)
