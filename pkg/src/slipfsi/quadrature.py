"""Quadrature rules on the reference tetrahedron and triangle.

Barycentric tables, all-positive weights (the collapsed-coordinate rule has
positive weights by construction). Exactness is pinned by tests against the
closed-form monomial integrals on the reference simplices.
"""

from __future__ import annotations

import numpy as np


def tet_rule_deg8():
    """216-point collapsed-coordinate Gauss rule, exact to total degree 8.

    Tensor Gauss-Legendre points pushed through the Duffy map
    (u, v, t) -> (u, v(1-u), t(1-u)(1-v)); a barycentric monomial of total
    degree d pulls back to per-variable degree at most d + 2, so six points
    per direction (exact to 11) cover total degree 8 with margin.  Positive
    weights, same (bary, weights) contract as the other tet rules: weights
    sum to one.
    """
    x, w = np.polynomial.legendre.leggauss(6)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v, t = np.meshgrid(x, x, x, indexing="ij")
    wu, wv, wt = np.meshgrid(w, w, w, indexing="ij")
    xi = u.ravel()
    eta = (v * (1 - u)).ravel()
    zeta = (t * (1 - u) * (1 - v)).ravel()
    wts = (wu * wv * wt * (1 - u) ** 2 * (1 - v)).ravel()
    bary = np.column_stack([1.0 - xi - eta - zeta, xi, eta, zeta])
    return bary, wts * 6.0


def tet_rule_deg4():
    """14-point degree-4 rule on the reference tetrahedron (volume 1/6).

    Returns (bary, weights): bary is (14, 4) barycentric coordinates, weights
    sum to 1 and are scaled so that sum(w_i * f(x_i)) * V approximates the
    mean-value integral (multiply by element volume).
    """
    pts = []
    # vertex-like orbit (4 points)
    a = 0.3108859192633006
    w1 = 0.1126879257180159
    for i in range(4):
        b = np.full(4, a)
        b[i] = 1.0 - 3.0 * a
        pts.append((b, w1))
    # second orbit (4 points)
    a = 0.09273525031089123
    w2 = 0.0734930431163620
    for i in range(4):
        b = np.full(4, a)
        b[i] = 1.0 - 3.0 * a
        pts.append((b, w2))
    # edge-midpoint-like orbit (6 points)
    a = 0.0455037041256497
    w3 = 0.0425460207770815
    for i in range(4):
        for j in range(i + 1, 4):
            b = np.full(4, a)
            b[i] = 0.5 - a
            b[j] = 0.5 - a
            pts.append((b, w3))
    bary = np.array([p for p, _ in pts])
    wts = np.array([w for _, w in pts])
    return bary, wts


def tet_rule_deg2():
    """4-point degree-2 rule on the reference tetrahedron."""
    a = (5.0 - np.sqrt(5.0)) / 20.0
    b = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
    bary = np.full((4, 4), a)
    np.fill_diagonal(bary, b)
    wts = np.full(4, 0.25)
    return bary, wts


def tri_rule_deg4():
    """6-point degree-4 rule on the reference triangle (Dunavant)."""
    a1 = 0.445948490915965
    w1 = 0.223381589678011
    a2 = 0.091576213509771
    w2 = 0.109951743655322
    bary = []
    wts = []
    for a, w in ((a1, w1), (a2, w2)):
        for i in range(3):
            b = np.full(3, a)
            b[i] = 1.0 - 2.0 * a
            bary.append(b)
            wts.append(w)
    return np.array(bary), np.array(wts)


def tri_rule_deg2():
    """3-point degree-2 midpoint rule on the reference triangle."""
    bary = np.full((3, 3), 0.5)
    np.fill_diagonal(bary, 0.0)
    wts = np.full(3, 1.0 / 3.0)
    return bary, wts
