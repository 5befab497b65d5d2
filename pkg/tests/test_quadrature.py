from __future__ import annotations

from math import factorial

import numpy as np
import pytest

from slipfsi import quadrature as quad


def _tet_monomial_exact(a, b, c):
    # int over the reference tet of x^a y^b z^c, divided by the volume 1/6
    return 6.0 * factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3)


def _tri_monomial_exact(a, b):
    return 2.0 * factorial(a) * factorial(b) / factorial(a + b + 2)


@pytest.mark.parametrize("rule,deg", [
    (quad.tet_rule_deg2, 2),
    (quad.tet_rule_deg4, 4),
    (quad.tet_rule_deg8, 8),
])
def test_tet_rules_exact_to_stated_degree(rule, deg):
    bary, wts = rule()
    assert wts.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(bary >= -1e-14)
    np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-13)
    x, y, z = bary[:, 1], bary[:, 2], bary[:, 3]
    for a in range(deg + 1):
        for b in range(deg + 1 - a):
            for c in range(deg + 1 - a - b):
                got = np.sum(wts * x**a * y**b * z**c)
                assert got == pytest.approx(_tet_monomial_exact(a, b, c),
                                            rel=1e-12, abs=1e-15)


def test_deg8_rule_handles_bubble_products():
    # the quartic bubble squared: total degree 8, the stated limit
    bary, wts = quad.tet_rule_deg8()
    b2 = (256.0 * bary.prod(axis=1)) ** 2
    # mean value over the tet: int b^2 = (8192/51975) V
    assert np.sum(wts * b2) == pytest.approx(8192.0 / 51975.0, rel=1e-12)


@pytest.mark.parametrize("rule,deg", [
    (quad.tri_rule_deg2, 2),
    (quad.tri_rule_deg4, 4),
])
def test_tri_rules_exact_to_stated_degree(rule, deg):
    bary, wts = rule()
    assert wts.sum() == pytest.approx(1.0, abs=1e-14)
    x, y = bary[:, 1], bary[:, 2]
    for a in range(deg + 1):
        for b in range(deg + 1 - a):
            got = np.sum(wts * x**a * y**b)
            assert got == pytest.approx(_tri_monomial_exact(a, b),
                                        rel=1e-12, abs=1e-15)
