"""Fixed quadrature rules on the reference triangle and the unit interval.

The triangle rule is a 6-point symmetric rule exact for polynomials of
degree 4, which covers every integrand assembled in this package
(P2 x P2 products with subdomain-constant coefficients). Edge integrals
use 3-point Gauss, exact for degree 5.
"""

import numpy as np

# 6-point symmetric triangle rule, degree of exactness 4 (Dunavant).
# Barycentric coordinates and weights normalized so weights sum to 1;
# physical integrals multiply by the triangle area.
_A1 = 0.445948490915965
_B1 = 1.0 - 2.0 * _A1
_W1 = 0.223381589678011
_A2 = 0.091576213509771
_B2 = 1.0 - 2.0 * _A2
_W2 = 0.109951743655322

TRI_BARY = np.array(
    [
        [_B1, _A1, _A1],
        [_A1, _B1, _A1],
        [_A1, _A1, _B1],
        [_B2, _A2, _A2],
        [_A2, _B2, _A2],
        [_A2, _A2, _B2],
    ]
)
TRI_WEIGHTS = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

# Reference coordinates (xi, eta) with lambda = (1 - xi - eta, xi, eta).
TRI_POINTS = TRI_BARY[:, 1:].copy()

# 3-point Gauss on [0, 1], exact for degree 5.
_G = np.sqrt(3.0 / 5.0)
EDGE_POINTS = 0.5 * (1.0 + np.array([-_G, 0.0, _G]))
EDGE_WEIGHTS = 0.5 * np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


def triangle_points(vertices):
    """Map the reference rule onto physical triangles.

    Parameters
    ----------
    vertices : array (n, 3, 2)
        Triangle corner coordinates.

    Returns
    -------
    points : array (n, 6, 2)
    """
    vertices = np.asarray(vertices, dtype=float)
    return np.einsum("qk,nkd->nqd", TRI_BARY, vertices)


def edge_points(p0, p1):
    """Gauss points on segments p0->p1, shape (n, 3, 2)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    t = EDGE_POINTS[None, :, None]
    return (1.0 - t) * p0[:, None, :] + t * p1[:, None, :]
