"""Quadrature rules on the reference triangle.

The reference triangle is {(x, y): x >= 0, y >= 0, x + y <= 1} with area
1/2; weights of every rule sum to 1/2, so that an integral over a physical
triangle of area A is 2*A * sum(w_q * g(x_q)).
"""

from dataclasses import dataclass

import numpy as np

# Two-orbit degree-4 rule: barycentric orbits (1-2a, a, a).
_A1 = 0.44594849091596488632
_A2 = 0.09157621350977074346
_W1 = 0.22338158967801146570
_W2 = 0.10995174365532186764


class UnsupportedDegree(ValueError):
    """Requested polynomial degree has no registered rule."""


@dataclass(frozen=True)
class QuadratureRule:
    """Points (reference coordinates) and weights; exact up to ``degree``."""

    degree: int
    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)


def quadrature_rule(degree):
    """Return a rule integrating polynomials of ``degree`` exactly.

    Parameters
    ----------
    degree : int
        One of 1 (centroid), 2 (edge midpoints) or 4 (6-point rule).
    """
    if degree == 1:
        pts = np.array([[1.0 / 3.0, 1.0 / 3.0]])
        wts = np.array([0.5])
    elif degree == 2:
        pts = np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])
        wts = np.full(3, 1.0 / 6.0)
    elif degree == 4:
        pts = []
        wts = []
        for a, w in ((_A1, _W1), (_A2, _W2)):
            # barycentric (l0, l1, l2) -> (x, y) = (l1, l2)
            pts += [(a, a), (1.0 - 2.0 * a, a), (a, 1.0 - 2.0 * a)]
            wts += [0.5 * w] * 3
        pts = np.array(pts)
        wts = np.array(wts)
    else:
        raise UnsupportedDegree(f"no triangle rule of degree {degree}; use 1, 2 or 4")
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(degree, pts, wts)
