"""Tensor-product and polar quadrature rules used across the package."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def gauss_legendre(n: int):
    """Nodes and weights of the ``n``-point Gauss-Legendre rule on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def rectangle_rule(c1, c2, n=128):
    """Tensor Gauss-Legendre nodes on ``[-c1, c1] x [-c2, c2]``.

    Returns ``(x1, x2, w)`` as flat arrays; the weights sum to the rectangle
    area ``4 c1 c2``.
    """
    x, w = gauss_legendre(n)
    X1, X2 = np.meshgrid(c1 * x, c2 * x, indexing="ij")
    W = np.outer(c1 * w, c2 * w)
    return X1.ravel(), X2.ravel(), W.ravel()


def disc_polar_rule(n_radial=256, n_angular=512):
    """Product rule for the unit disc under the *normalized* uniform measure.

    Radial direction uses Gauss-Legendre in ``s = r**2`` (so that polynomials
    in ``|u|**2`` are integrated exactly), angular direction the trapezoid rule
    (exact for trigonometric polynomials of degree < ``n_angular``).

    Returns ``(u1, u2, w)`` flat arrays with ``w.sum() == 1``.
    """
    x, wx = gauss_legendre(n_radial)
    s = 0.5 * (x + 1.0)
    ws = 0.5 * wx
    theta = 2.0 * np.pi * (np.arange(n_angular) + 0.5) / n_angular
    r = np.sqrt(s)
    U1 = np.outer(r, np.cos(theta))
    U2 = np.outer(r, np.sin(theta))
    # dA = (1/2) ds dtheta, normalized by pi
    W = np.outer(ws, np.full(n_angular, 2.0 * np.pi / n_angular)) / (2.0 * np.pi)
    return U1.ravel(), U2.ravel(), W.ravel()


def disc_flight_rule(n_axial=256, n_transverse=256):
    """Quadrature on the unit disc adapted to the free-flight singularity.

    A velocity projection ``u = (u_tau, u_e)`` is written as
    ``u_e = sin(beta)``, ``u_tau = cos(beta) sin(alpha)`` and the remaining
    normal component is ``cos(beta) cos(alpha)`` with
    ``alpha, beta`` in ``(-pi/2, pi/2)``.  In these angles the flight time and
    axial displacement are smooth, so Gauss-Legendre converges spectrally.

    Returns ``(u_tau, u_e, w)`` where ``w`` already contains the Jacobian
    ``cos(beta)**2 cos(alpha)`` and the ``1/pi`` normalization.
    """
    xa, wa = gauss_legendre(n_transverse)
    xb, wb = gauss_legendre(n_axial)
    alpha = 0.5 * np.pi * xa
    beta = 0.5 * np.pi * xb
    B, Al = np.meshgrid(beta, alpha, indexing="ij")
    W = np.outer(wb, wa) * (0.5 * np.pi) ** 2
    W = W * np.cos(B) ** 2 * np.cos(Al) / np.pi
    ut = np.cos(B) * np.sin(Al)
    ue = np.sin(B)
    return ut.ravel(), ue.ravel(), W.ravel()
