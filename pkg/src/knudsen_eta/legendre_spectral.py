"""Generalized Legendre eigen-system on the unit disc and the constant ``C``.

The operator ``A psi = div((1 - |u|^2) grad psi)`` has polynomial
eigenfunctions ``F(-l, l+k+1; k+1; |u|^2) r^k cos(k theta)`` (and ``sin``),
with ``F`` a terminating hypergeometric series.  ``C`` collects the squared
projections of the normalized axial displacement on these modes, divided by
the eigenvalues.  Two eigenvalue conventions are carried side by side:

``formula``
    ``(2l + 1)(2l + 2k + 1)``
``verified``
    the value obtained by applying the operator to the mode exactly,
    ``4 l (l + k + 1) + 2k``

All lengths are in units of the channel radius and speeds in units of the
molecular speed.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import eval_jacobi

from .errors import OutOfRegime, TruncationNotConverged
from .microgeometry import LOW_ROUGHNESS_LIMIT, RegimeWarning
from .quadrature import disc_flight_rule, disc_polar_rule

C_CIRCLE_REFERENCE = 0.685
X_NORM_SQ_PRINTED = 4.0 / 3.0  # printed second moment of X for R = 1
MAX_DEGREE = 200
CONVENTIONS = ("formula", "verified")


# ---------------------------------------------------------------------------
# radial polynomials


@lru_cache(maxsize=None)
def radial_coefficients(l: int, k: int) -> tuple:
    """Exact coefficients of ``F(-l, l+k+1; k+1; s)`` in powers of ``s``."""
    if l < 0 or k < 0:
        raise ValueError("indices must be non-negative")
    if l + k > MAX_DEGREE:
        raise OverflowError(f"l + k = {l + k} exceeds {MAX_DEGREE}")
    c = [Fraction(1)]
    for n in range(l):
        # ratio of consecutive terms of the hypergeometric series
        c.append(c[-1] * Fraction((n - l) * (n + l + k + 1), (n + k + 1) * (n + 1)))
    return tuple(c)


def hypergeometric_terminating(l: int, k: int, s):
    """Evaluate ``F(-l, l+k+1; k+1; s)`` by Horner's rule on exact coefficients.

    Fine for moderate ``l``; the alternating coefficients grow like
    ``4**l`` so beyond ``l ~ 20`` cancellation sets in and
    :func:`radial_polynomial` should be used instead.
    """
    coef = [float(x) for x in radial_coefficients(l, k)]
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s) + coef[-1]
    for a in coef[-2::-1]:
        out = out * s + a
    return out if out.ndim else float(out)


def radial_polynomial(l: int, k: int, s):
    """Same polynomial via the Jacobi three-term recurrence (stable for all ``l``).

    ``F(-l, l+k+1; k+1; s) = P_l^{(k,0)}(1 - 2s) / P_l^{(k,0)}(1)``.
    """
    if l + k > MAX_DEGREE:
        raise OverflowError(f"l + k = {l + k} exceeds {MAX_DEGREE}")
    s = np.asarray(s, dtype=float)
    return eval_jacobi(l, k, 0.0, 1.0 - 2.0 * s) / math.comb(l + k, l)


# ---------------------------------------------------------------------------
# modes


@dataclass(frozen=True)
class EigenMode:
    k: int
    l: int
    j: str = "cos"

    def __post_init__(self):
        if self.k < 0 or self.l < 0:
            raise ValueError("mode indices must be non-negative")
        if self.j not in ("cos", "sin"):
            raise ValueError("j must be 'cos' or 'sin'")
        if self.k == 0 and self.j == "sin":
            raise ValueError("k = 0 has only the constant angular mode")

    @property
    def formula_eigenvalue(self) -> int:
        return (2 * self.l + 1) * (2 * self.l + 2 * self.k + 1)

    @property
    def verified_eigenvalue(self) -> int:
        return 4 * self.l * (self.l + self.k + 1) + 2 * self.k

    def eigenvalue(self, convention: str) -> int:
        if convention == "formula":
            return self.formula_eigenvalue
        if convention == "verified":
            return self.verified_eigenvalue
        raise ValueError(f"unknown convention {convention!r}")

    @property
    def coefficients(self) -> tuple:
        return radial_coefficients(self.l, self.k)


def all_modes(k_max: int, l_max: int):
    for l in range(l_max + 1):
        for k in range(k_max + 1):
            yield EigenMode(k, l, "cos")
            if k > 0:
                yield EigenMode(k, l, "sin")


def eval_eigenfunction(mode: EigenMode, u) -> np.ndarray:
    """``phi(u) = F(-l, l+k+1; k+1; |u|^2) r^k cos(k theta)`` (or ``sin``)."""
    u = np.asarray(u, dtype=float)
    u1, u2 = u[..., 0], u[..., 1]
    s = u1 * u1 + u2 * u2
    r = np.sqrt(s)
    th = np.arctan2(u2, u1)
    ang = np.cos(mode.k * th) if mode.j == "cos" else np.sin(mode.k * th)
    return radial_polynomial(mode.l, mode.k, s) * r**mode.k * ang


@dataclass(frozen=True)
class EigenCheck:
    mode: EigenMode
    residual: float
    mu: float
    formula: int

    @property
    def agrees_with_formula(self) -> bool:
        return abs(self.mu - self.formula) <= 1e-8 * max(1.0, self.formula)

    def __iter__(self):
        return iter((self.residual, self.mu))


def _poly_mul(a, b):
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def _weighted_inner(a, b, k):
    # int_0^1 a(s) b(s) s^k ds, exact
    return sum(c / (n + k + 1) for n, c in enumerate(_poly_mul(a, b)))


def apply_A_radial(g, k):
    """Radial part of ``A(g(s) H_k)`` where ``H_k`` is harmonic of degree ``k``.

    Uses ``A(g H) = H [(1 - s)(4 s g'' + 4 (k + 1) g') - 4 s g' - 2 k g]``.
    Coefficients are exact fractions.
    """
    g = [Fraction(x) for x in g]
    n = len(g)
    d1 = [i * g[i] for i in range(1, n)] or [Fraction(0)]
    d2 = [i * d1[i] for i in range(1, len(d1))] or [Fraction(0)]
    out = [Fraction(0)] * (n + 2)

    def add(poly, scale, shift):
        for i, c in enumerate(poly):
            out[i + shift] += scale * c

    # (1 - s) * 4 s g''
    add(d2, 4, 1)
    add(d2, -4, 2)
    # (1 - s) * 4 (k + 1) g'
    add(d1, 4 * (k + 1), 0)
    add(d1, -4 * (k + 1), 1)
    add(d1, -4, 1)
    add(g, -2 * k, 0)
    while len(out) > 1 and out[-1] == 0:
        out.pop()
    return out


def verify_eigenpair(mode: EigenMode, quadrature=None) -> EigenCheck:
    """Apply ``A`` to ``mode`` exactly and fit ``mu`` in ``A phi = -mu phi``.

    The fit minimizes ``||A phi + mu phi|| / ||phi||`` over the disc.  With
    ``quadrature=None`` both the fit and the residual are exact rational
    arithmetic; otherwise ``quadrature = (u1, u2, w)`` is used for the norms.
    """
    g = list(mode.coefficients)
    q = apply_A_radial(g, mode.k)
    if quadrature is None:
        gg = _weighted_inner(g, g, mode.k)
        mu = -_weighted_inner(q, g, mode.k) / gg
        r = [x + mu * (g[i] if i < len(g) else 0) for i, x in enumerate(q)]
        if len(g) > len(q):
            r += [mu * x for x in g[len(q):]]
        res2 = _weighted_inner(r, r, mode.k) / gg
        residual, mu = math.sqrt(float(res2)), float(mu)
    else:
        u1, u2, w = quadrature
        s = u1**2 + u2**2
        th = np.arctan2(u2, u1)
        ang = (np.cos if mode.j == "cos" else np.sin)(mode.k * th) * np.sqrt(s) ** mode.k
        phi = npoly.polyval(s, [float(x) for x in g]) * ang
        aphi = npoly.polyval(s, [float(x) for x in q]) * ang
        nphi = np.dot(w, phi * phi)
        mu = -np.dot(w, aphi * phi) / nphi
        residual = math.sqrt(max(np.dot(w, (aphi + mu * phi) ** 2), 0.0) / nphi)
    return EigenCheck(mode, residual, float(mu), mode.formula_eigenvalue)


# ---------------------------------------------------------------------------
# polynomial generator in Cartesian coefficients


def poly2d_eval(c, u1, u2):
    """``sum c[i, j] u1**i u2**j``."""
    return npoly.polyval2d(u1, u2, np.asarray(c, dtype=float))


def _pad(c, shape):
    out = np.zeros(shape)
    out[: c.shape[0], : c.shape[1]] = c
    return out


def apply_generator(c, Lambda, rho: float = 1.0) -> np.ndarray:
    """Coefficients of ``L psi = -4 <grad psi, Lambda u> + 2 (rho^2 - |u|^2) Tr(Lambda Hess psi)``.

    ``c`` holds the monomial coefficients of ``psi`` as in :func:`poly2d_eval`.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    L = np.asarray(Lambda, dtype=float)
    shape = (c.shape[0] + 2, c.shape[1] + 2)
    p1 = npoly.polyder(c, axis=0)
    p2 = npoly.polyder(c, axis=1)
    p11 = npoly.polyder(c, 2, axis=0)
    p22 = npoly.polyder(c, 2, axis=1)
    p12 = npoly.polyder(p1, axis=1)
    tr = L[0, 0] * _pad(p11, shape) + (L[0, 1] + L[1, 0]) * _pad(p12, shape) + L[1, 1] * _pad(p22, shape)
    # multiply by (rho^2 - u1^2 - u2^2)
    w = rho**2 * tr
    w[2:, :] -= tr[:-2, :]
    w[:, 2:] -= tr[:, :-2]
    out = 2.0 * w
    # drift: -4 [p1 (L u)_1 + p2 (L u)_2]
    for grad, row in ((_pad(p1, shape), 0), (_pad(p2, shape), 1)):
        out[1:, :] -= 4.0 * L[row, 0] * grad[:-1, :]
        out[:, 1:] -= 4.0 * L[row, 1] * grad[:, :-1]
    return out


# ---------------------------------------------------------------------------
# displacement function


def displacement_on_disc(u, R: float = 1.0):
    """Axial displacement of the free flight leaving the wall with projection ``u``.

    ``X = 2 R u_e n / (n^2 + u_tau^2)`` with ``n = sqrt(1 - |u|^2)``;
    ``u = (u_tau, u_e)``.  On the rim the value is finite except at
    ``u_tau = 0``, where 0 is returned.
    """
    u = np.asarray(u, dtype=float)
    ut, ue = u[..., 0], u[..., 1]
    n2 = np.clip(1.0 - ut * ut - ue * ue, 0.0, None)
    n = np.sqrt(n2)
    den = n2 + ut * ut
    with np.errstate(invalid="ignore", divide="ignore"):
        X = np.where(den > 0, 2.0 * R * ue * n / np.where(den > 0, den, 1.0), 0.0)
    return X if X.ndim else float(X)


def flight_time_on_disc(u, R: float = 1.0, rho: float = 1.0):
    """Time to the next wall collision, ``T = 2 R n / (rho (n^2 + u_tau^2))``."""
    u = np.asarray(u, dtype=float) / rho
    ut = u[..., 0]
    n2 = np.clip(1.0 - np.sum(u * u, axis=-1), 0.0, None)
    n = np.sqrt(n2)
    den = n2 + ut * ut
    with np.errstate(invalid="ignore", divide="ignore"):
        T = np.where(den > 0, 2.0 * R * n / (rho * np.where(den > 0, den, 1.0)), 0.0)
    return T if T.ndim else float(T)


def flight_moments(R: float = 1.0, rho: float = 1.0, n: int = 400) -> dict:
    """Quadrature oracle for ``E[T]``, ``E[X]``, ``E[X^2]`` and ``E[X u_e]``.

    Uses the angle substitution of :func:`disc_flight_rule` under which both
    integrands are smooth.
    """
    ut, ue, w = disc_flight_rule(n, n)
    u = np.column_stack([ut, ue])
    T = flight_time_on_disc(u * rho, R, rho)
    X = displacement_on_disc(u, R)
    return {
        "E_T": float(np.dot(w, T)),
        "E_X": float(np.dot(w, X)),
        "E_X2": float(np.dot(w, X * X)),
        "E_X_ue": float(np.dot(w, X * ue)),
        "weight_sum": float(w.sum()),
    }


# ---------------------------------------------------------------------------
# the series for C


@dataclass
class SeriesAccumulator:
    """Per-mode contributions and per-``l`` partial sums of the series for ``C``.

    ``B[conv][l]`` is the sum of the terms with that ``l`` (all ``k``);
    ``running[conv][l]`` is ``C`` truncated at ``l``.
    """

    k_max: int
    l_max: int
    x_norm_sq: float
    x_norm_source: str
    modes: list = field(default_factory=list)
    projections: np.ndarray = None  # <phi_hat, X_bar>, orthonormal phi_hat
    B: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def C(self) -> dict:
        return {conv: float(self.running[conv][-1]) for conv in CONVENTIONS}

    @property
    def parseval_sum(self) -> float:
        return float(np.sum(self.projections**2))

    def converged(self, convention: str) -> bool:
        return bool(self.B[convention][-1] <= self.tol * self.running[convention][-1])

    def max_even_k_projection(self) -> float:
        even = np.array([m.k % 2 == 0 for m in self.modes])
        return float(np.max(np.abs(self.projections[even]))) if even.any() else 0.0

    def contributions(self, convention: str) -> np.ndarray:
        lam = np.array([m.eigenvalue(convention) for m in self.modes], dtype=float)
        out = np.zeros(len(self.modes))
        nz = lam > 0
        out[nz] = 0.5 * self.projections[nz] ** 2 / lam[nz]
        return out

    def to_rows(self):
        rows = []
        for l in range(self.l_max + 1):
            row = {"l": l}
            for conv in CONVENTIONS:
                row[f"B_{conv}"] = float(self.B[conv][l])
                row[f"C_{conv}"] = float(self.running[conv][l])
            rows.append(row)
        return rows

    def to_csv(self, path):
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            for row in rows:
                wr.writerow({k: (v if k == "l" else repr(v)) for k, v in row.items()})

    def to_dict(self):
        return {
            "k_max": self.k_max,
            "l_max": self.l_max,
            "x_norm_sq": self.x_norm_sq,
            "x_norm_source": self.x_norm_source,
            "C": self.C,
            "parseval_sum": self.parseval_sum,
            "converged": {conv: self.converged(conv) for conv in CONVENTIONS},
            "last_B": {conv: float(self.B[conv][-1]) for conv in CONVENTIONS},
        }


def _angular_projections(k_max, n_radial, n_angular, measure_scale):
    """Radial nodes/weights and the angular moments of ``X`` on them."""
    u1, u2, w = disc_polar_rule(n_radial, n_angular)
    w = w * measure_scale
    s = (u1**2 + u2**2).reshape(n_radial, n_angular)
    th = np.arctan2(u2, u1).reshape(n_radial, n_angular)
    X = displacement_on_disc(np.column_stack([u1, u2])).reshape(n_radial, n_angular)
    W = w.reshape(n_radial, n_angular)
    ks = np.arange(k_max + 1)
    cosk = np.cos(ks[:, None, None] * th[None])
    sink = np.sin(ks[:, None, None] * th[None])
    # sum over angle of X * trig * weight -> (k, radial)
    px = {"cos": np.einsum("krt,rt,rt->kr", cosk, X, W), "sin": np.einsum("krt,rt,rt->kr", sink, X, W)}
    pp = {"cos": np.einsum("krt,rt->kr", cosk**2, W), "sin": np.einsum("krt,rt->kr", sink**2, W)}
    return s[:, 0], px, pp, float(np.sum(W * X * X))


def compute_C(
    k_max: int = 35,
    l_max: int = 35,
    quadrature=(256, 512),
    x_norm: str = "oracle",
    measure_scale: float = 1.0,
    tol: float = 1e-4,
    strict: bool = False,
) -> SeriesAccumulator:
    """Truncated series ``C = 1/2 sum <phi, X_bar>^2 / (lambda ||phi||^2)``.

    Real ``cos``/``sin`` modes are used; each carries half of the squared
    projection of the pair of complex modes ``j = +-1``, which is where the
    factor ``1/2`` goes.  ``X_bar = X / ||X||`` with ``||X||^2`` taken from
    the quadrature oracle (``x_norm="oracle"``) or the printed value
    ``4/3`` (``x_norm="printed"``).

    ``measure_scale`` multiplies the quadrature weights; ``C`` does not depend
    on it since only ratios of inner products enter.

    Raises
    ------
    TruncationNotConverged
        if ``strict`` and the last ``B_l`` of the verified convention exceeds
        ``tol * C``.
    """
    if k_max < 0 or l_max < 0:
        raise ValueError("truncation must be non-negative")
    n_radial, n_angular = quadrature
    if n_angular <= 2 * k_max + 2:
        raise ValueError("angular rule too coarse for k_max")
    s, px, pp, xx = _angular_projections(k_max, n_radial, n_angular, measure_scale)
    if x_norm == "oracle":
        norm_sq = flight_moments(n=400)["E_X2"] * measure_scale
    elif x_norm == "printed":
        norm_sq = X_NORM_SQ_PRINTED * measure_scale
    elif x_norm == "quadrature":
        norm_sq = xx
    else:
        raise ValueError(f"unknown x_norm {x_norm!r}")

    modes = list(all_modes(k_max, l_max))
    proj = np.zeros(len(modes))
    rk = {k: np.sqrt(s) ** k for k in range(k_max + 1)}
    radial = {}
    for i, m in enumerate(modes):
        key = (m.l, m.k)
        if key not in radial:
            radial[key] = radial_polynomial(m.l, m.k, s) * rk[m.k]
        g = radial[key]
        ip = np.dot(px[m.j][m.k], g)
        nn = np.dot(pp[m.j][m.k], g * g)
        proj[i] = ip / math.sqrt(nn * norm_sq)

    acc = SeriesAccumulator(k_max, l_max, norm_sq / measure_scale, x_norm, modes, proj, tol=tol)
    ls = np.array([m.l for m in modes])
    for conv in CONVENTIONS:
        terms = acc.contributions(conv)
        B = np.array([math.fsum(terms[ls == l]) for l in range(l_max + 1)])
        acc.B[conv] = B
        acc.running[conv] = np.cumsum(B)
    if strict and not acc.converged("verified"):
        raise TruncationNotConverged(
            f"last partial sum B_{l_max} = {acc.B['verified'][-1]:.3g} exceeds {tol:g} * C = {tol * acc.C['verified']:.3g}"
        )
    return acc


@lru_cache(maxsize=8)
def default_C(convention: str = "verified", x_norm: str = "oracle", truncation: int = 35) -> float:
    """Cached ``C`` at the default quadrature."""
    return compute_C(truncation, truncation, x_norm=x_norm).C[convention]


# ---------------------------------------------------------------------------
# theta factorization


def theta_eta_from_microparams(lam: float, h: float, C: float):
    """``theta = lam h / C`` and ``eta = (2 - theta) / theta``.

    Warns (:class:`RegimeWarning`) when ``theta > 1`` or ``h`` lies outside
    the low-roughness regime; raises :class:`OutOfRegime` when ``theta >= 2``.
    """
    if not (0 < lam <= 1):
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    if h <= 0 or C <= 0:
        raise ValueError("h and C must be positive")
    theta = lam * h / C
    if h > LOW_ROUGHNESS_LIMIT:
        warnings.warn(f"h = {h:.3g} exceeds the low-roughness limit {LOW_ROUGHNESS_LIMIT}", RegimeWarning, stacklevel=2)
    if theta >= 2:
        raise OutOfRegime(f"theta = {theta:.3g} >= 2 gives a non-positive enhancement")
    if theta > 1:
        warnings.warn(f"theta = {theta:.3g} > 1: more diffuse than the cosine law", RegimeWarning, stacklevel=2)
    return theta, (2.0 - theta) / theta
