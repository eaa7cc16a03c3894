"""Billiard-cell microgeometry and its signature parameters.

A cell is a periodic tile of the effective channel surface: the graph of a
height function ``f`` over the rectangle ``[-c1, c1] x [-c2, c2]``.  Gas
molecules enter through the opening plane above the relief, reflect
specularly one or more times and leave through the same plane.

Coordinates inside a cell: ``x1`` runs along the cross-section tangent,
``x2`` along the channel axis and ``z`` points into the gas.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.optimize import minimize

from .errors import DegenerateFlat, InvalidFamilyParams
from .quadrature import rectangle_rule


class RegimeWarning(UserWarning):
    """Emitted when inputs leave the low-roughness regime of the theory."""


#: flatness above which the small-h theory is flagged as unreliable
LOW_ROUGHNESS_LIMIT = 0.1
ISOTROPY_TOL = 1e-3


class SurfaceCell:
    """Height field over a rectangular cell opening with periodic side faces.

    Subclasses provide :meth:`height` and :meth:`gradient`; those with a
    closed-form ray intersection override :meth:`intersect`.  Instances are
    immutable after construction.
    """

    family = "custom"
    analytic_intersection = False

    def __init__(self, c1: float, c2: float, params: Optional[dict] = None):
        if not (c1 > 0 and c2 > 0):
            raise InvalidFamilyParams(f"cell half-widths must be positive, got {c1}, {c2}")
        self.c1 = float(c1)
        self.c2 = float(c2)
        self.params = dict(params or {})
        self._top = None

    # --- geometry -------------------------------------------------------
    def height(self, x1, x2):
        raise NotImplementedError

    def gradient(self, x1, x2):
        raise NotImplementedError

    @property
    def size(self) -> float:
        return min(self.c1, self.c2)

    @property
    def area(self) -> float:
        return 4.0 * self.c1 * self.c2

    def max_height(self) -> float:
        x = np.linspace(-self.c1, self.c1, 257)
        y = np.linspace(-self.c2, self.c2, 257)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return float(np.max(self.height(X, Y)))

    def min_height(self) -> float:
        x = np.linspace(-self.c1, self.c1, 257)
        y = np.linspace(-self.c2, self.c2, 257)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return float(np.min(self.height(X, Y)))

    @property
    def top(self) -> float:
        """Height of the opening plane (strictly above the relief)."""
        if self._top is None:
            self._top = self.max_height() + 1e-6 * self.size
        return self._top

    def normal(self, x1, x2, z=None):
        """Unit normal of the graph pointing into the gas, shape ``(..., 3)``."""
        g1, g2 = self.gradient(x1, x2)
        nrm = np.sqrt(1.0 + g1 * g1 + g2 * g2)
        return np.stack([-g1 / nrm, -g2 / nrm, 1.0 / nrm], axis=-1)

    # --- ray intersection -----------------------------------------------
    def intersect(self, p, d, t_max, t_min=None):
        """First hit parameter of rays ``p + t d`` with the relief.

        Only hits with ``t_min < t < t_max`` are reported; ``inf`` marks a
        miss.  ``p`` and ``d`` have shape ``(n, 3)`` with ``p`` inside the
        cell column.  Returns ``(t, normal)`` with the unit normal at the hit.
        """
        return self.intersect_numeric(p, d, t_max, t_min)

    def intersect_numeric(self, p, d, t_max, t_min=None, n_sub=64, tol=1e-12):
        """Safeguarded marching plus bisection on ``z(t) - f(x(t))``.

        The marching step moves the ray by at most ``size / n_sub``; a sign
        change is refined by bisection until the bracket is below
        ``tol * size``.
        """
        p = np.atleast_2d(np.asarray(p, dtype=float))
        d = np.atleast_2d(np.asarray(d, dtype=float))
        n = len(p)
        if t_min is None:
            t_min = 1e-10 * self.size
        t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (n,)).copy()
        # downward rays must hit before descending below the lowest point
        fmin = self.min_height() - 1e-9 * self.size
        down = d[:, 2] < 0
        t_floor = np.full(n, np.inf)
        t_floor[down] = (p[down, 2] - fmin) / (-d[down, 2])
        t_end = np.minimum(t_max, t_floor * (1 + 1e-9) + 1e-12 * self.size)

        step = self.size / n_sub
        t_hit = np.full(n, np.inf)

        def gap(t, idx):
            x = p[idx] + t[:, None] * d[idx]
            x1 = np.clip(x[:, 0], -self.c1, self.c1)
            x2 = np.clip(x[:, 1], -self.c2, self.c2)
            return x[:, 2] - self.height(x1, x2)

        active = np.flatnonzero(np.isfinite(t_end) & (t_end > t_min))
        lo = np.full(n, float(t_min))
        while active.size:
            hi = np.minimum(lo[active] + step, t_end[active])
            g = gap(hi, active)
            crossed = g <= 0
            done = ~crossed & (hi >= t_end[active])
            if np.any(crossed):
                idx = active[crossed]
                a = lo[idx].copy()
                b = hi[crossed].copy()
                while True:
                    wide = (b - a) > tol * self.size
                    if not np.any(wide):
                        break
                    m = 0.5 * (a + b)
                    gm = gap(m, idx)
                    below = gm <= 0
                    b = np.where(wide & below, m, b)
                    a = np.where(wide & ~below, m, a)
                t_hit[idx] = 0.5 * (a + b)
            lo[active] = hi
            active = active[~crossed & ~done]
        hitpts = p + np.where(np.isfinite(t_hit), t_hit, 0.0)[:, None] * d
        nrm = self.normal(hitpts[:, 0], hitpts[:, 1])
        return t_hit, nrm

    def __repr__(self):
        return f"{type(self).__name__}(c1={self.c1}, c2={self.c2}, params={self.params})"


class FlatCell(SurfaceCell):
    family = "flat"
    analytic_intersection = True

    def height(self, x1, x2):
        return np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape)

    def gradient(self, x1, x2):
        shape = np.broadcast(np.asarray(x1), np.asarray(x2)).shape
        return np.zeros(shape), np.zeros(shape)

    def max_height(self):
        return 0.0

    def min_height(self):
        return 0.0

    def intersect(self, p, d, t_max, t_min=None):
        p = np.atleast_2d(p)
        d = np.atleast_2d(d)
        if t_min is None:
            t_min = 1e-10 * self.size
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(d[:, 2] < 0, -p[:, 2] / d[:, 2], np.inf)
        t = np.where((t > t_min) & (t < t_max), t, np.inf)
        nrm = np.zeros((len(p), 3))
        nrm[:, 2] = 1.0
        return t, nrm


class EllipsoidCapCell(SurfaceCell):
    """Cap of the ellipsoid ``(x1/A1)^2 + (x2/A2)^2 + ((z+K)/B)^2 = 1``.

    The relief is ``f = B sqrt(1 - q) - K`` with ``q = (x1/A1)^2 + (x2/A2)^2``.
    Where ``q >= 1`` inside the rectangle (only possible for a loosely packed
    sphere cell) the relief is the flat floor ``z = -K``.
    """

    analytic_intersection = True

    def __init__(self, c1, c2, A1, A2, B, K, family="ellipsoid", params=None):
        super().__init__(c1, c2, params)
        if min(A1, A2, B) <= 0:
            raise InvalidFamilyParams("ellipsoid semi-axes must be positive")
        self.A1, self.A2, self.B, self.K = float(A1), float(A2), float(B), float(K)
        self.family = family
        self.covers = (self.c1 / self.A1) ** 2 + (self.c2 / self.A2) ** 2 < 1.0

    def _q(self, x1, x2):
        return (np.asarray(x1) / self.A1) ** 2 + (np.asarray(x2) / self.A2) ** 2

    def height(self, x1, x2):
        q = self._q(x1, x2)
        return self.B * np.sqrt(np.maximum(1.0 - q, 0.0)) - self.K

    def gradient(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        q = self._q(x1, x2)
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(1.0 - q)
            g1 = np.where(q < 1.0, -self.B * x1 / (self.A1**2 * root), 0.0)
            g2 = np.where(q < 1.0, -self.B * x2 / (self.A2**2 * root), 0.0)
        return g1, g2

    def max_height(self):
        return self.B - self.K

    def min_height(self):
        if self.covers:
            return float(self.height(self.c1, self.c2))
        return -self.K

    def intersect(self, p, d, t_max, t_min=None):
        p = np.atleast_2d(p)
        d = np.atleast_2d(d)
        n = len(p)
        if t_min is None:
            t_min = 1e-10 * self.size
        s = np.array([1 / self.A1, 1 / self.A2, 1 / self.B])
        ps = (p + np.array([0.0, 0.0, self.K])) * s
        ds = d * s
        a = np.einsum("ij,ij->i", ds, ds)
        b = np.einsum("ij,ij->i", ps, ds)
        c = np.einsum("ij,ij->i", ps, ps) - 1.0
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        # numerically stable pair of roots
        qq = -(b + np.copysign(sq, b))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = qq / a
            r2 = np.where(qq != 0, c / qq, -b / a)
        t_lo = np.minimum(r1, r2)
        t = np.where(ok & (t_lo > t_min), t_lo, np.inf)
        zc = p[:, 2] + self.K + t * d[:, 2]
        t = np.where(np.isfinite(t) & (zc >= 0), t, np.inf)
        if not self.covers:
            # the cap only exists over q < 1; elsewhere the relief is the floor
            x = p + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            t = np.where(np.isfinite(t) & (self._q(x[:, 0], x[:, 1]) <= 1.0), t, np.inf)
            with np.errstate(divide="ignore", invalid="ignore"):
                tf = np.where(d[:, 2] < 0, (-self.K - p[:, 2]) / d[:, 2], np.inf)
            xf = p + np.where(np.isfinite(tf), tf, 0.0)[:, None] * d
            tf = np.where((tf > t_min) & (self._q(xf[:, 0], xf[:, 1]) >= 1.0), tf, np.inf)
            use_floor = tf < t
            t = np.where(use_floor, tf, t)
        else:
            use_floor = np.zeros(n, dtype=bool)
        t = np.where(t < t_max, t, np.inf)
        hit = p + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        grad = np.stack(
            [hit[:, 0] / self.A1**2, hit[:, 1] / self.A2**2, (hit[:, 2] + self.K) / self.B**2],
            axis=-1,
        )
        nrm = grad / np.linalg.norm(grad, axis=1, keepdims=True).clip(1e-300)
        nrm[use_floor] = (0.0, 0.0, 1.0)
        return t, nrm


class GridCell(SurfaceCell):
    """Relief interpolated from heights sampled on the closed rectangle.

    ``heights[i, j]`` is ``f`` at ``x1 = -c1 + 2 c1 i/(n1-1)``,
    ``x2 = -c2 + 2 c2 j/(n2-1)``.  Opposite edges must agree (periodic tile).
    A bicubic spline through a periodically padded copy of the samples gives
    ``f`` and its gradient.
    """

    family = "grid"
    analytic_intersection = False
    _PAD = 3

    def __init__(self, c1, c2, heights, params=None):
        super().__init__(c1, c2, params)
        H = np.asarray(heights, dtype=float)
        if H.ndim != 2 or min(H.shape) < 4:
            raise InvalidFamilyParams("grid heights must be a 2-D array with at least 4x4 samples")
        if not np.all(np.isfinite(H)):
            raise InvalidFamilyParams("grid heights must be finite")
        span = max(np.ptp(H), 1e-300)
        if np.max(np.abs(H[0] - H[-1])) > 1e-9 * span or np.max(np.abs(H[:, 0] - H[:, -1])) > 1e-9 * span:
            raise InvalidFamilyParams("grid heights are not periodic: first and last rows/columns differ")
        self.heights = H.copy()
        self.heights.setflags(write=False)
        core = H[:-1, :-1]
        n1, n2 = core.shape
        p = self._PAD
        padded = np.pad(core, ((p, p + 1), (p, p + 1)), mode="wrap")
        dx1 = 2 * self.c1 / n1
        dx2 = 2 * self.c2 / n2
        g1 = -self.c1 + dx1 * np.arange(-p, n1 + p + 1)
        g2 = -self.c2 + dx2 * np.arange(-p, n2 + p + 1)
        self._spline = RectBivariateSpline(g1, g2, padded, kx=3, ky=3, s=0)
        self._fmax = None
        self._fmin = None

    def height(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        return self._spline.ev(x1, x2)

    def gradient(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        return self._spline.ev(x1, x2, dx=1), self._spline.ev(x1, x2, dy=1)

    def max_height(self):
        if self._fmax is None:
            self._fmax = super().max_height() + 1e-3 * max(np.ptp(self.heights), 1e-12)
        return self._fmax

    def min_height(self):
        if self._fmin is None:
            self._fmin = super().min_height() - 1e-3 * max(np.ptp(self.heights), 1e-12)
        return self._fmin


# ---------------------------------------------------------------------------
# construction


def make_cell(family: str, **params) -> SurfaceCell:
    """Build a cell from a family name and its parameters.

    Families
    --------
    ``flat``: ``c1``, ``c2`` (default 1).
    ``ellipsoid``: ``a1, a2, b, c1, c2, eps``; ``a`` and ``c`` are shorthands
    for isotropic axes.  The relief is the polished ellipsoid piece
    ``f_eps = (b/eps) [sqrt(1 - (eps x1/a1)^2 - (eps x2/a2)^2) - corner]``.
    ``sphere_packing``: ``r_s`` (sphere radius), ``r_m`` (molecule radius).
    The effective relief is a cap of radius ``r_s + r_m`` over the square of
    half-width ``r_s``.
    ``grid``: ``heights`` (2-D array) and ``c1, c2``, or ``path`` to a CSV
    file (see :func:`load_grid_csv`).
    """
    family = family.lower().replace("-", "_")
    try:
        if family == "flat":
            return FlatCell(params.get("c1", 1.0), params.get("c2", 1.0), {"c1": params.get("c1", 1.0), "c2": params.get("c2", 1.0)})
        if family == "ellipsoid":
            return _make_ellipsoid(**params)
        if family == "sphere_packing":
            return _make_sphere_packing(**params)
        if family in ("grid", "custom"):
            if "path" in params:
                return load_grid_csv(params["path"])
            return GridCell(params["c1"], params["c2"], params["heights"])
    except (KeyError, TypeError) as exc:
        raise InvalidFamilyParams(f"bad parameters for family {family!r}: {exc}") from exc
    raise InvalidFamilyParams(f"unknown cell family {family!r}")


def _make_ellipsoid(eps, a=None, a1=None, a2=None, b=1.0, c=None, c1=None, c2=None):
    a1 = a1 if a1 is not None else (a if a is not None else 1.0)
    a2 = a2 if a2 is not None else (a if a is not None else 1.0)
    c1 = c1 if c1 is not None else (c if c is not None else 1.0)
    c2 = c2 if c2 is not None else (c if c is not None else 1.0)
    if min(a1, a2, b, c1, c2, eps) <= 0:
        raise InvalidFamilyParams("ellipsoid parameters must be positive")
    corner = 1.0 - (eps * c1 / a1) ** 2 - (eps * c2 / a2) ** 2
    if corner <= 0:
        raise InvalidFamilyParams("ellipsoid does not cover the cell: eps too large for the given axes")
    params = dict(a1=a1, a2=a2, b=b, c1=c1, c2=c2, eps=eps)
    B = b / eps
    return EllipsoidCapCell(c1, c2, a1 / eps, a2 / eps, B, B * np.sqrt(corner), "ellipsoid", params)


def _make_sphere_packing(r_s, r_m):
    if r_s <= 0 or r_m <= 0:
        raise InvalidFamilyParams("sphere radii must be positive")
    Rc = r_s + r_m
    if r_m / r_s < 0.4:
        warnings.warn(
            f"r_m/r_s = {r_m / r_s:.3g} < 0.4: flatness exceeds 1, small-roughness theory does not apply",
            RegimeWarning,
            stacklevel=3,
        )
    K = np.sqrt(max(Rc**2 - 2 * r_s**2, 0.0))
    return EllipsoidCapCell(r_s, r_s, Rc, Rc, Rc, K, "sphere_packing", dict(r_s=r_s, r_m=r_m))


def sphere_packing_sigma(sigma: float, r_s: float = 1.0) -> SurfaceCell:
    """Sphere-packing cell parametrized by ``sigma = r_s/(r_s + r_m)``."""
    if not 0 < sigma < 1:
        raise InvalidFamilyParams("sigma must lie in (0, 1)")
    return _make_sphere_packing(r_s, r_s * (1.0 / sigma - 1.0))


def load_grid_csv(path) -> GridCell:
    """Read a custom relief: a ``c1,c2`` header row, their values, then heights."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    try:
        header = [h.strip() for h in rows[0]]
        vals = dict(zip(header, map(float, rows[1])))
        heights = np.array([[float(v) for v in r] for r in rows[2:]])
        return GridCell(vals["c1"], vals["c2"], heights, {"path": str(path)})
    except (IndexError, KeyError, ValueError) as exc:
        raise InvalidFamilyParams(f"malformed grid CSV {path}: {exc}") from exc


def save_grid_csv(path, c1, c2, heights):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c1", "c2"])
        w.writerow([repr(float(c1)), repr(float(c2))])
        for row in np.asarray(heights, dtype=float):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# signature parameters


@dataclass(frozen=True)
class MicroParams:
    h: float
    A: np.ndarray
    Lambda: np.ndarray
    lambda1: float
    lambda2: float
    isotropic: bool
    quadrature_error: float = 0.0
    flags: tuple = field(default=())

    @property
    def lam(self) -> float:
        """Scalar shape parameter (mean of the two eigenvalues)."""
        return 0.5 * (self.lambda1 + self.lambda2)

    @property
    def lambda_h(self) -> float:
        return self.lam * self.h

    def to_dict(self) -> dict:
        return {
            "h": float(self.h),
            "A": np.asarray(self.A).tolist(),
            "Lambda": np.asarray(self.Lambda).tolist(),
            "lambda1": float(self.lambda1),
            "lambda2": float(self.lambda2),
            "isotropic": bool(self.isotropic),
            "lambda_h": float(self.lambda_h),
            "quadrature_error": float(self.quadrature_error),
            "flags": list(self.flags),
        }


def _grad_sq(cell, x1, x2):
    g1, g2 = cell.gradient(x1, x2)
    return g1 * g1 + g2 * g2


def compute_flatness(cell: SurfaceCell, n: int = 129, rtol: float = 1e-4) -> float:
    """Flatness ``h = max |grad f|^2`` over the closed cell opening.

    The maximum is located on an ``n x n`` grid that includes the rectangle
    boundary and then polished with a bounded quasi-Newton search started at
    the grid argmax.
    """
    if n < 64:
        raise ValueError("flatness grid must have at least 64 points per axis")
    x = np.linspace(-cell.c1, cell.c1, n)
    y = np.linspace(-cell.c2, cell.c2, n)
    X, Y = np.meshgrid(x, y, indexing="ij")
    G = _grad_sq(cell, X, Y)
    if not np.all(np.isfinite(G)):
        return float("inf")
    k = np.unravel_index(np.argmax(G), G.shape)
    best = float(G[k])
    if best == 0.0:
        return 0.0
    res = minimize(
        lambda z: -float(_grad_sq(cell, z[0], z[1])),
        x0=[X[k], Y[k]],
        method="L-BFGS-B",
        bounds=[(-cell.c1, cell.c1), (-cell.c2, cell.c2)],
        options={"ftol": rtol * 1e-3, "gtol": 1e-12},
    )
    return max(best, -float(res.fun))


def _normal_tangential_moments(cell, n):
    x1, x2, w = rectangle_rule(cell.c1, cell.c2, n)
    g1, g2 = cell.gradient(x1, x2)
    nrm = np.sqrt(1.0 + g1 * g1 + g2 * g2)
    nb = np.stack([-g1 / nrm, -g2 / nrm])
    return (nb * w) @ nb.T / cell.area


def compute_shape_matrix(cell: SurfaceCell, n: int = 128, h: Optional[float] = None) -> MicroParams:
    """Average outer product ``A`` of the tangential normal and ``Lambda = A/h``.

    ``A`` is integrated with a tensor Gauss-Legendre rule; the rule is rerun
    with ``2n`` nodes and the difference is returned as ``quadrature_error``.
    """
    if h is None:
        h = compute_flatness(cell)
    if not h > 1e-12:
        raise DegenerateFlat(f"flatness h={h:g} too small: shape matrix undefined")
    A = _normal_tangential_moments(cell, n)
    A_fine = _normal_tangential_moments(cell, 2 * n)
    err = float(np.max(np.abs(A_fine - A)) / max(np.max(np.abs(A_fine)), 1e-300))
    A = 0.5 * (A_fine + A_fine.T)
    Lam = A / h
    evals = np.linalg.eigvalsh(Lam)[::-1]
    flags = []
    if h > LOW_ROUGHNESS_LIMIT:
        flags.append(f"h={h:.4g} exceeds {LOW_ROUGHNESS_LIMIT}: outside the low-roughness regime")
    iso = bool(abs(evals[0] - evals[1]) <= ISOTROPY_TOL)
    if not iso:
        flags.append("anisotropic shape matrix: scalar lambda is the mean eigenvalue")
    return MicroParams(
        h=float(h),
        A=A,
        Lambda=Lam,
        lambda1=float(evals[0]),
        lambda2=float(max(evals[1], 0.0)),
        isotropic=iso,
        quadrature_error=err,
        flags=tuple(flags),
    )


def roughness_classical(cell: SurfaceCell, n: int = 512):
    """Average roughness ``Ra`` and root-mean-square roughness ``Rms``."""
    x1, x2, w = rectangle_rule(cell.c1, cell.c2, n)
    f = cell.height(x1, x2)
    w = w / cell.area
    dev = f - np.dot(w, f)
    return float(np.dot(w, np.abs(dev))), float(np.sqrt(np.dot(w, dev * dev)))


def ellipsoid_for_flatness(h_target: float, a=1.0, b=1.0, c=1.0) -> SurfaceCell:
    """Isotropic ellipsoid cell whose flatness equals ``h_target``.

    On this family ``|grad f|^2`` peaks at the cell corners, where it equals
    ``2 (b c eps)^2 / (a^4 - 2 (a c eps)^2)``; the relation is inverted for
    ``eps``.
    """
    if h_target <= 0:
        raise InvalidFamilyParams("target flatness must be positive")
    # h = 2 b^2 c^2 e^2 / (a^4 - 2 a^2 c^2 e^2)  =>  e^2 = h a^4 / (2 c^2 (b^2 + h a^2))
    eps = np.sqrt(h_target * a**4 / (2 * c**2 * (b**2 + h_target * a**2)))
    return make_cell("ellipsoid", a=a, b=b, c=c, eps=float(eps))
