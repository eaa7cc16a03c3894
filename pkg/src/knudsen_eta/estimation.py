"""Spectral analysis of a discretized scattering operator.

The velocity disc is split into equal-area polar bins, so the cosine law
becomes the uniform vector and detailed balance becomes matrix symmetry.
From a row-stochastic matrix ``P`` and the bin averages of the axial
displacement ``X`` this module computes the diffusivity enhancement through
the Markov-Poisson solve and through the spectral decomposition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .errors import SingularOperator, SpectrumOutOfRange
from .quadrature import gauss_legendre

GAP_TOL = 1e-6
DENSE_LIMIT = 1000


@dataclass(frozen=True)
class DiscPartition:
    """``n_r`` equal-area rings times ``n_theta`` equal sectors of the unit disc.

    Ring ``i`` covers ``|u|^2`` in ``[i/n_r, (i+1)/n_r)``; bin index is
    ``i * n_theta + j``.
    """

    n_r: int
    n_theta: int

    def __post_init__(self):
        if self.n_r < 1 or self.n_theta < 1:
            raise ValueError("partition needs at least one ring and one sector")

    @property
    def n_bins(self) -> int:
        return self.n_r * self.n_theta

    def edges(self, b):
        b = np.asarray(b)
        i, j = np.divmod(b, self.n_theta)
        s0, s1 = i / self.n_r, (i + 1) / self.n_r
        t0 = 2 * np.pi * j / self.n_theta
        t1 = 2 * np.pi * (j + 1) / self.n_theta
        return s0, s1, t0, t1

    def areas(self) -> np.ndarray:
        s0, s1, t0, t1 = self.edges(np.arange(self.n_bins))
        return 0.5 * (s1 - s0) * (t1 - t0)

    def centroids(self) -> np.ndarray:
        s0, s1, t0, t1 = self.edges(np.arange(self.n_bins))
        r0, r1 = np.sqrt(s0), np.sqrt(s1)
        rbar = (2.0 / 3.0) * (r1**3 - r0**3) / (r1**2 - r0**2)
        # angular centroid of a sector of half-angle a: sin(a)/a
        a = 0.5 * (t1 - t0)
        rc = rbar * np.where(a > 0, np.sinc(a / np.pi), 1.0)
        tm = 0.5 * (t0 + t1)
        return np.column_stack([rc * np.cos(tm), rc * np.sin(tm)])

    def bin_of(self, u) -> np.ndarray:
        u = np.atleast_2d(u)
        s = np.einsum("ij,ij->i", u, u)
        i = np.minimum((s * self.n_r).astype(np.int64), self.n_r - 1)
        th = np.mod(np.arctan2(u[:, 1], u[:, 0]), 2 * np.pi)
        j = np.minimum((th * self.n_theta / (2 * np.pi)).astype(np.int64), self.n_theta - 1)
        return i * self.n_theta + j

    def sample_in_bin(self, b, n, rng) -> np.ndarray:
        """``n`` points uniform within bin(s) ``b`` (scalar or length-``n`` array)."""
        s0, s1, t0, t1 = self.edges(b)
        s = s0 + (s1 - s0) * rng.random(n)
        th = t0 + (t1 - t0) * rng.random(n)
        r = np.sqrt(s)
        return np.column_stack([r * np.cos(th), r * np.sin(th)])

    def to_dict(self):
        return {"n_r": self.n_r, "n_theta": self.n_theta}


@dataclass
class TransitionMatrix:
    """Row-stochastic discretization of the scattering operator."""

    P: np.ndarray
    partition: DiscPartition
    counts: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        N = self.partition.n_bins
        if self.P.shape != (N, N):
            raise ValueError(f"matrix shape {self.P.shape} does not match partition with {N} bins")
        if np.any(self.P < 0):
            raise ValueError("transition probabilities must be non-negative")
        if np.max(np.abs(self.P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows must sum to one")
        if self.counts is None:
            self.counts = np.zeros(N, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def asymmetry(self) -> float:
        return float(np.max(np.abs(self.P - self.P.T)))

    def asymmetry_noise(self) -> float:
        """Binomial standard error of the largest entry difference ``P - P^T``."""
        n = np.maximum(np.asarray(self.counts, dtype=float), 1.0)
        var = self.P * (1 - self.P) / n[:, None]
        sd = np.sqrt(var + var.T)
        k = np.unravel_index(np.argmax(np.abs(self.P - self.P.T)), self.P.shape)
        return float(sd[k])

    def symmetry_zscore(self) -> float:
        """Largest ``|P_ij - P_ji|`` in units of its binomial standard error."""
        n = np.maximum(np.asarray(self.counts, dtype=float), 1.0)
        var = self.P * (1 - self.P) / n[:, None]
        sd = np.sqrt(var + var.T)
        diff = np.abs(self.P - self.P.T)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, diff / sd, np.where(diff > 0, np.inf, 0.0))
        return float(np.max(z))

    def sample_next(self, u, rng) -> np.ndarray:
        """Scatter projections ``u`` by the chain: next bin by row, point uniform in it."""
        src = self.partition.bin_of(u)
        cdf = np.cumsum(self.P, axis=1)
        cdf[:, -1] = 1.0
        x = rng.random(len(src))
        dst = np.array([np.searchsorted(cdf[s], xi, side="right") for s, xi in zip(src, x)])
        dst = np.minimum(dst, self.n - 1)
        return self.partition.sample_in_bin(dst, len(dst), rng)

    # --- serialization ---------------------------------------------------
    def header(self) -> dict:
        return {
            "format": "knudsen-eta transition matrix",
            "partition": self.partition.to_dict(),
            "counts": np.asarray(self.counts).tolist(),
            "meta": self.meta,
        }

    def save(self, path):
        """CSV body with a one-line JSON header prefixed by ``#``."""
        with open(path, "w") as fh:
            fh.write("# " + json.dumps(self.header(), sort_keys=True) + "\n")
            np.savetxt(fh, self.P, delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "TransitionMatrix":
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise ValueError(f"{path}: missing JSON header")
            head = json.loads(first[2:])
            P = np.loadtxt(fh, delimiter=",", ndmin=2)
        part = DiscPartition(**head["partition"])
        return cls(P=P, partition=part, counts=np.array(head["counts"], dtype=np.int64), meta=head.get("meta", {}))


def diffuse_transition_matrix(partition: DiscPartition) -> TransitionMatrix:
    """Exact matrix of the diffuse (cosine-law resampling) source."""
    N = partition.n_bins
    return TransitionMatrix(np.full((N, N), 1.0 / N), partition, meta={"source": "diffuse-exact"})


# ---------------------------------------------------------------------------
# binned displacement


def binned_displacement(partition: DiscPartition, R: float = 1.0, n_quad: int = 64) -> np.ndarray:
    """Bin averages of the axial displacement ``X(u)`` (speed normalized to 1).

    The angular integral is done in closed form,
    ``int X dtheta = -2 R arctan(r cos(theta) / sqrt(1 - r^2))``, and the
    radial one with Gauss-Legendre in ``t = sqrt(1 - r^2)``, which removes
    the square-root behaviour at the rim.
    """
    s0, s1, t0, t1 = partition.edges(np.arange(partition.n_bins))
    x, w = gauss_legendre(n_quad)
    ta, tb = np.sqrt(1 - s1), np.sqrt(1 - s0)  # t decreases as s grows
    half = 0.5 * (tb - ta)
    T = ta[:, None] + half[:, None] * (x[None, :] + 1)
    W = half[:, None] * w[None, :]
    r = np.sqrt(1 - T**2)
    c0 = np.cos(t0)[:, None]
    c1 = np.cos(t1)[:, None]
    ang = 2 * R * (np.arctan2(r * c0, T) - np.arctan2(r * c1, T))
    # r dr = -t dt
    integral = np.sum(W * T * ang, axis=1)
    area = 0.5 * (s1 - s0) * (t1 - t0)
    return integral / area


# ---------------------------------------------------------------------------
# stationary measure and reversibilization


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Left Perron vector of a row-stochastic matrix, normalized to sum 1."""
    N = P.shape[0]
    if N <= DENSE_LIMIT:
        M = (np.eye(N) - P).T
        M[-1, :] = 1.0
        rhs = np.zeros(N)
        rhs[-1] = 1.0
        try:
            pi = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            return np.full(N, 1.0 / N)
    else:
        vals, vecs = spla.eigs(P.T, k=1, which="LR")
        pi = np.real(vecs[:, 0])
    pi = np.abs(pi)
    return pi / pi.sum()


def symmetrized(P: np.ndarray, pi: np.ndarray = None):
    """Additive reversibilization of ``P`` in symmetric form.

    With ``D = diag(pi)`` returns ``S = D^{1/2} (P + D^{-1} P^T D)/2 D^{-1/2}``,
    which equals ``(P + P^T)/2`` when ``pi`` is uniform.  ``S`` is symmetric,
    its spectrum lies in ``[-1, 1]`` and its top eigenvector is
    ``sqrt(pi)``.
    """
    if pi is None:
        pi = stationary_distribution(P)
    sq = np.sqrt(pi)
    S = sq[:, None] * P / sq[None, :]
    return 0.5 * (S + S.T), pi


@dataclass
class SpectralReport:
    eta: float
    eigenvalues: np.ndarray
    weights: np.ndarray
    symmetrization_defect: float
    top_weight: float
    stationarity_defect: float

    def to_dict(self, top: int = 20):
        order = np.argsort(self.eigenvalues)[::-1][:top]
        return {
            "eta": float(self.eta),
            "top_eigenvalues": self.eigenvalues[order].tolist(),
            "top_weights": self.weights[order].tolist(),
            "symmetrization_defect": float(self.symmetrization_defect),
            "weight_on_unit_eigenvalue": float(self.top_weight),
            "stationarity_defect": float(self.stationarity_defect),
        }


def _as_matrix(P):
    return P.P if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=float)


def spectral_gap(P) -> float:
    """``1 -`` largest eigenvalue of the symmetrized operator off the constants."""
    M = _as_matrix(P)
    S, pi = symmetrized(M)
    vals = np.linalg.eigvalsh(S) if M.shape[0] <= DENSE_LIMIT else spla.eigsh(S, k=2, which="LA")[0]
    vals = np.sort(vals)
    if len(vals) < 2:
        return 0.0
    return float(1.0 - vals[-2])


def _center(M, X):
    pi = stationary_distribution(M)
    X = np.asarray(X, dtype=float)
    uniform_mean = float(X.mean())
    Xc = X - np.dot(pi, X)
    return Xc, pi, uniform_mean


@dataclass
class PoissonSolution:
    Y: np.ndarray
    X: np.ndarray
    pi: np.ndarray
    residual: float
    mean_removed: float
    gap: float


def solve_markov_poisson(P, X_binned, tol: float = 1e-10) -> PoissonSolution:
    """Solve ``(I - P) Y = X`` on the complement of the constants.

    ``X`` is first centred under the stationary distribution of ``P`` (the
    uniform vector for an exact matrix); the removed mean is reported.  The
    returned ``Y`` has zero uniform mean.  Small systems use the bordered
    dense solve ``(I - P + 1 w^T) Y = X`` with ``w`` the uniform weights,
    larger ones GMRES on the same operator.
    """
    M = _as_matrix(P)
    N = M.shape[0]
    gap = spectral_gap(M)
    if gap < GAP_TOL:
        raise SingularOperator(f"spectral gap {gap:.3g} below {GAP_TOL}: I - P is not invertible")
    Xc, pi, mean = _center(M, X_binned)
    w = np.full(N, 1.0 / N)
    if N <= DENSE_LIMIT:
        A = np.eye(N) - M + np.outer(np.ones(N), w)
        Y = scipy.linalg.solve(A, Xc)
    else:
        op = spla.LinearOperator((N, N), matvec=lambda y: y - M @ y + np.dot(w, y), dtype=float)
        Y, info = spla.gmres(op, Xc, rtol=tol, atol=0.0, restart=200, maxiter=10_000)
        if info != 0:
            raise SingularOperator(f"GMRES did not converge (info={info})")
    Y = Y - Y.mean()
    res = np.linalg.norm(Y - M @ Y - Xc) / max(np.linalg.norm(Xc), 1e-300)
    return PoissonSolution(Y=Y, X=Xc, pi=pi, residual=float(res), mean_removed=mean, gap=gap)


def eta_key_formula(P, X_binned, x_norm_sq: float = None) -> float:
    """Enhancement ``1 + 2 <X, P Y> / <X, X>`` with ``(I - P) Y = X``.

    Inner products are weighted by the stationary distribution (uniform bins
    for an exact matrix).  ``x_norm_sq`` overrides the denominator, e.g. with
    the second moment of the unbinned displacement.
    """
    M = _as_matrix(P)
    sol = solve_markov_poisson(M, X_binned)
    num = np.dot(sol.pi, sol.X * (M @ sol.Y))
    den = np.dot(sol.pi, sol.X**2) if x_norm_sq is None else x_norm_sq
    if den <= 0:
        raise ValueError("displacement vector has zero norm")
    return float(1.0 + 2.0 * num / den)


def eta_spectral_measure(P, X_binned, x_norm_sq: float = None, top_tol: float = 1e-9) -> SpectralReport:
    """Enhancement as the integral of ``(1 + l)/(1 - l)`` against the spectral
    measure of ``X``.

    ``P`` is reversibilized (see :func:`symmetrized`) and fully diagonalized;
    eigenvalues within ``top_tol`` of 1 are excluded and the weight they
    carry is reported (it must vanish for a centred ``X``).
    """
    M = _as_matrix(P)
    S, pi = symmetrized(M)
    defect = float(np.max(np.abs(M - M.T)))
    stat_defect = float(np.max(np.abs(pi * len(pi) - 1.0)))
    vals, vecs = np.linalg.eigh(S)
    if np.any(np.abs(vals) > 1 + top_tol):
        raise SpectrumOutOfRange(f"eigenvalue {vals[np.argmax(np.abs(vals))]:.12g} outside [-1, 1]")
    X = np.asarray(X_binned, dtype=float)
    Xc = X - np.dot(pi, X)
    g = np.sqrt(pi) * Xc  # L2(pi) -> Euclidean
    den = float(np.dot(g, g)) if x_norm_sq is None else x_norm_sq
    coeff = vecs.T @ g
    weights = coeff**2 / den
    top = vals >= 1 - top_tol
    top_weight = float(weights[top].sum())
    if top_weight > 1e-6:
        raise SpectrumOutOfRange(f"displacement carries weight {top_weight:.3g} on the unit eigenvalue")
    lam = vals[~top]
    eta = float(np.sum(weights[~top] * (1 + lam) / (1 - lam)))
    if x_norm_sq is not None:
        # within-bin fluctuations of X are uncorrelated between steps
        eta += 1.0 - float(np.dot(g, g)) / x_norm_sq
    return SpectralReport(eta, vals, weights, defect, top_weight, stat_defect)
